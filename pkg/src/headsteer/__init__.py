"""Few-shot attention-head selection and selective LoRA finetuning for a desk-scale action policy."""

__version__ = "0.1.0"
