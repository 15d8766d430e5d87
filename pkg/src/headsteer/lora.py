"""Per-head LoRA adapters and the trainability mask.

Adapters sit on individual head slices (``layer{l}.q_head{h}``, optionally
``layer{l}.o_head{h}``), never on the fused projection, so adapting one head
cannot touch another. Key/value tensors are shared by all heads of a layer
and are therefore always frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ContractError
from .numkit import STORE_DTYPE
from .policy import LoraAdapter, PolicyParams, tensor_shapes

VARIANTS = ("queries_only", "queries_plus_mlp", "full_head_baseline")
DEFAULT_RANK = 8
INIT_STD = 0.01


class HeadId(NamedTuple):
    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"

    @classmethod
    def parse(cls, text: str) -> "HeadId":
        t = text.strip().upper()
        if not t.startswith("L") or "H" not in t:
            raise ContractError(f"cannot parse head id {text!r}")
        l, h = t[1:].split("H")
        return cls(int(l), int(h))


def all_heads(n_layers: int, n_heads: int) -> list[HeadId]:
    return [HeadId(l, h) for l in range(n_layers) for h in range(n_heads)]


def _aux_names(names: Iterable[str]) -> set[str]:
    return {n for n in names if n.startswith(("action_head.", "time_embed."))}


@dataclass(frozen=True)
class TrainMask:
    """Which tensors a finetune may change, and how.

    ``lora_targets`` get rank-r adapters (the base tensor itself stays
    frozen); ``direct`` tensors receive full Adam updates. ``frozen`` is the
    set of base tensors that must be byte-identical after training, i.e.
    every base tensor not in ``direct``.
    """

    variant: str
    selected_heads: tuple[HeadId, ...]
    lora_targets: frozenset[str]
    direct: frozenset[str]
    all_tensors: frozenset[str]

    @property
    def adapted_tensors(self) -> frozenset[str]:
        return self.lora_targets | self.direct

    @property
    def frozen_tensors(self) -> frozenset[str]:
        return self.all_tensors - self.adapted_tensors

    def trainable_names(self) -> frozenset[str]:
        """Names that receive gradients: direct tensors plus adapter matrices."""
        lora = {f"{t}.lora.{m}" for t in self.lora_targets for m in ("A", "B")}
        return frozenset(self.direct | lora)

    def digest(self) -> str:
        text = "\n".join(
            [self.variant, ",".join(map(str, self.selected_heads))]
            + sorted("L:" + n for n in self.lora_targets)
            + sorted("D:" + n for n in self.direct)
        )
        return hashlib.sha256(text.encode()).hexdigest()


def build_mask(
    params_or_shapes,
    selected: Iterable[HeadId],
    variant: str = "queries_plus_mlp",
    *,
    adapt_output_slices: bool = True,
) -> TrainMask:
    """Build the trainability mask for a steering variant or the full-head baseline."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    if isinstance(params_or_shapes, PolicyParams):
        cfg = params_or_shapes.config
    else:
        cfg = params_or_shapes
    names = frozenset(tensor_shapes(cfg))
    L, H = cfg.n_layers, cfg.n_heads
    sel = sorted({HeadId(*h) for h in selected})
    for h in sel:
        if not (0 <= h.layer < L and 0 <= h.head < H):
            raise ContractError(f"selected head {h} out of range")

    if variant == "full_head_baseline":
        heads = all_heads(L, H)
        layers = range(L)
        embed = {n for n in names if n.startswith("embed.obs.")}
    else:
        if not sel:
            raise ContractError(f"variant {variant} needs a non-empty head selection")
        heads = sel
        layers = sorted({h.layer for h in sel}) if variant == "queries_plus_mlp" else []
        embed = set()

    lora = {f"layer{h.layer}.q_head{h.head}" for h in heads}
    if adapt_output_slices:
        lora |= {f"layer{h.layer}.o_head{h.head}" for h in heads}
    direct = _aux_names(names) | embed
    for l in layers:
        direct |= {n for n in names if n.startswith(f"layer{l}.mlp.")}
    return TrainMask(
        variant=variant,
        selected_heads=tuple(sel) if variant != "full_head_baseline" else tuple(heads),
        lora_targets=frozenset(lora),
        direct=frozenset(direct),
        all_tensors=names,
    )


def trainable_param_count(cfg, mask: TrainMask, rank: int = DEFAULT_RANK) -> int:
    shapes = tensor_shapes(cfg)
    n = sum(int(np.prod(shapes[t])) for t in mask.direct)
    for t in mask.lora_targets:
        d_out, d_in = shapes[t]
        n += rank * (d_in + d_out)
    return n


def attach(
    params: PolicyParams,
    mask: TrainMask,
    rank: int = DEFAULT_RANK,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
) -> PolicyParams:
    """Attach zero-B adapters to every LoRA target of ``mask`` (in place).

    ``alpha`` defaults to ``rank`` so the effective update is exactly ``B @ A``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    alpha = float(rank if alpha is None else alpha)
    for t in sorted(mask.lora_targets):
        if t in params.adapters:
            raise ContractError(f"adapter already attached to {t}")
        d_out, d_in = params.tensors[t].shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ContractError(f"rank {rank} invalid for {t} with shape {(d_out, d_in)}")
    for t in sorted(mask.lora_targets):
        d_out, d_in = params.tensors[t].shape
        A = rng.normal(0.0, INIT_STD, (rank, d_in)).astype(STORE_DTYPE)
        B = np.zeros((d_out, rank), STORE_DTYPE)
        params.adapters[t] = LoraAdapter(t, A, B, alpha)
    return params


def merge(params: PolicyParams) -> PolicyParams:
    """Fold adapters into their base tensors; returns plain params."""
    out = PolicyParams(params.config, {k: v.copy() for k, v in params.tensors.items()})
    for t, a in params.adapters.items():
        out.tensors[t] = (params.tensors[t].astype(np.float64) + a.delta()).astype(STORE_DTYPE)
    return out
