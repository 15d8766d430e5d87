"""Desk-scale transformer action policy with exact manual backprop.

Sequence layout is ``[task, obs_0 .. obs_{n-1}, state]``. The prefix
(task + obs) attends bidirectionally within itself; the state token sees
everything and is the extraction position. Attention is multi-query: every
layer has H query heads and a single shared key/value head.

All tensors live in :class:`PolicyParams` under canonical names such as
``layer0.q_head1`` or ``layer2.mlp.in.w``. LoRA adapters are folded into
effective weights at the start of every forward pass, so the same code path
serves base, adapted and merged parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ContractError, NumericFault
from .numkit import ACC_DTYPE, STORE_DTYPE, RngStream

ACTION_HEAD_KINDS = ("regression", "flow_matching")
TAP_POSITIONS = ("state", "last_obs")
FLOW_STEPS = 10
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_action: int = 3
    n_obs_tokens: int = 5
    obs_features: int = 12
    state_features: int = 3
    n_tasks: int = 8
    mlp_ratio: int = 4
    action_head_kind: str = "regression"
    flow_hidden: int = 64
    time_freqs: int = 4
    time_dim: int = 16
    pos_emb: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ContractError("n_heads must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.action_head_kind not in ACTION_HEAD_KINDS:
            raise ContractError(f"unknown action_head_kind {self.action_head_kind!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return self.mlp_ratio * self.d_model

    @property
    def seq_len(self) -> int:
        return self.n_obs_tokens + 2

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def tensor_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape for every base tensor, sorted by name."""
    D, dh, F = cfg.d_model, cfg.d_head, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {
        "embed.task": (cfg.n_tasks, D),
        "embed.obs.w": (D, cfg.obs_features),
        "embed.obs.b": (D,),
        "embed.state.w": (D, cfg.state_features),
        "embed.state.b": (D,),
        "ln_f.g": (D,),
        "ln_f.b": (D,),
    }
    if cfg.pos_emb:
        shapes["embed.pos"] = (cfg.seq_len, D)
    for l in range(cfg.n_layers):
        p = f"layer{l}"
        for h in range(cfg.n_heads):
            shapes[f"{p}.q_head{h}"] = (dh, D)
            shapes[f"{p}.o_head{h}"] = (D, dh)
        shapes[f"{p}.kv"] = (2 * dh, D)
        shapes[f"{p}.ln1.g"] = (D,)
        shapes[f"{p}.ln1.b"] = (D,)
        shapes[f"{p}.ln2.g"] = (D,)
        shapes[f"{p}.ln2.b"] = (D,)
        shapes[f"{p}.mlp.in.w"] = (F, D)
        shapes[f"{p}.mlp.in.b"] = (F,)
        shapes[f"{p}.mlp.out.w"] = (D, F)
        shapes[f"{p}.mlp.out.b"] = (D,)
    if cfg.action_head_kind == "regression":
        shapes["action_head.w"] = (cfg.d_action, D)
        shapes["action_head.b"] = (cfg.d_action,)
    else:
        n_in = D + cfg.d_action + cfg.time_dim
        shapes["action_head.in.w"] = (cfg.flow_hidden, n_in)
        shapes["action_head.in.b"] = (cfg.flow_hidden,)
        shapes["action_head.out.w"] = (cfg.d_action, cfg.flow_hidden)
        shapes["action_head.out.b"] = (cfg.d_action,)
        shapes["time_embed.w"] = (cfg.time_dim, 2 * cfg.time_freqs)
        shapes["time_embed.b"] = (cfg.time_dim,)
    return dict(sorted(shapes.items()))


@dataclass
class LoraAdapter:
    """Low-rank additive update ``W' = W + (alpha / rank) * B @ A`` on one tensor."""

    target: str
    A: np.ndarray  # (rank, d_in)
    B: np.ndarray  # (d_out, rank)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.astype(ACC_DTYPE) @ self.A.astype(ACC_DTYPE))

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.target, self.A.copy(), self.B.copy(), self.alpha)


@dataclass
class PolicyParams:
    config: PolicyConfig
    tensors: dict[str, np.ndarray]
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: a.copy() for k, a in self.adapters.items()},
        )

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def astype(self, dtype) -> "PolicyParams":
        """Copy with every tensor (and adapter) cast, e.g. a float64 shadow."""
        return PolicyParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {
                k: LoraAdapter(a.target, a.A.astype(dtype), a.B.astype(dtype), a.alpha)
                for k, a in self.adapters.items()
            },
        )

    def flat_items(self) -> dict[str, np.ndarray]:
        """Base tensors plus adapter matrices under ``<target>.lora.A/.B``."""
        out = dict(self.tensors)
        for t, a in self.adapters.items():
            out[f"{t}.lora.A"] = a.A
            out[f"{t}.lora.B"] = a.B
        return dict(sorted(out.items()))

    def validate(self) -> None:
        expected = tensor_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise ContractError(f"tensor set mismatch: missing={missing} unexpected={extra}")
        for k, shp in expected.items():
            if self.tensors[k].shape != shp:
                raise ContractError(f"{k}: shape {self.tensors[k].shape} != {shp}")


def init_params(cfg: PolicyConfig, seed: int | None = None) -> PolicyParams:
    gen = RngStream(cfg.seed if seed is None else seed, stream_id=0x1A17).generator()
    resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith((".g",)):
            arr = np.ones(shape)
        elif leaf == "b" or name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "embed.task":
            arr = gen.normal(0.0, 1.0, shape)
        elif name == "embed.pos":
            arr = gen.normal(0.0, 0.1, shape)
        else:
            fan_in = shape[-1]
            arr = gen.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
            if ".o_head" in name or name.endswith("mlp.out.w"):
                arr *= resid_scale
            if name.startswith("action_head") and name.endswith("out.w") or name == "action_head.w":
                arr *= 0.5
        tensors[name] = arr.astype(STORE_DTYPE)
    return PolicyParams(cfg, tensors)


def zero_params(cfg: PolicyConfig) -> PolicyParams:
    return PolicyParams(cfg, {k: np.zeros(s, STORE_DTYPE) for k, s in tensor_shapes(cfg).items()})


# ---------------------------------------------------------------------------
# inputs


@dataclass
class TokenSequence:
    task_token: int
    obs_tokens: np.ndarray  # (n_present, obs_features)
    state_token: np.ndarray  # (state_features,)


@dataclass
class TokenBatch:
    task_ids: np.ndarray  # (B,) int
    obs: np.ndarray  # (B, n_obs, F_obs)
    obs_mask: np.ndarray  # (B, n_obs) bool
    state: np.ndarray  # (B, F_state)

    def __len__(self) -> int:
        return int(self.task_ids.shape[0])

    def take(self, idx) -> "TokenBatch":
        idx = np.asarray(idx)
        return TokenBatch(self.task_ids[idx], self.obs[idx], self.obs_mask[idx], self.state[idx])

    @classmethod
    def from_sequences(cls, seqs: list[TokenSequence], n_obs: int) -> "TokenBatch":
        B = len(seqs)
        F = np.asarray(seqs[0].obs_tokens).shape[-1]
        obs = np.zeros((B, n_obs, F), STORE_DTYPE)
        mask = np.zeros((B, n_obs), bool)
        for i, s in enumerate(seqs):
            o = np.asarray(s.obs_tokens, STORE_DTYPE).reshape(-1, F)
            if o.shape[0] > n_obs:
                raise ContractError(f"sequence {i} has {o.shape[0]} obs tokens > {n_obs}")
            obs[i, : o.shape[0]] = o
            mask[i, : o.shape[0]] = True
        return cls(
            np.array([s.task_token for s in seqs], np.int64),
            obs,
            mask,
            np.stack([np.asarray(s.state_token, STORE_DTYPE) for s in seqs]),
        )

    @classmethod
    def concat(cls, batches: list["TokenBatch"]) -> "TokenBatch":
        return cls(
            np.concatenate([b.task_ids for b in batches]),
            np.concatenate([b.obs for b in batches]),
            np.concatenate([b.obs_mask for b in batches]),
            np.concatenate([b.state for b in batches]),
        )


def check_batch(cfg: PolicyConfig, batch: TokenBatch) -> None:
    B = len(batch)
    if batch.obs.shape != (B, cfg.n_obs_tokens, cfg.obs_features):
        raise ContractError(f"obs shape {batch.obs.shape} does not match config")
    if batch.obs_mask.shape != (B, cfg.n_obs_tokens):
        raise ContractError(f"obs_mask shape {batch.obs_mask.shape} does not match config")
    if batch.state.shape != (B, cfg.state_features):
        raise ContractError(f"state shape {batch.state.shape} does not match config")
    if B and (batch.task_ids.min() < 0 or batch.task_ids.max() >= cfg.n_tasks):
        raise ContractError("task id out of range")


# ---------------------------------------------------------------------------
# primitives


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return g * xhat + b, (xhat, rstd, g)


def _ln_back(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(red)
    db = dy.sum(red)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def time_features(t: np.ndarray, n_freqs: int) -> np.ndarray:
    t = np.asarray(t, ACC_DTYPE).reshape(-1, 1)
    freqs = 2.0 ** np.arange(n_freqs) * math.pi
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=-1)


def effective_tensors(params: PolicyParams) -> dict[str, np.ndarray]:
    """float64 view of all base tensors with adapters folded in."""
    eff = {k: v.astype(ACC_DTYPE) for k, v in params.tensors.items()}
    for t, a in params.adapters.items():
        eff[t] = eff[t] + a.delta()
    return eff


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    acts: np.ndarray  # (B, L, H, d_h) head outputs at the tap position
    action: np.ndarray | None  # (B, d): action (regression) or velocity (flow)
    final_hidden: np.ndarray  # (B, D) after ln_f
    params: PolicyParams
    cache: dict | None = None


def _check(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericFault("non-finite activation", what)


def _attn_mask(batch: TokenBatch, S: int) -> np.ndarray:
    B = len(batch)
    valid = np.ones((B, S), bool)
    valid[:, 1 : S - 1] = batch.obs_mask
    allowed = np.broadcast_to(valid[:, None, :], (B, S, S)).copy()
    # prefix queries cannot see the state token
    allowed[:, : S - 1, S - 1] = False
    return allowed


def _tap_index(batch: TokenBatch, S: int, position: str) -> np.ndarray:
    B = len(batch)
    if position == "state":
        return np.full(B, S - 1)
    if position == "last_obs":
        return batch.obs_mask.sum(axis=1).astype(np.int64)  # 0 falls back to the task token
    raise ContractError(f"unknown tap position {position!r}")


def _flow_head(eff, cfg, xf, x_t, t):
    phi = time_features(t, cfg.time_freqs)
    if phi.shape[0] == 1 and xf.shape[0] > 1:
        phi = np.repeat(phi, xf.shape[0], axis=0)
    te_pre = phi @ eff["time_embed.w"].T + eff["time_embed.b"]
    te, te_t = _gelu(te_pre)
    z = np.concatenate([xf, np.asarray(x_t, ACC_DTYPE), te], axis=-1)
    h_pre = z @ eff["action_head.in.w"].T + eff["action_head.in.b"]
    h, h_t = _gelu(h_pre)
    v = h @ eff["action_head.out.w"].T + eff["action_head.out.b"]
    return v, (phi, te_pre, te_t, z, h_pre, h_t, h)


def forward(
    params: PolicyParams,
    batch: TokenBatch,
    *,
    tap: bool = True,
    head_noise: Mapping[tuple[int, int], float | np.ndarray] | None = None,
    noise_rng: np.random.Generator | None = None,
    tap_position: str = "state",
    flow_x: np.ndarray | None = None,
    flow_t: np.ndarray | None = None,
    keep_cache: bool = True,
    eff: dict[str, np.ndarray] | None = None,
) -> ForwardTrace:
    """Run the policy on a batch.

    ``head_noise`` maps ``(layer, head)`` to a noise std (scalar or per-dim);
    Gaussian noise of that scale is added to the head's output at every token
    before the output projection. Heads are visited in ``(layer, head)``
    order so a given ``noise_rng`` state always produces the same pass.

    For the flow-matching head, ``flow_x``/``flow_t`` give the noisy action and
    time; ``trace.action`` is then the predicted velocity. Without them the
    trunk runs alone and ``trace.action`` is ``None``.
    """
    cfg = params.config
    check_batch(cfg, batch)
    L, H, D, dh = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head
    B, S = len(batch), cfg.seq_len
    if eff is None:
        eff = effective_tensors(params)
    if head_noise:
        for (l, h) in head_noise:
            if not (0 <= l < L and 0 <= h < H):
                raise ContractError(f"head_noise references invalid head {(l, h)}")
        if noise_rng is None:
            raise ContractError("head_noise requires noise_rng")

    x = np.empty((B, S, D), ACC_DTYPE)
    x[:, 0] = eff["embed.task"][batch.task_ids]
    obs = batch.obs.astype(ACC_DTYPE)
    state = batch.state.astype(ACC_DTYPE)
    x[:, 1 : S - 1] = obs @ eff["embed.obs.w"].T + eff["embed.obs.b"]
    x[:, S - 1] = state @ eff["embed.state.w"].T + eff["embed.state.b"]
    if cfg.pos_emb:
        x = x + eff["embed.pos"]
    _check(x, "embed")

    allowed = _attn_mask(batch, S)
    neg = np.where(allowed, 0.0, -np.inf)[:, None]  # (B,1,S,S)
    tap_idx = _tap_index(batch, S, tap_position)
    rows = np.arange(B)
    acts = np.zeros((B, L, H, dh), ACC_DTYPE) if tap else None
    layer_caches = []
    inv_sqrt = 1.0 / math.sqrt(dh)

    for l in range(L):
        p = f"layer{l}"
        Wq = np.concatenate([eff[f"{p}.q_head{h}"] for h in range(H)])  # (H*dh, D)
        Wo = np.concatenate([eff[f"{p}.o_head{h}"] for h in range(H)], axis=1)  # (D, H*dh)
        Wkv = eff[f"{p}.kv"]

        xn, ln1 = _ln(x, eff[f"{p}.ln1.g"], eff[f"{p}.ln1.b"])
        Q = (xn @ Wq.T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)  # (B,H,S,dh)
        KV = xn @ Wkv.T
        K, V = KV[..., :dh], KV[..., dh:]
        sc = Q @ K[:, None].transpose(0, 1, 3, 2) * inv_sqrt + neg
        sc = sc - sc.max(-1, keepdims=True)
        P = np.exp(sc)
        P /= P.sum(-1, keepdims=True)
        O = P @ V[:, None]  # (B,H,S,dh)
        if head_noise:
            for (nl, nh) in sorted(head_noise):
                if nl != l:
                    continue
                sigma = np.asarray(head_noise[(nl, nh)], ACC_DTYPE)
                O[:, nh] = O[:, nh] + sigma * noise_rng.standard_normal((B, S, dh))
        for h in range(H):
            if not np.all(np.isfinite(O[:, h])):
                raise NumericFault("non-finite head output", f"{p}.head{h}")
        if tap:
            acts[:, l] = O[rows, :, tap_idx]
        Ocat = O.transpose(0, 2, 1, 3).reshape(B, S, H * dh)
        x = x + Ocat @ Wo.T

        xn2, ln2 = _ln(x, eff[f"{p}.ln2.g"], eff[f"{p}.ln2.b"])
        hp = xn2 @ eff[f"{p}.mlp.in.w"].T + eff[f"{p}.mlp.in.b"]
        a, a_t = _gelu(hp)
        x = x + a @ eff[f"{p}.mlp.out.w"].T + eff[f"{p}.mlp.out.b"]
        _check(x, p)
        if keep_cache:
            layer_caches.append(dict(xn=xn, ln1=ln1, Q=Q, K=K, V=V, P=P, Ocat=Ocat, xn2=xn2, ln2=ln2, hp=hp, a=a, a_t=a_t))

    xf, lnf = _ln(x[:, S - 1], eff["ln_f.g"], eff["ln_f.b"])
    head_cache = None
    if cfg.action_head_kind == "regression":
        action = xf @ eff["action_head.w"].T + eff["action_head.b"]
    elif flow_x is not None:
        if flow_t is None:
            raise ContractError("flow_t required with flow_x")
        action, head_cache = _flow_head(eff, cfg, xf, flow_x, flow_t)
    else:
        action = None
    if action is not None:
        _check(action, "action_head")

    cache = None
    if keep_cache:
        cache = dict(layers=layer_caches, lnf=lnf, xf=xf, head=head_cache, eff=eff, batch=batch, allowed=allowed)
    return ForwardTrace(acts, action, xf, params, cache)


def backward(
    trace: ForwardTrace,
    loss_grad: np.ndarray,
    trainable: set[str] | frozenset[str] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(loss_grad * trace.action)``.

    Keys are every base tensor name plus ``<target>.lora.A/.B`` for each
    attached adapter. Names outside ``trainable`` (when given) get exact zeros.
    """
    if trace.cache is None or trace.action is None:
        raise ContractError("trace was produced without a cache or action output")
    params = trace.params
    cfg = params.config
    c = trace.cache
    eff = c["eff"]
    batch = c["batch"]
    L, H, D, dh = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head
    B, S = len(batch), cfg.seq_len
    dy = np.asarray(loss_grad, ACC_DTYPE)
    if dy.shape != trace.action.shape:
        raise ContractError(f"loss_grad shape {dy.shape} != action shape {trace.action.shape}")
    if set(eff) != set(params.tensors):
        raise ContractError("trace does not match params")

    g: dict[str, np.ndarray] = {}
    xf = c["xf"]
    if cfg.action_head_kind == "regression":
        g["action_head.w"] = dy.T @ xf
        g["action_head.b"] = dy.sum(0)
        dxf = dy @ eff["action_head.w"]
    else:
        phi, te_pre, te_t, z, h_pre, h_t, h = c["head"]
        g["action_head.out.w"] = dy.T @ h
        g["action_head.out.b"] = dy.sum(0)
        dh_pre = (dy @ eff["action_head.out.w"]) * _gelu_grad(h_pre, h_t)
        g["action_head.in.w"] = dh_pre.T @ z
        g["action_head.in.b"] = dh_pre.sum(0)
        dz = dh_pre @ eff["action_head.in.w"]
        dxf = dz[:, :D]
        dte_pre = dz[:, D + cfg.d_action :] * _gelu_grad(te_pre, te_t)
        g["time_embed.w"] = dte_pre.T @ phi
        g["time_embed.b"] = dte_pre.sum(0)

    dlast, g["ln_f.g"], g["ln_f.b"] = _ln_back(dxf, c["lnf"])
    dx = np.zeros((B, S, D), ACC_DTYPE)
    dx[:, S - 1] = dlast
    inv_sqrt = 1.0 / math.sqrt(dh)

    for l in reversed(range(L)):
        p = f"layer{l}"
        lc = c["layers"][l]
        # MLP
        dx2 = dx.reshape(B * S, D)
        g[f"{p}.mlp.out.w"] = dx2.T @ lc["a"].reshape(B * S, -1)
        g[f"{p}.mlp.out.b"] = dx2.sum(0)
        dhp = (dx @ eff[f"{p}.mlp.out.w"]) * _gelu_grad(lc["hp"], lc["a_t"])
        g[f"{p}.mlp.in.w"] = dhp.reshape(B * S, -1).T @ lc["xn2"].reshape(B * S, D)
        g[f"{p}.mlp.in.b"] = dhp.sum((0, 1))
        dxn2 = dhp @ eff[f"{p}.mlp.in.w"]
        dres, g[f"{p}.ln2.g"], g[f"{p}.ln2.b"] = _ln_back(dxn2, lc["ln2"])
        dx = dx + dres
        # attention
        Wq = np.concatenate([eff[f"{p}.q_head{h}"] for h in range(H)])
        Wo = np.concatenate([eff[f"{p}.o_head{h}"] for h in range(H)], axis=1)
        Wkv = eff[f"{p}.kv"]
        Ocat, P, Q, K, V, xn = lc["Ocat"], lc["P"], lc["Q"], lc["K"], lc["V"], lc["xn"]
        dWo = dx.reshape(B * S, D).T @ Ocat.reshape(B * S, H * dh)  # (D, H*dh)
        dO = (dx @ Wo).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        dP = dO @ V[:, None].transpose(0, 1, 3, 2)
        dV = (P.transpose(0, 1, 3, 2) @ dO).sum(1)
        dsc = P * (dP - (dP * P).sum(-1, keepdims=True)) * inv_sqrt
        dQ = dsc @ K[:, None]
        dK = (dsc.transpose(0, 1, 3, 2) @ Q).sum(1)
        dQcat = dQ.transpose(0, 2, 1, 3).reshape(B * S, H * dh)
        xn2d = xn.reshape(B * S, D)
        dWq = dQcat.T @ xn2d  # (H*dh, D)
        dKV = np.concatenate([dK, dV], axis=-1).reshape(B * S, 2 * dh)
        for h in range(H):
            g[f"{p}.q_head{h}"] = dWq[h * dh : (h + 1) * dh]
            g[f"{p}.o_head{h}"] = dWo[:, h * dh : (h + 1) * dh]
        g[f"{p}.kv"] = dKV.T @ xn2d
        dxn = (dQcat @ Wq + dKV @ Wkv).reshape(B, S, D)
        dres, g[f"{p}.ln1.g"], g[f"{p}.ln1.b"] = _ln_back(dxn, lc["ln1"])
        dx = dx + dres

    if cfg.pos_emb:
        g["embed.pos"] = dx.sum(0)
    g["embed.state.w"] = dx[:, S - 1].T @ batch.state.astype(ACC_DTYPE)
    g["embed.state.b"] = dx[:, S - 1].sum(0)
    dobs = dx[:, 1 : S - 1]
    g["embed.obs.w"] = np.einsum("bnd,bnf->df", dobs, batch.obs.astype(ACC_DTYPE))
    g["embed.obs.b"] = dobs.sum((0, 1))
    gt = np.zeros((cfg.n_tasks, D), ACC_DTYPE)
    np.add.at(gt, batch.task_ids, dx[:, 0])
    g["embed.task"] = gt

    for t, a in params.adapters.items():
        gw = g[t]
        s = a.scaling
        g[f"{t}.lora.A"] = s * (a.B.astype(ACC_DTYPE).T @ gw)
        g[f"{t}.lora.B"] = s * (gw @ a.A.astype(ACC_DTYPE).T)

    if trainable is not None:
        for k in g:
            if k not in trainable:
                g[k] = np.zeros_like(g[k])
    return dict(sorted(g.items()))


# ---------------------------------------------------------------------------
# inference


def euler_integrate(velocity, x0: np.ndarray, steps: int = FLOW_STEPS) -> np.ndarray:
    """Integrate ``dx/dt = velocity(x, t)`` from t=0 to t=1 with fixed Euler steps."""
    x = np.asarray(x0, ACC_DTYPE)
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * velocity(x, i * dt)
    return x


def predict_action(
    params: PolicyParams,
    batch: TokenBatch,
    rng: np.random.Generator | None = None,
    *,
    eff: dict[str, np.ndarray] | None = None,
    head_noise=None,
    noise_rng=None,
) -> np.ndarray:
    """Deployable action prediction; flow heads integrate from N(0, I) in 10 Euler steps."""
    cfg = params.config
    if eff is None:
        eff = effective_tensors(params)
    tr = forward(params, batch, tap=False, keep_cache=False, eff=eff, head_noise=head_noise, noise_rng=noise_rng)
    if cfg.action_head_kind == "regression":
        return tr.action
    if rng is None:
        rng = RngStream(cfg.seed, stream_id=0xF10).generator()
    x0 = rng.standard_normal((len(batch), cfg.d_action))
    xf = tr.final_hidden

    def vel(x, t):
        v, _ = _flow_head(eff, cfg, xf, x, np.full(len(batch), t))
        return v

    return euler_integrate(vel, x0)


def with_config(params: PolicyParams, **changes) -> PolicyParams:
    return PolicyParams(replace(params.config, **changes), params.tensors, params.adapters)
