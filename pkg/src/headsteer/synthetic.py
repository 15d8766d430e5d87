"""Constructed inputs with known answers, used to validate the selectors."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .lora import HeadId, all_heads
from .numkit import STORE_DTYPE, RngStream
from .errors import ContractError
from .policy import PolicyConfig, PolicyParams, forward, init_params
from .selector import ActivationCache, _ema_std


def planted_cache(
    seed: int,
    planted: Iterable[HeadId],
    n_layers: int = 4,
    n_heads: int = 4,
    d_head: int = 16,
    n_traj: int = 10,
    T: int = 20,
    d_action: int = 3,
    noise: float = 0.1,
    informative_dims: int | None = None,
) -> ActivationCache:
    """Cache where planted heads carry a noisy fixed linear embedding of the action.

    Every other head holds isotropic unit Gaussian noise. Each planted head
    gets its own embedding matrix, so planted heads are equally informative
    but not identical.
    """
    gen = RngStream(seed, 0x91A).generator()
    planted = {HeadId(*h) for h in planted}
    R = n_traj * T
    actions = gen.uniform(-1.0, 1.0, (R, d_action))
    acts = gen.standard_normal((n_layers, n_heads, R, d_head))
    for h in sorted(planted):
        W = gen.standard_normal((d_head, d_action))
        emb = actions @ W.T
        emb /= np.sqrt(np.mean(emb * emb))
        acts[h.layer, h.head] = emb + noise * gen.standard_normal((R, d_head))
    acts = acts.astype(STORE_DTYPE)
    return ActivationCache(
        acts,
        actions.astype(STORE_DTYPE),
        np.repeat(np.arange(n_traj), T),
        np.tile(np.arange(T), n_traj),
        _ema_std(acts).astype(STORE_DTYPE),
        task_label=f"planted-{seed}",
    )


def pathway_model(seed: int, pathway: int, n_heads: int = 4, **cfg_kw) -> PolicyParams:
    """One-layer policy whose action depends on exactly one attention head.

    The output slices of all other heads are zeroed, so noise injected into
    them cannot reach the residual stream.
    """
    cfg = PolicyConfig(n_layers=1, n_heads=n_heads, seed=seed, **cfg_kw)
    params = init_params(cfg)
    for h in range(n_heads):
        if h != pathway:
            params.tensors[f"layer0.o_head{h}"][...] = 0.0
    # amplify the surviving pathway so its ablation is clearly visible
    params.tensors[f"layer0.o_head{pathway}"] *= 4.0
    return params


def pathway_heads(n_heads: int = 4) -> list[HeadId]:
    return all_heads(1, n_heads)


def calibrate_head(params: PolicyParams, demos, ridge: float = 1e-2) -> PolicyParams:
    """Refit a regression action head by ridge least squares on the demo features.

    A random model fits the demos badly, and then noise in any head is as
    likely to lower the error as to raise it. At the least-squares readout
    the clean pass is (near) optimal, so ablating the pathway shows up as a
    positive drop.
    """
    if params.config.action_head_kind != "regression":
        raise ContractError("calibrate_head needs a regression action head")
    batch, targets = demos.flatten()
    feats = forward(params, batch, tap=False, keep_cache=False).final_hidden.astype(np.float64)
    X = np.hstack([feats, np.ones((len(feats), 1))])
    coef = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ targets.astype(np.float64))
    out = params.copy()
    out.tensors["action_head.w"][...] = coef[:-1].T
    out.tensors["action_head.b"][...] = coef[-1]
    return out
