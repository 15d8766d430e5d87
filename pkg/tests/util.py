"""Independent oracles and small builders shared by the test modules."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from headsteer.lora import all_heads
from headsteer.numkit import STORE_DTYPE
from headsteer.policy import LoraAdapter, PolicyConfig, TokenBatch, backward, forward, init_params
from headsteer.selector import ActivationCache, _ema_std
from headsteer.trainer import loss_flow_matching, loss_regression

TINY = dict(n_layers=2, n_heads=2, d_model=16, n_obs_tokens=3, obs_features=6, n_tasks=4)


def tiny_config(**kw) -> PolicyConfig:
    return PolicyConfig(**{**TINY, **kw})


def random_batch(cfg: PolicyConfig, B: int, gen: np.random.Generator, full: bool = False) -> TokenBatch:
    mask = np.ones((B, cfg.n_obs_tokens), bool) if full else gen.random((B, cfg.n_obs_tokens)) > 0.3
    return TokenBatch(
        gen.integers(0, cfg.n_tasks, B),
        gen.normal(size=(B, cfg.n_obs_tokens, cfg.obs_features)).astype(STORE_DTYPE),
        mask,
        gen.normal(size=(B, cfg.state_features)).astype(STORE_DTYPE),
    )


def tensor_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def with_random_adapters(params, targets, gen, rank=2, scale=0.3):
    for t in targets:
        d_out, d_in = params.tensors[t].shape
        params.adapters[t] = LoraAdapter(
            t, gen.normal(0, scale, (rank, d_in)).astype(params.tensors[t].dtype),
            gen.normal(0, scale, (d_out, rank)).astype(params.tensors[t].dtype), float(rank),
        )
    return params


def gradient_check(cfg: PolicyConfig, seed: int, eps: float = 1e-3) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients, per tensor.

    Runs on a float64 shadow of the parameters. The loss is a fixed random
    linear functional of the action output (velocity for flow heads), so the
    check covers the trunk, the head and any adapters.
    """
    gen = np.random.default_rng(seed)
    p = init_params(cfg, seed).astype(np.float64)
    with_random_adapters(p, ["layer0.q_head1", f"layer{cfg.n_layers - 1}.o_head0"], gen)
    B = 4
    batch = random_batch(cfg, B, gen)
    fx = gen.normal(size=(B, cfg.d_action))
    ft = gen.random(B)
    W = gen.normal(size=(B, cfg.d_action))

    def loss():
        tr = forward(p, batch, flow_x=fx, flow_t=ft)
        return float(np.sum(W * tr.action)), tr

    _, tr = loss()
    grads = backward(tr, W)
    out = {}
    for name, arr in p.flat_items().items():
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            lp, _ = loss()
            arr[i] = old - eps
            lm, _ = loss()
            arr[i] = old
            fd[i] = (lp - lm) / (2 * eps)
        den = np.linalg.norm(fd) + np.linalg.norm(grads[name])
        out[name] = 0.0 if den == 0 else float(np.linalg.norm(fd - grads[name]) / den)
    return out


def random_cache(gen: np.random.Generator, n_traj: int, lengths, L: int, H: int, dh: int, d: int = 3):
    R = int(sum(lengths))
    acts = gen.normal(size=(L, H, R, dh)).astype(STORE_DTYPE)
    return ActivationCache(
        acts,
        gen.uniform(-1, 1, (R, d)).astype(STORE_DTYPE),
        np.repeat(np.arange(n_traj), lengths),
        np.concatenate([np.arange(t) for t in lengths]),
        _ema_std(acts).astype(STORE_DTYPE),
    )


def brute_force_knn_scores(cache: ActivationCache, k: int) -> dict:
    """Exhaustive O(R^2) k-NN scoring with plain Python arithmetic and a full sort per query."""
    L, H, _ = cache.dims
    R = cache.n_rows
    trajs = [int(x) for x in cache.traj_index]
    steps = [int(x) for x in cache.timestep]
    acts64 = cache.acts.astype(np.float64)
    actions = cache.actions.astype(np.float64).tolist()
    scores = {}
    for h in all_heads(L, H):
        rows = acts64[h.layer, h.head].tolist()
        norms = [math.sqrt(sum(v * v for v in r)) for r in rows]
        total = 0.0
        for q in range(R):
            cands = []
            for j in range(R):
                if trajs[j] == trajs[q]:
                    continue
                dot = sum(x * y for x, y in zip(rows[q], rows[j]))
                den = norms[q] * norms[j]
                sim = 0.0 if den == 0 else max(-1.0, min(1.0, dot / den))
                cands.append((-sim, trajs[j], steps[j], j))
            cands.sort()
            nb = [c[3] for c in cands[:k]]
            pred = [sum(actions[j][c] for j in nb) / k for c in range(len(actions[q]))]
            total += sum((p - a) ** 2 for p, a in zip(pred, actions[q]))
        scores[h] = total / R
    return scores


def loss_gradient_check(cfg: PolicyConfig, seed: int, eps: float = 1e-3, n_dirs: int = 6) -> dict[str, float]:
    """Central differences of the training loss itself, along random directions.

    For every tensor, ``n_dirs`` Gaussian directions ``v`` compare
    ``(L(w + eps v) - L(w - eps v)) / 2 eps`` with ``<g, v>``; the error is the
    relative norm of the difference over the directions. Flow matching draws
    its noise and times from a generator re-seeded on every evaluation, so the
    loss is a deterministic function of the weights.
    """
    gen = np.random.default_rng(seed)
    p = init_params(cfg, seed).astype(np.float64)
    with_random_adapters(p, ["layer0.q_head1", f"layer{cfg.n_layers - 1}.o_head0"], gen)
    batch = random_batch(cfg, 4, gen)
    targets = gen.uniform(-1, 1, (4, cfg.d_action))

    def loss():
        if cfg.action_head_kind == "regression":
            return loss_regression(p, batch, targets)
        return loss_flow_matching(p, batch, targets, np.random.default_rng(seed + 1))

    _, grads = loss()
    out = {}
    for name, arr in p.flat_items().items():
        fd, an = [], []
        for _ in range(n_dirs):
            v = gen.normal(size=arr.shape)
            v /= np.linalg.norm(v)
            old = arr.copy()
            arr += eps * v
            lp = loss()[0]
            arr[...] = old - eps * v
            lm = loss()[0]
            arr[...] = old
            fd.append((lp - lm) / (2 * eps))
            an.append(float(np.sum(grads[name] * v)))
        fd, an = np.array(fd), np.array(an)
        den = np.linalg.norm(fd) + np.linalg.norm(an)
        out[name] = 0.0 if den == 0 else float(np.linalg.norm(fd - an) / den)
    return out
