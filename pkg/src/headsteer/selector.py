"""Attention-head selection.

The primary method scores each head by leave-one-trajectory-out k-NN
regression in that head's activation space: for every cached timestep,
retrieve the k most cosine-similar timesteps from *other* trajectories,
average their actions, and measure the squared error against the true
action. Heads with the lowest mean error are selected.

Three alternatives share the result types: noise ablation (``cma_score``),
REINFORCE over head subsets (``reinforce_select``) and a centroid
classifier (``centroid_select``).

Ties are broken by ``(layer, head)`` for heads and by ``(traj, t)`` for
neighbors, everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericFault
from .lora import HeadId, all_heads
from .numkit import ACC_DTYPE, STORE_DTYPE, RngStream, cosine_matrix, mean_std_cv, unit_rows
from .policy import TAP_POSITIONS, PolicyParams, effective_tensors, forward, predict_action
from .simenv import DemoSet

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
DEFAULT_K_CANDIDATES = (10, 20, 30, 40)
STD_DECAY = 0.99


@dataclass
class ActivationCache:
    """Head activations at the extraction token for every retained timestep.

    ``acts`` has shape ``(L, H, R, d_h)``; rows are ordered by trajectory,
    then timestep.
    """

    acts: np.ndarray
    actions: np.ndarray  # (R, d)
    traj_index: np.ndarray  # (R,)
    timestep: np.ndarray  # (R,)
    running_std: np.ndarray  # (L, H)
    token_position: str = "state"
    stride: int = 1
    task_label: str = ""

    def __post_init__(self):
        L, H, R, dh = self.acts.shape
        if self.actions.shape[0] != R or self.traj_index.shape != (R,) or self.timestep.shape != (R,):
            raise ContractError("cache row bookkeeping does not match activations")
        if self.running_std.shape != (L, H):
            raise ContractError("running_std must be (L, H)")
        if not np.all(np.isfinite(self.acts)):
            raise NumericFault("non-finite activation in cache")

    @property
    def dims(self) -> tuple[int, int, int]:
        L, H, _, dh = self.acts.shape
        return L, H, dh

    @property
    def n_rows(self) -> int:
        return int(self.acts.shape[2])

    @property
    def N(self) -> int:
        return len(self.lengths)

    @property
    def lengths(self) -> list[int]:
        _, counts = np.unique(self.traj_index, return_counts=True)
        return [int(c) for c in counts]

    def heads(self) -> list[HeadId]:
        L, H, _ = self.dims
        return all_heads(L, H)

    def head_rows(self, head: HeadId) -> np.ndarray:
        return self.acts[head[0], head[1]]

    def subset_trajectories(self, trajs: Sequence[int]) -> "ActivationCache":
        """Cache restricted to the given trajectories, renumbered 0..n-1 in the given order."""
        pieces = [np.flatnonzero(self.traj_index == t) for t in trajs]
        rows = np.concatenate(pieces)
        new_traj = np.concatenate([np.full(len(p), i) for i, p in enumerate(pieces)])
        return ActivationCache(
            self.acts[:, :, rows], self.actions[rows], new_traj, self.timestep[rows],
            self.running_std, self.token_position, self.stride, self.task_label,
        )

    @classmethod
    def concat(cls, caches: Sequence["ActivationCache"], label: str | None = None) -> "ActivationCache":
        offset = 0
        trajs = []
        for c in caches:
            trajs.append(c.traj_index + offset)
            offset += int(c.traj_index.max()) + 1
        # pooled std: root of the mean variance
        std = np.sqrt(np.mean([c.running_std.astype(ACC_DTYPE) ** 2 for c in caches], axis=0))
        return cls(
            np.concatenate([c.acts for c in caches], axis=2),
            np.concatenate([c.actions for c in caches]),
            np.concatenate(trajs),
            np.concatenate([c.timestep for c in caches]),
            std.astype(STORE_DTYPE),
            caches[0].token_position,
            caches[0].stride,
            label or "+".join(c.task_label for c in caches),
        )


def keyframe_indices(gripper_change: np.ndarray, stride: int) -> np.ndarray:
    """Timesteps ``t % stride == 0`` plus every gripper-command change."""
    if stride < 1:
        raise ContractError("keyframe stride must be >= 1")
    T = len(gripper_change)
    keep = (np.arange(T) % stride == 0) | np.asarray(gripper_change, bool)
    return np.flatnonzero(keep)


def _ema_std(acts: np.ndarray, decay: float = STD_DECAY) -> np.ndarray:
    """Per-head RMS of an exponential-moving per-dimension std over rows in order."""
    L, H, R, dh = acts.shape
    x = acts.astype(ACC_DTYPE)
    mu = x[:, :, 0].copy()
    sq = mu * mu
    for r in range(1, R):
        xr = x[:, :, r]
        mu = decay * mu + (1 - decay) * xr
        sq = decay * sq + (1 - decay) * xr * xr
    var = np.maximum(sq - mu * mu, 0.0)
    return np.sqrt(var.mean(-1))


def extract_cache(
    params: PolicyParams,
    demos: DemoSet,
    keyframe_stride: int = 1,
    token_position: str = "state",
) -> ActivationCache:
    if token_position not in TAP_POSITIONS:
        raise ContractError(f"unknown token position {token_position!r}")
    eff = effective_tensors(params)
    acts, actions, trajs, steps = [], [], [], []
    for i, tr in enumerate(demos.trajectories):
        idx = keyframe_indices(tr.gripper_change, keyframe_stride)
        try:
            trace = forward(params, tr.batch(idx), tap=True, keep_cache=False, eff=eff, tap_position=token_position)
        except NumericFault as e:
            raise NumericFault(str(e), f"traj {i}, {e.locus}") from e
        acts.append(trace.acts)
        actions.append(tr.actions[idx])
        trajs.append(np.full(len(idx), i))
        steps.append(idx)
    A = np.concatenate(acts).transpose(1, 2, 0, 3).astype(STORE_DTYPE)  # (L,H,R,dh)
    return ActivationCache(
        np.ascontiguousarray(A),
        np.concatenate(actions).astype(STORE_DTYPE),
        np.concatenate(trajs),
        np.concatenate(steps),
        _ema_std(A).astype(STORE_DTYPE),
        token_position,
        keyframe_stride,
        demos.task_label,
    )


# ---------------------------------------------------------------------------
# score tables


@dataclass
class HeadScoreTable:
    scores: dict[HeadId, float]
    method: str = "knn"
    k_used: int | None = None
    seed: int | None = None
    higher_is_better: bool = False
    metric: str = "cosine"

    @property
    def cv(self) -> float | None:
        return mean_std_cv(list(self.scores.values()))[2]

    def ranked(self) -> list[HeadId]:
        sign = -1.0 if self.higher_is_better else 1.0
        return sorted(self.scores, key=lambda h: (sign * self.scores[h], h))


@dataclass
class SelectionResult:
    heads: tuple[HeadId, ...]  # best first
    table: HeadScoreTable
    m: int
    extra: dict = field(default_factory=dict)

    @property
    def head_set(self) -> frozenset[HeadId]:
        return frozenset(self.heads)


def select_top_m(table: HeadScoreTable, m: int) -> SelectionResult:
    if not 1 <= m <= len(table.scores):
        raise ContractError(f"m={m} outside [1, {len(table.scores)}]")
    return SelectionResult(tuple(table.ranked()[:m]), table, m)


# ---------------------------------------------------------------------------
# k-NN regression


def _similarity(X: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        return cosine_matrix(X)
    if metric == "euclidean":
        x = np.asarray(X, ACC_DTYPE)
        sq = np.einsum("ij,ij->i", x, x)
        return -(sq[:, None] + sq[None, :] - 2.0 * x @ x.T)
    raise ContractError(f"unknown metric {metric!r}")


def _max_valid_k(traj_index: np.ndarray) -> int:
    _, counts = np.unique(traj_index, return_counts=True)
    return int(len(traj_index) - counts.max())


def neighbor_indices(X: np.ndarray, traj_index: np.ndarray, k: int, metric: str = "cosine") -> np.ndarray:
    """``(R, k)`` row indices of each row's k nearest rows from other trajectories."""
    kmax = _max_valid_k(traj_index)
    if not 1 <= k <= kmax:
        raise ContractError(f"k={k} invalid: need 1 <= k <= {kmax} (candidates from other trajectories)")
    sims = _similarity(X, metric)
    sims[traj_index[:, None] == traj_index[None, :]] = -np.inf
    # stable sort on the negated similarity keeps lower row index first among ties
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def knn_predict(cache: ActivationCache, head: HeadId, query: tuple[int, int], k: int,
                metric: str = "cosine") -> np.ndarray:
    """Predicted action for one cached timestep ``query = (traj, t)``."""
    hit = np.flatnonzero((cache.traj_index == query[0]) & (cache.timestep == query[1]))
    if hit.size != 1:
        raise ContractError(f"query {query} not in cache")
    nbrs = neighbor_indices(cache.head_rows(head), cache.traj_index, k, metric)[hit[0]]
    return cache.actions[nbrs].astype(ACC_DTYPE).mean(0)


def knn_head_score(X: np.ndarray, actions: np.ndarray, traj_index: np.ndarray, k: int,
                   metric: str = "cosine") -> float:
    nbrs = neighbor_indices(X, traj_index, k, metric)
    a = actions.astype(ACC_DTYPE)
    pred = a[nbrs].mean(1)
    return float(np.mean(np.sum((pred - a) ** 2, axis=1)))


def score_heads(cache: ActivationCache, k: int, metric: str = "cosine") -> HeadScoreTable:
    scores = {
        h: knn_head_score(cache.head_rows(h), cache.actions, cache.traj_index, k, metric)
        for h in cache.heads()
    }
    return HeadScoreTable(scores, "knn", k, None, False, metric)


def search_k(
    cache: ActivationCache,
    candidates: Iterable[int] = DEFAULT_K_CANDIDATES,
    m: int = 4,
    metric: str = "cosine",
) -> tuple[int, SelectionResult]:
    """Pick the k whose top-m heads have the lowest mean score (ties -> smaller k)."""
    kmax = _max_valid_k(cache.traj_index)
    best = None
    for k in sorted(set(candidates)):
        if not 1 <= k <= kmax:
            log.warning("skipping k=%d: only %d candidates available", k, kmax)
            continue
        sel = select_top_m(score_heads(cache, k, metric), m)
        mean = float(np.mean([sel.table.scores[h] for h in sel.heads]))
        if best is None or mean < best[0]:
            best = (mean, k, sel)
    if best is None:
        raise ContractError(f"no valid k among {sorted(set(candidates))} (max {kmax})")
    best[2].extra["k_search_mean"] = best[0]
    return best[1], best[2]


# ---------------------------------------------------------------------------
# ablation-based methods


def _demo_data(demos: DemoSet):
    return demos.flatten()


def _action_mse(params, batch, targets, eff, head_noise=None, noise_rng=None, flow_seed=0):
    gen = RngStream(flow_seed, 0xC0DE).generator()
    pred = predict_action(params, batch, gen, eff=eff, head_noise=head_noise, noise_rng=noise_rng)
    d = pred - targets.astype(ACC_DTYPE)
    return float(np.mean(np.sum(d * d, axis=1)))


def cma_score(
    params: PolicyParams,
    demos: DemoSet,
    noise_seed: int,
    head_std: np.ndarray,
    n_samples: int = 1,
) -> HeadScoreTable:
    """Increase in demo action MSE when one head gets Gaussian noise of its running std.

    Larger is more important (``higher_is_better``).
    """
    cfg = params.config
    batch, targets = _demo_data(demos)
    eff = effective_tensors(params)
    clean = _action_mse(params, batch, targets, eff)
    scores = {}
    for i, h in enumerate(all_heads(cfg.n_layers, cfg.n_heads)):
        drops = []
        for s in range(n_samples):
            nrng = RngStream(noise_seed, 7_000 + 100 * i + s).generator()
            noisy = _action_mse(params, batch, targets, eff, {h: float(head_std[h])}, nrng)
            drops.append(noisy - clean)
        scores[h] = float(np.mean(drops))
    return HeadScoreTable(scores, "cma", None, noise_seed, True)


def _gumbel_top_m(z: np.ndarray, m: int, gen: np.random.Generator) -> np.ndarray:
    keys = z + gen.gumbel(size=z.shape)
    return np.argsort(-keys, kind="stable")[:m]


def _plackett_luce_grad(z: np.ndarray, picks: np.ndarray) -> np.ndarray:
    """Gradient of log P(ordered picks) under sequential softmax sampling."""
    g = np.zeros_like(z)
    remaining = np.ones(len(z), bool)
    for j in picks:
        zr = np.where(remaining, z, -np.inf)
        p = np.exp(zr - zr[remaining].max())
        p /= p.sum()
        g -= p
        g[j] += 1.0
        remaining[j] = False
    return g


def reinforce_select(
    params: PolicyParams,
    demos: DemoSet,
    m: int,
    iters: int = 100,
    lr: float = 0.5,
    seed: int = 0,
    head_std: np.ndarray | None = None,
    baseline_decay: float = 0.9,
    normalize: bool = True,
    max_logit: float = 50.0,
) -> SelectionResult:
    """Score-function search over m-subsets; unselected heads are noise-ablated.

    Reward is the negative demo action MSE. Subsets are drawn with Gumbel-top-m
    on the logits, and the update uses an EMA baseline (plus an EMA scale when
    ``normalize``).
    """
    cfg = params.config
    heads = all_heads(cfg.n_layers, cfg.n_heads)
    if not 1 <= m <= len(heads):
        raise ContractError(f"m={m} outside [1, {len(heads)}]")
    if iters < 0:
        raise ContractError("iters must be >= 0")
    if head_std is None:
        head_std = np.ones((cfg.n_layers, cfg.n_heads))
    batch, targets = _demo_data(demos)
    eff = effective_tensors(params)
    gen = RngStream(seed, 0x5E1).generator()
    z = np.zeros(len(heads))
    baseline = None
    scale = None
    rewards = []
    for it in range(iters):
        picks = _gumbel_top_m(z, m, gen)
        chosen = set(picks.tolist())
        noise = {heads[i]: float(head_std[heads[i]]) for i in range(len(heads)) if i not in chosen}
        nrng = RngStream(seed, 90_000 + it).generator()
        R = -_action_mse(params, batch, targets, eff, noise or None, nrng if noise else None)
        rewards.append(R)
        if baseline is None:
            baseline, scale = R, 0.0
            continue
        adv = R - baseline
        scale = baseline_decay * scale + (1 - baseline_decay) * adv * adv
        baseline = baseline_decay * baseline + (1 - baseline_decay) * R
        if normalize:
            adv = adv / (np.sqrt(scale) + 1e-8)
        z += lr * adv * _plackett_luce_grad(z, picks)
        if np.max(np.abs(z)) > max_logit:
            raise NumericFault(
                f"REINFORCE logits diverged (max |z|={np.max(np.abs(z)):.1f}, last reward {R:.4g})",
                f"iteration {it}",
            )
    table = HeadScoreTable({h: float(z[i]) for i, h in enumerate(heads)}, "reinforce", None, seed, True)
    res = select_top_m(table, m)
    res.extra["rewards"] = rewards
    return res


# ---------------------------------------------------------------------------
# classification-based selection


def _split(cache: ActivationCache, holdout: float):
    n = cache.N
    n_hold = min(n - 1, max(1, int(round(n * holdout)))) if holdout > 0 else 0
    support = cache.subset_trajectories(range(n - n_hold)) if n_hold else cache
    held = cache.subset_trajectories(range(n - n_hold, n)) if n_hold else cache
    return support, held


def centroid_select(
    cache_pos: ActivationCache,
    cache_neg: ActivationCache,
    m: int,
    holdout: float = 0.5,
) -> tuple[SelectionResult, float, float]:
    """Select heads whose activations separate target-task from other-task timesteps.

    Each head's score is the mean over support samples of
    ``cos(x, c_pos) - cos(x, c_neg)``, sign-flipped for negatives. Held-out
    samples are classified by a majority vote of the selected heads (ties go
    to the positive class). Returns ``(selection, accuracy, mean margin)``
    where the margin is the signed vote total toward the true class.
    """
    if cache_pos.n_rows == 0 or cache_neg.n_rows == 0:
        raise ContractError("both classes need samples")
    if cache_pos.dims != cache_neg.dims:
        raise ContractError("caches have different shapes")
    sp, hp = _split(cache_pos, holdout)
    sn, hn = _split(cache_neg, holdout)
    heads = cache_pos.heads()
    scores = {}
    centroids = {}
    for h in heads:
        xp = sp.head_rows(h).astype(ACC_DTYPE)
        xn = sn.head_rows(h).astype(ACC_DTYPE)
        cp, cn = xp.mean(0), xn.mean(0)
        centroids[h] = (cp, cn)
        C = unit_rows(np.stack([cp, cn]))
        mp = unit_rows(xp) @ C.T
        mn = unit_rows(xn) @ C.T
        margins = np.concatenate([mp[:, 0] - mp[:, 1], -(mn[:, 0] - mn[:, 1])])
        scores[h] = float(margins.mean())
    table = HeadScoreTable(scores, "centroid", None, None, True)
    sel = select_top_m(table, m)

    votes_true = []
    for cache, y in ((hp, 1), (hn, -1)):
        total = np.zeros(cache.n_rows)
        for h in sel.heads:
            C = unit_rows(np.stack(centroids[h]))
            s = unit_rows(cache.head_rows(h)) @ C.T
            total += np.sign(s[:, 0] - s[:, 1])
        votes_true.append((total, y))
    correct = 0
    margins = []
    n = 0
    for total, y in votes_true:
        pred = np.where(total >= 0, 1, -1)
        correct += int(np.sum(pred == y))
        margins.append(total * y)
        n += len(total)
    margin = float(np.mean(np.concatenate(margins)))
    return sel, correct / n, margin


# ---------------------------------------------------------------------------
# multi-task


def select_multitask(
    caches: Sequence[ActivationCache],
    m: int,
    k: int,
    mode: str = "non_overlapping",
    metric: str = "cosine",
) -> list[SelectionResult] | SelectionResult:
    """Per-task disjoint selections, or one joint selection over pooled activations.

    In ``non_overlapping`` mode a head wanted by several tasks goes to the task
    that ranks it best (ties: earlier task); the others back-fill with their
    next-best free head.
    """
    if len(caches) < 2:
        raise ContractError("multi-task selection needs at least 2 caches")
    if mode == "joint":
        return select_top_m(score_heads(ActivationCache.concat(caches), k, metric), m)
    if mode != "non_overlapping":
        raise ContractError(f"unknown multitask mode {mode!r}")
    tables = [score_heads(c, k, metric) for c in caches]
    n_heads = len(tables[0].scores)
    if m * len(caches) > n_heads:
        raise ContractError(f"cannot give {len(caches)} tasks {m} distinct heads out of {n_heads}")
    ranks = [t.ranked() for t in tables]
    proposals = sorted((r, ti, h) for ti, rk in enumerate(ranks) for r, h in enumerate(rk))
    taken: set[HeadId] = set()
    chosen: list[list[HeadId]] = [[] for _ in caches]
    for r, ti, h in proposals:
        if h in taken or len(chosen[ti]) >= m:
            continue
        taken.add(h)
        chosen[ti].append(h)
    return [SelectionResult(tuple(c), t, m) for c, t in zip(chosen, tables)]
