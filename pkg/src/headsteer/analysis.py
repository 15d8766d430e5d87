"""Analysis suite: score CV, selection consistency, overlap matrices, head-count sweeps."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .lora import attach, build_mask
from .numkit import RngStream, mean_std_cv
from .policy import PolicyParams
from .selector import ActivationCache, HeadScoreTable, SelectionResult, score_heads, search_k, select_top_m
from .simenv import DemoSet, EvalGrid, TaskSpec, eval_grid
from .trainer import TrainConfig, train

CONSISTENCY_VARIANTS = ("full", "seed42-half", "seed24-half", "first-half", "last-half")


def overlap(a: SelectionResult, b: SelectionResult) -> float:
    """Percentage of shared heads, ``|A & B| / m * 100``."""
    if a.m != b.m or len(a.heads) != len(b.heads):
        raise ContractError(f"overlap needs equal m, got {a.m} and {b.m}")
    return 100.0 * len(a.head_set & b.head_set) / a.m


@dataclass
class OverlapMatrix:
    labels: list[str]
    cells: np.ndarray
    m: int
    method: str = "knn"
    seed: int | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.cells.shape != (n, n):
            raise ContractError("overlap matrix shape does not match labels")

    def mean_off_diagonal(self) -> float:
        n = len(self.labels)
        if n < 2:
            return 100.0
        off = self.cells[~np.eye(n, dtype=bool)]
        return float(off.mean())

    def check(self) -> None:
        if not np.array_equal(self.cells, self.cells.T):
            raise ContractError("overlap matrix is not symmetric")
        if not np.all(np.diag(self.cells) == 100.0):
            raise ContractError("overlap matrix diagonal is not 100")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# method={self.method} m={self.m} seed={self.seed}\n")
        buf.write("label," + ",".join(self.labels) + "\n")
        for lab, row in zip(self.labels, self.cells):
            buf.write(lab + "," + ",".join(f"{v:.4f}" for v in row) + "\n")
        return buf.getvalue()


def overlap_matrix(selections: Sequence[SelectionResult], labels: Sequence[str], method: str = "knn",
                   seed: int | None = None) -> OverlapMatrix:
    n = len(selections)
    if n != len(labels):
        raise ContractError("one label per selection")
    cells = np.full((n, n), 100.0)
    for i in range(n):
        for j in range(i + 1, n):
            cells[i, j] = cells[j, i] = overlap(selections[i], selections[j])
    return OverlapMatrix(list(labels), cells, selections[0].m if selections else 0, method, seed)


def variant_caches(cache: ActivationCache) -> dict[str, ActivationCache]:
    """The five data variants: all demos, two random halves and the two ordered halves."""
    n = cache.N
    if n < 4:
        raise ContractError(f"consistency variants need >= 4 trajectories, got {n}")
    half = n // 2
    out = {"full": cache}
    for name, s in (("seed42-half", 42), ("seed24-half", 24)):
        pick = np.sort(RngStream(s, 0xCA5).generator().permutation(n)[:half])
        out[name] = cache.subset_trajectories(pick.tolist())
    out["first-half"] = cache.subset_trajectories(range(half))
    out["last-half"] = cache.subset_trajectories(range(n - half, n))
    return out


def consistency_study(
    cache: ActivationCache,
    m: int,
    k: int | None = None,
    metric: str = "cosine",
) -> tuple[OverlapMatrix, OverlapMatrix]:
    """Select heads on each data variant; overlap matrices for top-m and top-2m.

    With ``k=None`` every variant runs its own k search.
    """
    if 2 * m > cache.dims[0] * cache.dims[1]:
        raise ContractError(f"2m={2 * m} exceeds the number of heads")
    tables = []
    for c in variant_caches(cache).values():
        if k is None:
            kk, _ = search_k(c, m=m, metric=metric)
        else:
            kk = k
        tables.append(score_heads(c, kk, metric))
    labels = list(CONSISTENCY_VARIANTS)
    top_m = overlap_matrix([select_top_m(t, m) for t in tables], labels)
    top_2m = overlap_matrix([select_top_m(t, 2 * m) for t in tables], labels)
    return top_m, top_2m


@dataclass
class CvRow:
    label: str
    mean: float
    std: float
    cv: float | None
    rank: int


def cv_report(tables: Sequence[HeadScoreTable], labels: Sequence[str] | None = None) -> list[CvRow]:
    """CV of each score table, ranked from most to least distinctive."""
    if not tables:
        raise ContractError("cv_report needs at least one table")
    labels = list(labels) if labels is not None else [f"table{i}" for i in range(len(tables))]
    stats = [mean_std_cv(list(t.scores.values())) for t in tables]
    # a zero-mean table has no CV; it sorts last
    order = sorted(range(len(tables)), key=lambda i: (stats[i][2] is None, -(stats[i][2] or 0.0), i))
    rank = {i: r for r, i in enumerate(order)}
    return [CvRow(labels[i], stats[i][0], stats[i][1], stats[i][2], rank[i]) for i in range(len(tables))]


def cv_csv(rows: Sequence[CvRow], method: str = "knn", seed: int | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# method={method} seed={seed}\n")
    buf.write("label,mean,std,cv,rank\n")
    for r in rows:
        cv = "" if r.cv is None else repr(r.cv)
        buf.write(f"{r.label},{r.mean!r},{r.std!r},{cv},{r.rank}\n")
    return buf.getvalue()


@dataclass
class SweepPoint:
    count: int
    heads: tuple
    rate: float
    final_loss: float


def head_count_sweep(
    base: PolicyParams,
    demos: DemoSet,
    cache: ActivationCache,
    counts: Sequence[int],
    task: TaskSpec,
    train_cfg: TrainConfig,
    variant: str = "queries_plus_mlp",
    rank: int = 8,
    k: int | None = None,
    grid: EvalGrid | None = None,
    evaluate: Callable[[PolicyParams], float] | None = None,
) -> list[SweepPoint]:
    """Finetune once per head count with a fixed budget and report grid success."""
    L, H, _ = cache.dims
    for c in counts:
        if not 1 <= c <= L * H:
            raise ContractError(f"head count {c} outside [1, {L * H}]")
    grid = grid or EvalGrid()
    evaluate = evaluate or (lambda p: eval_grid(p, task, grid).rate)
    data = demos.flatten()
    out = []
    for c in counts:
        if k is None:
            _, sel = search_k(cache, m=c)
        else:
            sel = select_top_m(score_heads(cache, k), c)
        mask = build_mask(base, sel.heads, variant)
        p = attach(base.copy(), mask, rank, rng=RngStream(train_cfg.seed, 0x10A).generator())
        tuned, log = train(p, mask, data, train_cfg)
        out.append(SweepPoint(c, sel.heads, float(evaluate(tuned)), float(np.mean(log.losses[-50:]))))
    return out


def sweep_csv(points: Sequence[SweepPoint], method: str = "knn", seed: int | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# method={method} seed={seed}\n")
    buf.write("count,rate,final_loss,heads\n")
    for p in points:
        buf.write(f"{p.count},{p.rate!r},{p.final_loss!r},{' '.join(map(str, p.heads))}\n")
    return buf.getvalue()
