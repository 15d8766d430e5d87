"""Command-line pipeline: demos -> pretrain -> cache -> select -> finetune -> eval -> analyze.

Every subcommand writes its artifact plus ``<artifact>.manifest.json``
recording the fully resolved arguments, input and output hashes, seed and
wall-clock time. ``repro`` replays a manifest into a scratch directory and
checks that every output is byte-identical.

Values are resolved as: command-line flag, then the JSON config file, then
``HEADSTEER_SEED`` (seed only), then built-in defaults.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable

from . import __version__
from .analysis import consistency_study, cv_csv, cv_report, overlap_matrix
from .errors import ContractError, GenerationError, HeadSteerError, NumericFault, StoreError
from .lora import VARIANTS, attach, build_mask, merge
from .numkit import RngStream
from .policy import PolicyConfig
from .selector import (
    METRICS,
    centroid_select,
    cma_score,
    extract_cache,
    reinforce_select,
    search_k,
    select_top_m,
)
from .simenv import PERTURBATIONS, OBS_FEATURES, EvalGrid, eval_grid, gen_demos, get_task
from .store import (
    file_digest,
    read_cache,
    read_checkpoint,
    read_demos,
    read_selection,
    write_cache,
    write_checkpoint,
    write_demos,
    write_report,
    write_selection,
)
from .trainer import TrainConfig, pretrain_multitask, train

log = logging.getLogger("headsteer")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4
EXIT_NUMERIC = 5
EXIT_REPRO = 6
EXIT_GENERATION = 7

SELECT_METHODS = ("knn", "cma", "reinforce", "centroid")

DEFAULTS: dict = {
    "seed": None,
    "policy": dict(PolicyConfig(obs_features=OBS_FEATURES).to_dict()),
    "tasks": {"pretrain": ["reach-red", "push-blue"], "target": "pick_place-green"},
    "demos": {"n": 20, "noise": 0.3, "clutter": [1, 1]},
    "pretrain_demos": {"n": 200, "noise": 0.3, "clutter": [1, 3]},
    "pretrain": {"total_steps": 4000, "warmup_steps": 200, "peak_lr": 1e-3, "batch_size": 32},
    "selection": {
        "method": "knn", "k": [10, 20, 30, 40], "m": 4, "stride": 1, "token_position": "state",
        "metric": "cosine", "iters": 100, "lr": 0.5, "n_samples": 1, "holdout": 0.5,
    },
    "finetune": {
        "variant": "queries_plus_mlp", "rank": 8, "alpha": None, "adapt_output_slices": True,
        "total_steps": 2000, "warmup_steps": 100, "peak_lr": 1e-2, "batch_size": 64,
    },
    "eval": {"perturbations": list(PERTURBATIONS), "grid_seed": 0},
    "analysis": {"what": "consistency"},
    "workdir": "run",
}


class ConfigError(ContractError):
    pass


class MissingInput(HeadSteerError):
    pass


class ReproMismatch(HeadSteerError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and k != "policy":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file {path} not found")
        try:
            over = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if "policy" in over:
            bad = set(over["policy"]) - set(PolicyConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown policy keys {sorted(bad)}")
            over = dict(over, policy={**DEFAULTS["policy"], **over["policy"]})
        cfg = _merge(cfg, over)
    return cfg


def resolve_seed(flag: int | None, cfg: dict) -> int:
    if flag is not None:
        return int(flag)
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    env = os.environ.get("HEADSTEER_SEED")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"HEADSTEER_SEED={env!r} is not an integer") from e
    return 0


def _pick(flag, value):
    return value if flag is None else flag


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _need(path: str | None, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is required")
    if not Path(path).exists():
        raise MissingInput(f"{what} {path} not found")
    return str(path)


def _train_cfg(section: dict, seed: int, overrides: dict) -> TrainConfig:
    d = {k: section[k] for k in ("total_steps", "warmup_steps", "peak_lr", "batch_size") if k in section}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(dict(d, seed=seed))


# ---------------------------------------------------------------------------
# commands (each takes fully resolved arguments; returns input and output paths)


def cmd_gen_demos(a: dict) -> tuple[list[str], list[str]]:
    task = get_task(a["task"])
    demos = gen_demos(task, a["n"], a["noise"], a["seed"], a["n_obs"], clutter=tuple(a["clutter"]))
    write_demos(a["out"], demos)
    return [], [a["out"]]


def cmd_pretrain(a: dict) -> tuple[list[str], list[str]]:
    paths = [_need(p, "demo file") for p in a["demos"]]
    data = [read_demos(p).flatten() for p in paths]
    pcfg = PolicyConfig.from_dict(dict(a["policy"], seed=a["seed"]))
    tcfg = TrainConfig.from_dict(a["train"])
    params, tlog = pretrain_multitask(pcfg, tcfg, data)
    write_checkpoint(a["out"], params)
    log_path = a["out"] + ".log.csv"
    Path(log_path).write_text(tlog.to_csv())
    return paths, [a["out"], log_path]


def cmd_cache_acts(a: dict) -> tuple[list[str], list[str]]:
    ck = _need(a["checkpoint"], "checkpoint")
    dm = _need(a["demos"], "demo file")
    params = read_checkpoint(ck).params
    cache = extract_cache(params, read_demos(dm), a["stride"], a["token_position"])
    write_cache(a["out"], cache)
    return [ck, dm], [a["out"]]


def cmd_select_heads(a: dict) -> tuple[list[str], list[str]]:
    method = a["method"]
    inputs = [_need(a["cache"], "cache file")]
    cache = read_cache(inputs[0])
    if method == "knn":
        k, sel = search_k(cache, a["k"], a["m"], a["metric"])
        sel.extra["k_candidates"] = a["k"]
    elif method in ("cma", "reinforce"):
        inputs += [_need(a["checkpoint"], "checkpoint"), _need(a["demos"], "demo file")]
        params = read_checkpoint(inputs[1]).params
        demos = read_demos(inputs[2])
        if method == "cma":
            table = cma_score(params, demos, a["seed"], cache.running_std, a["n_samples"])
            sel = select_top_m(table, a["m"])
        else:
            sel = reinforce_select(params, demos, a["m"], a["iters"], a["lr"], a["seed"], cache.running_std)
    elif method == "centroid":
        inputs.append(_need(a["neg_cache"], "negative-task cache"))
        sel, acc, margin = centroid_select(cache, read_cache(inputs[1]), a["m"], a["holdout"])
        log.info("centroid selection: held-out accuracy %.3f, mean margin %.3f", acc, margin)
    else:
        raise ConfigError(f"unknown selection method {method!r}")
    write_selection(a["out"], sel)
    return inputs, [a["out"]]


def cmd_finetune(a: dict) -> tuple[list[str], list[str]]:
    ck = _need(a["checkpoint"], "checkpoint")
    dm = _need(a["demos"], "demo file")
    inputs = [ck, dm]
    base = read_checkpoint(ck).params
    if a["variant"] == "full_head_baseline":
        if a.get("selection"):
            log.warning("variant full_head_baseline adapts every head; ignoring selection %s", a["selection"])
        heads = []
    else:
        sp = _need(a.get("selection"), "selection file")
        inputs.append(sp)
        heads = read_selection(sp).heads
    mask = build_mask(base, heads, a["variant"], adapt_output_slices=a["adapt_output_slices"])
    params = attach(base.copy(), mask, a["rank"], a["alpha"], RngStream(a["seed"], 0x10A).generator())
    tuned, tlog = train(params, mask, read_demos(dm).flatten(), TrainConfig.from_dict(a["train"]))
    if a["merge"]:
        tuned = merge(tuned)
    write_checkpoint(a["out"], tuned, mask.digest(), file_digest(ck))
    log_path = a["out"] + ".log.csv"
    Path(log_path).write_text(tlog.to_csv())
    return inputs, [a["out"], log_path]


def cmd_eval(a: dict) -> tuple[list[str], list[str]]:
    ck = _need(a["checkpoint"], "checkpoint")
    params = read_checkpoint(ck).params
    task = get_task(a["task"])
    grid = EvalGrid(a["grid_seed"])
    for p in a["perturbations"]:
        if p not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {p!r}")
    reports = [eval_grid(params, task, grid, p, a["seed"]) for p in a["perturbations"]]
    for r in reports:
        log.info("%s / %s: %.3f", r.task, r.perturbation, r.rate)
    write_report(a["out"], reports)
    return [ck], [a["out"]]


def cmd_analyze(a: dict) -> tuple[list[str], list[str]]:
    out = Path(a["out"])
    out.mkdir(parents=True, exist_ok=True)
    what = a["what"]
    if what == "consistency":
        cp = _need(a["cache"][0] if a["cache"] else None, "cache file")
        top_m, top_2m = consistency_study(read_cache(cp), a["m"], a.get("k_fixed"), a["metric"])
        files = [out / f"consistency_top{a['m']}.csv", out / f"consistency_top{2 * a['m']}.csv"]
        files[0].write_text(top_m.to_csv())
        files[1].write_text(top_2m.to_csv())
        return [cp], [str(f) for f in files]
    if what == "cv":
        paths = [_need(p, "cache file") for p in a["cache"]]
        from .selector import score_heads

        tables = []
        for p in paths:
            c = read_cache(p)
            k = a.get("k_fixed") or search_k(c, a["k"], a["m"], a["metric"])[0]
            tables.append(score_heads(c, k, a["metric"]))
        rows = cv_report(tables, [Path(p).name for p in paths])
        f = out / "cv.csv"
        f.write_text(cv_csv(rows))
        return paths, [str(f)]
    if what == "overlap":
        paths = [_need(p, "selection file") for p in a["selections"]]
        sels = [read_selection(p) for p in paths]
        mat = overlap_matrix(sels, [Path(p).stem for p in paths], sels[0].table.method)
        f = out / "overlap.csv"
        f.write_text(mat.to_csv())
        return paths, [str(f)]
    raise ConfigError(f"unknown analysis {what!r}")


COMMANDS: dict[str, Callable[[dict], tuple[list[str], list[str]]]] = {
    "gen-demos": cmd_gen_demos,
    "pretrain": cmd_pretrain,
    "cache-acts": cmd_cache_acts,
    "select-heads": cmd_select_heads,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# manifests


def manifest_path(out: str) -> str:
    return str(out).rstrip("/") + ".manifest.json"


def _hashes(paths) -> dict[str, str]:
    return {str(p): file_digest(p) for p in paths}


def execute(command: str, a: dict) -> str:
    """Run one command and write its manifest; returns the manifest path."""
    t0 = time.perf_counter()
    inputs, outputs = COMMANDS[command](a)
    man = dict(
        kind="step",
        command=command,
        args=a,
        inputs=_hashes(inputs),
        outputs=_hashes(outputs),
        seed=a.get("seed"),
        wall_clock=time.perf_counter() - t0,
        version=__version__,
    )
    mp = manifest_path(a["out"])
    Path(mp).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return mp


def _replay_step(man: dict, scratch: Path) -> list[str]:
    """Re-run one step into ``scratch``; returns a list of mismatch descriptions."""
    for p, h in man["inputs"].items():
        if not Path(p).exists():
            raise MissingInput(f"manifest input {p} not found")
        if file_digest(p) != h:
            return [f"input {p} changed since the run"]
    a = copy.deepcopy(man["args"])
    orig_out = a["out"]
    a["out"] = str(scratch / Path(orig_out).name)
    _, outputs = COMMANDS[man["command"]](a)
    recorded = list(man["outputs"].items())
    if len(recorded) != len(outputs):
        return [f"{man['command']}: produced {len(outputs)} outputs, manifest lists {len(recorded)}"]
    bad = []
    for (path, h), new in zip(recorded, outputs):
        if file_digest(new) != h:
            bad.append(f"{man['command']}: {path} differs on replay")
    return bad


def repro(manifest: str) -> list[str]:
    man_path = _need(manifest, "manifest")
    try:
        man = json.loads(Path(man_path).read_text())
    except json.JSONDecodeError as e:
        raise StoreError(f"manifest {manifest} is not valid JSON") from e
    steps = man["steps"] if man.get("kind") == "pipeline" else [man_path]
    mismatches = []
    for sp in steps:
        step = json.loads(Path(_need(sp, "step manifest")).read_text())
        with tempfile.TemporaryDirectory(prefix="headsteer-repro-") as d:
            mismatches += _replay_step(step, Path(d))
    return mismatches


# ---------------------------------------------------------------------------
# full pipeline


def run_pipeline(cfg: dict, seed: int, workdir: str) -> str:
    """Run every stage under ``workdir``; returns the pipeline manifest path."""
    wd = Path(workdir)
    wd.mkdir(parents=True, exist_ok=True)
    pol = cfg["policy"]
    steps = []
    pre_demos = []
    for name in cfg["tasks"]["pretrain"]:
        out = str(wd / f"demos-{name}.hsdm")
        d = cfg["pretrain_demos"]
        steps.append(execute("gen-demos", dict(task=name, n=d["n"], noise=d["noise"], seed=seed,
                                               clutter=d["clutter"], n_obs=pol["n_obs_tokens"], out=out)))
        pre_demos.append(out)
    target = cfg["tasks"]["target"]
    tdemos = str(wd / f"demos-{target}.hsdm")
    d = cfg["demos"]
    steps.append(execute("gen-demos", dict(task=target, n=d["n"], noise=d["noise"], seed=seed + 100,
                                           clutter=d["clutter"], n_obs=pol["n_obs_tokens"], out=tdemos)))
    base = str(wd / "base.hsck")
    steps.append(execute("pretrain", dict(demos=pre_demos, policy=pol, seed=seed, out=base,
                                          train=_train_cfg(cfg["pretrain"], seed, {}).to_dict())))
    s = cfg["selection"]
    cache = str(wd / "cache.hsac")
    steps.append(execute("cache-acts", dict(checkpoint=base, demos=tdemos, stride=s["stride"],
                                            token_position=s["token_position"], out=cache)))
    sel = str(wd / "selection.json")
    steps.append(execute("select-heads", _select_args(cfg, seed, cache, base, tdemos, None, sel)))
    f = cfg["finetune"]
    reports = []
    for variant in (f["variant"], "full_head_baseline"):
        ck = str(wd / f"finetuned-{variant}.hsck")
        steps.append(execute("finetune", dict(
            checkpoint=base, demos=tdemos, selection=sel if variant != "full_head_baseline" else None,
            variant=variant, rank=f["rank"], alpha=f["alpha"], adapt_output_slices=f["adapt_output_slices"],
            merge=False, seed=seed, out=ck, train=_train_cfg(f, seed, {}).to_dict())))
        rep = str(wd / f"report-{variant}.json")
        e = cfg["eval"]
        steps.append(execute("eval", dict(checkpoint=ck, task=target, perturbations=e["perturbations"],
                                          grid_seed=e["grid_seed"], seed=seed, out=rep)))
        reports.append(rep)
    man = dict(kind="pipeline", steps=steps, seed=seed, config=cfg, version=__version__)
    mp = str(wd / "pipeline.manifest.json")
    Path(mp).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return mp


def _select_args(cfg, seed, cache, checkpoint, demos, neg_cache, out, ns=None) -> dict:
    s = cfg["selection"]
    g = (lambda name: getattr(ns, name, None)) if ns is not None else (lambda name: None)
    return dict(
        cache=cache, checkpoint=checkpoint, demos=demos, neg_cache=neg_cache,
        method=_pick(g("method"), s["method"]), k=_pick(g("k"), s["k"]), m=_pick(g("m"), s["m"]),
        metric=_pick(g("metric"), s["metric"]), iters=_pick(g("iters"), s["iters"]),
        lr=_pick(g("lr"), s["lr"]), n_samples=_pick(g("n_samples"), s["n_samples"]),
        holdout=_pick(g("holdout"), s["holdout"]), seed=seed, out=out,
    )


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides config and HEADSTEER_SEED")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="headsteer", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-demos", parents=[common], help="generate scripted demonstrations")
    s.add_argument("--task")
    s.add_argument("--n", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--clutter", type=_ints, help="lo,hi number of non-target objects")
    s.add_argument("--out", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="multi-task pretraining of a fresh policy")
    s.add_argument("--demos", type=_strs, required=True, help="comma-separated demo files")
    s.add_argument("--steps", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("cache-acts", parents=[common], help="cache per-head activations on demos")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--demos", required=True)
    s.add_argument("--stride", type=int)
    s.add_argument("--token-position", choices=["state", "last_obs"])
    s.add_argument("--out", required=True)

    s = sub.add_parser("select-heads", parents=[common], help="score heads and pick the top m")
    s.add_argument("--cache", required=True)
    s.add_argument("--method", choices=SELECT_METHODS)
    s.add_argument("--k", type=_ints, help="comma-separated k candidates")
    s.add_argument("--m", type=int)
    s.add_argument("--metric", choices=METRICS)
    s.add_argument("--checkpoint", help="needed by cma / reinforce")
    s.add_argument("--demos", help="needed by cma / reinforce")
    s.add_argument("--neg-cache", help="other-task cache for centroid selection")
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--holdout", type=float)
    s.add_argument("--out", required=True)

    s = sub.add_parser("finetune", parents=[common], help="selective LoRA finetuning")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--demos", required=True)
    s.add_argument("--selection")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--rank", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--no-output-slices", action="store_true", help="adapt query slices only")
    s.add_argument("--steps", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--merge", action="store_true", help="fold adapters into a plain checkpoint")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="grid evaluation under perturbation suites")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task")
    s.add_argument("--perturbations", type=_strs)
    s.add_argument("--grid-seed", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("analyze", parents=[common], help="consistency, CV and overlap tables")
    s.add_argument("--what", choices=["consistency", "cv", "overlap"])
    s.add_argument("--cache", type=_strs, default=[])
    s.add_argument("--selections", type=_strs, default=[])
    s.add_argument("--m", type=int)
    s.add_argument("--k", type=_ints, help="k candidates (searched unless --k-fixed)")
    s.add_argument("--k-fixed", type=int)
    s.add_argument("--metric", choices=METRICS)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("repro", parents=[common], help="replay a manifest and compare outputs")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("run", parents=[common], help="run the whole pipeline from one config")
    s.add_argument("--workdir")
    return p


def resolve_args(ns: argparse.Namespace, cfg: dict) -> dict:
    """Merge command-line flags over config values into a plain argument dict."""
    seed = resolve_seed(ns.seed, cfg)
    c = ns.command
    if c == "gen-demos":
        d = cfg["demos"]
        task = _pick(ns.task, cfg["tasks"]["target"])
        return dict(task=task, n=_pick(ns.n, d["n"]), noise=_pick(ns.noise, d["noise"]), seed=seed,
                    clutter=_pick(ns.clutter, d["clutter"]), n_obs=cfg["policy"]["n_obs_tokens"], out=ns.out)
    if c == "pretrain":
        tc = _train_cfg(cfg["pretrain"], seed, dict(total_steps=ns.steps, warmup_steps=ns.warmup,
                                                    peak_lr=ns.lr, batch_size=ns.batch_size))
        return dict(demos=ns.demos, policy=cfg["policy"], seed=seed, out=ns.out, train=tc.to_dict())
    if c == "cache-acts":
        s = cfg["selection"]
        return dict(checkpoint=ns.checkpoint, demos=ns.demos, stride=_pick(ns.stride, s["stride"]),
                    token_position=_pick(ns.token_position, s["token_position"]), out=ns.out)
    if c == "select-heads":
        return _select_args(cfg, seed, ns.cache, ns.checkpoint, ns.demos, ns.neg_cache, ns.out, ns)
    if c == "finetune":
        f = cfg["finetune"]
        tc = _train_cfg(f, seed, dict(total_steps=ns.steps, warmup_steps=ns.warmup, peak_lr=ns.lr,
                                      batch_size=ns.batch_size))
        return dict(checkpoint=ns.checkpoint, demos=ns.demos, selection=ns.selection,
                    variant=_pick(ns.variant, f["variant"]), rank=_pick(ns.rank, f["rank"]),
                    alpha=_pick(ns.alpha, f["alpha"]),
                    adapt_output_slices=False if ns.no_output_slices else f["adapt_output_slices"],
                    merge=ns.merge, seed=seed, out=ns.out, train=tc.to_dict())
    if c == "eval":
        e = cfg["eval"]
        return dict(checkpoint=ns.checkpoint, task=_pick(ns.task, cfg["tasks"]["target"]),
                    perturbations=_pick(ns.perturbations, e["perturbations"]),
                    grid_seed=_pick(ns.grid_seed, e["grid_seed"]), seed=seed, out=ns.out)
    if c == "analyze":
        s = cfg["selection"]
        return dict(what=_pick(ns.what, cfg["analysis"]["what"]), cache=ns.cache, selections=ns.selections,
                    m=_pick(ns.m, s["m"]), k=_pick(ns.k, s["k"]), k_fixed=ns.k_fixed,
                    metric=_pick(ns.metric, s["metric"]), out=ns.out)
    raise ConfigError(f"no argument resolution for {c}")


def _exit_code(e: BaseException) -> int:
    if isinstance(e, ReproMismatch):
        return EXIT_REPRO
    if isinstance(e, (MissingInput, FileNotFoundError)):
        return EXIT_MISSING
    if isinstance(e, StoreError):
        return EXIT_CORRUPT
    if isinstance(e, NumericFault):
        return EXIT_NUMERIC
    if isinstance(e, GenerationError):
        return EXIT_GENERATION
    if isinstance(e, (ContractError, KeyError, TypeError)):
        return EXIT_CONFIG
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, ns.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(ns.config)
        if ns.command == "repro":
            bad = repro(ns.manifest)
            if bad:
                raise ReproMismatch("; ".join(bad))
            print(f"repro ok: {ns.manifest}")
            return EXIT_OK
        if ns.command == "run":
            seed = resolve_seed(ns.seed, cfg)
            mp = run_pipeline(cfg, seed, _pick(ns.workdir, cfg["workdir"]))
            print(mp)
            return EXIT_OK
        mp = execute(ns.command, resolve_args(ns, cfg))
        print(mp)
        return EXIT_OK
    except Exception as e:  # one-line diagnosis plus a class-specific exit code
        code = _exit_code(e)
        if code == EXIT_ERROR and not isinstance(e, HeadSteerError):
            raise
        print(f"headsteer: error: {type(e).__name__}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
