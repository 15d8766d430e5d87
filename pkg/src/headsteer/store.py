"""Binary persistence for caches, checkpoints and demonstrations, plus JSON reports.

All three binary formats share one container layout::

    magic (5 bytes) | header length (u64 LE) | header (UTF-8 JSON) | blocks | checksum (u64 LE)

The header lists every block as ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the start of the block area. Arrays are stored
little-endian and C-ordered. The checksum is an 8-byte BLAKE2b digest of
everything between the magic and the checksum itself, so header edits are
caught as well as payload edits.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, ChecksumError, ContractError, StoreError, TruncatedFileError
from .lora import HeadId
from .policy import LoraAdapter, PolicyConfig, PolicyParams
from .selector import ActivationCache, HeadScoreTable, SelectionResult
from .simenv import DemoSet, EvalReport, TaskSpec, Trajectory

CACHE_MAGIC = b"HSAC1"
CHECKPOINT_MAGIC = b"HSCK1"
DEMO_MAGIC = b"HSDM1"
_U64 = struct.Struct("<Q")
_DTYPES = {"f4": "<f4", "i8": "<i8", "u1": "|u1"}


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        return "i8"
    if arr.dtype in (np.bool_, np.uint8):
        return "u1"
    raise ContractError(f"cannot store dtype {arr.dtype}")


def _encode(magic: bytes, header: dict, blocks: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in blocks.items():
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append(dict(name=name, dtype=code, shape=list(arr.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(dict(header, blocks=entries), sort_keys=True, separators=(",", ":")).encode()
    body = _U64.pack(len(head)) + head + b"".join(chunks)
    return magic + body + _checksum(body)


def _decode(magic: bytes, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[: len(magic)] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:len(magic)]!r}")
    pos = len(magic)
    if len(data) < pos + _U64.size:
        raise TruncatedFileError("file ends inside the header length")
    (hlen,) = _U64.unpack_from(data, pos)
    start = pos + _U64.size
    if len(data) < start + hlen + 8:
        raise TruncatedFileError(f"file ends inside the header ({len(data)} bytes)")
    # the header is only trusted after the checksum passes; until then it only sizes the file
    try:
        header = json.loads(data[start : start + hlen])
        entries = header.pop("blocks")
        payload_len = sum(int(e["nbytes"]) for e in entries)
        expected = start + hlen + payload_len + 8
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        header, expected, bad_header = None, None, e
    if expected is not None and len(data) < expected:
        raise TruncatedFileError(f"payload truncated: need {expected} bytes, have {len(data)}")
    if expected is not None and len(data) > expected:
        raise StoreError(f"{len(data) - expected} trailing bytes after checksum")
    if _checksum(data[pos:-8]) != data[-8:]:
        raise ChecksumError("checksum mismatch")
    if header is None:
        raise StoreError(f"unreadable header: {bad_header}")
    base = start + hlen
    blocks = {}
    for e in entries:
        dt = np.dtype(_DTYPES[e["dtype"]])
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != e["nbytes"]:
            raise StoreError(f"block {e['name']}: shape {shape} disagrees with {e['nbytes']} bytes")
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        blocks[e["name"]] = np.frombuffer(raw, dt).reshape(shape).copy()
    return header, blocks


def _write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as e:
        raise StoreError(f"cannot read {path}: {e}") from e


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# activation caches


def encode_cache(cache: ActivationCache) -> bytes:
    lengths = cache.lengths
    if cache.N < 2 or min(lengths, default=0) < 1:
        raise ContractError("a cache file needs at least 2 non-empty trajectories")
    if np.any(np.diff(cache.traj_index) < 0):
        raise ContractError("cache rows must be grouped by trajectory")
    L, H, dh = cache.dims
    header = dict(
        kind="cache", L=L, H=H, d_h=dh, N=cache.N, lengths=lengths,
        token_position=cache.token_position, stride=cache.stride, task_label=cache.task_label,
    )
    blocks = {
        "acts": cache.acts.astype(np.float32, copy=False),
        "actions": cache.actions.astype(np.float32, copy=False),
        "timestep": cache.timestep.astype(np.int64),
        "traj_index": cache.traj_index.astype(np.int64),
        "running_std": cache.running_std.astype(np.float32, copy=False),
    }
    return _encode(CACHE_MAGIC, header, blocks)


def decode_cache(data: bytes) -> ActivationCache:
    h, b = _decode(CACHE_MAGIC, data)
    L, H, dh = h["L"], h["H"], h["d_h"]
    R = sum(h["lengths"])
    if b["acts"].shape != (L, H, R, dh):
        raise StoreError(f"activation block {b['acts'].shape} disagrees with header {(L, H, R, dh)}")
    return ActivationCache(
        b["acts"], b["actions"], b["traj_index"], b["timestep"], b["running_std"],
        h["token_position"], h["stride"], h["task_label"],
    )


def write_cache(path, cache: ActivationCache) -> None:
    _write(path, encode_cache(cache))


def read_cache(path) -> ActivationCache:
    return decode_cache(_read(path))


def cache_size_report(cache: ActivationCache) -> float:
    """Number of stored activation values, in millions."""
    L, H, dh = cache.dims
    return sum(cache.lengths) * L * H * dh / 1e6


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: PolicyParams
    mask_digest: str | None = None
    parent: str | None = None


def encode_checkpoint(params: PolicyParams, mask_digest: str | None = None, parent: str | None = None) -> bytes:
    params.validate()
    header = dict(
        kind="checkpoint",
        config=params.config.to_dict(),
        mask_digest=mask_digest,
        parent=parent,
        adapters={t: a.alpha for t, a in sorted(params.adapters.items())},
    )
    blocks = {k: v.astype(np.float32, copy=False) for k, v in params.flat_items().items()}
    return _encode(CHECKPOINT_MAGIC, header, blocks)


def decode_checkpoint(data: bytes, expect: PolicyConfig | None = None) -> Checkpoint:
    h, b = _decode(CHECKPOINT_MAGIC, data)
    cfg = PolicyConfig.from_dict(h["config"])
    if expect is not None:
        cfg = expect
    tensors = {k: v for k, v in b.items() if ".lora." not in k}
    adapters = {}
    for t, alpha in h["adapters"].items():
        try:
            adapters[t] = LoraAdapter(t, b[f"{t}.lora.A"], b[f"{t}.lora.B"], float(alpha))
        except KeyError as e:
            raise StoreError(f"adapter {t} listed but its matrices are missing") from e
    params = PolicyParams(cfg, tensors, adapters)
    try:
        params.validate()
    except ContractError as e:
        raise ContractError(f"checkpoint does not fit config: {e}") from e
    return Checkpoint(params, h.get("mask_digest"), h.get("parent"))


def write_checkpoint(path, params: PolicyParams, mask_digest: str | None = None, parent: str | None = None) -> None:
    _write(path, encode_checkpoint(params, mask_digest, parent))


def read_checkpoint(path, expect: PolicyConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``expect`` the tensors must match that config exactly."""
    return decode_checkpoint(_read(path), expect)


# ---------------------------------------------------------------------------
# demonstrations


def encode_demos(demos: DemoSet) -> bytes:
    trajs = demos.trajectories
    tasks = {t.task for t in trajs}
    if len(tasks) != 1:
        raise ContractError("a demo file holds one task")
    header = dict(
        kind="demos",
        task=trajs[0].task.to_dict(),
        N=len(trajs),
        T=[t.T for t in trajs],
        d=int(trajs[0].actions.shape[1]),
        seed=demos.seed,
        label=demos.task_label,
        success=[bool(t.success) for t in trajs],
    )
    blocks = {
        "obs": np.concatenate([t.obs for t in trajs]).astype(np.float32, copy=False),
        "obs_mask": np.concatenate([t.obs_mask for t in trajs]).astype(np.uint8),
        "state": np.concatenate([t.state for t in trajs]).astype(np.float32, copy=False),
        "actions": np.concatenate([t.actions for t in trajs]).astype(np.float32, copy=False),
        "gripper_change": np.concatenate([t.gripper_change for t in trajs]).astype(np.uint8),
    }
    return _encode(DEMO_MAGIC, header, blocks)


def decode_demos(data: bytes) -> DemoSet:
    h, b = _decode(DEMO_MAGIC, data)
    task = TaskSpec(**h["task"])
    bounds = np.cumsum([0] + h["T"])
    if bounds[-1] != b["actions"].shape[0]:
        raise StoreError("record count disagrees with trajectory lengths")
    trajs = []
    for i, ok in enumerate(h["success"]):
        s = slice(bounds[i], bounds[i + 1])
        trajs.append(
            Trajectory(
                task, b["obs"][s], b["obs_mask"][s].astype(bool), b["state"][s], b["actions"][s],
                b["gripper_change"][s].astype(bool), ok,
            )
        )
    return DemoSet(trajs, h["label"], h["seed"])


def write_demos(path, demos: DemoSet) -> None:
    _write(path, encode_demos(demos))


def read_demos(path) -> DemoSet:
    return decode_demos(_read(path))


# ---------------------------------------------------------------------------
# structured text


def selection_to_dict(sel: SelectionResult) -> dict:
    t = sel.table
    return dict(
        heads=[str(h) for h in sel.heads],
        m=sel.m,
        method=t.method,
        k=t.k_used,
        seed=t.seed,
        metric=t.metric,
        higher_is_better=t.higher_is_better,
        scores={str(h): t.scores[h] for h in sorted(t.scores)},
        cv=t.cv,
    )


def selection_from_dict(d: Mapping) -> SelectionResult:
    table = HeadScoreTable(
        {HeadId.parse(k): float(v) for k, v in d["scores"].items()},
        d["method"], d["k"], d["seed"], d["higher_is_better"], d.get("metric", "cosine"),
    )
    return SelectionResult(tuple(HeadId.parse(h) for h in d["heads"]), table, d["m"])


def dumps(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_selection(path, sel: SelectionResult) -> None:
    Path(path).write_text(dumps(selection_to_dict(sel)))


def read_selection(path) -> SelectionResult:
    return selection_from_dict(json.loads(Path(path).read_text()))


def write_report(path, reports: list[EvalReport]) -> None:
    Path(path).write_text(dumps(dict(reports=[r.to_dict() for r in reports])))


def read_report(path) -> list[EvalReport]:
    out = []
    for r in json.loads(Path(path).read_text())["reports"]:
        out.append(EvalReport(r["task"], r["perturbation"], [c == "1" for c in r["bitmap"]]))
    return out
