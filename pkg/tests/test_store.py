import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from headsteer.errors import BadMagicError, ChecksumError, ContractError, StoreError, TruncatedFileError
from headsteer.lora import HeadId, attach, build_mask, merge
from headsteer.policy import forward, init_params
from headsteer.selector import ActivationCache, HeadScoreTable, score_heads, select_top_m
from headsteer.simenv import TASKS, EvalReport, gen_demos
from headsteer.store import (
    cache_size_report,
    decode_cache,
    decode_checkpoint,
    decode_demos,
    encode_cache,
    encode_checkpoint,
    encode_demos,
    read_cache,
    read_checkpoint,
    read_demos,
    read_report,
    read_selection,
    write_cache,
    write_checkpoint,
    write_demos,
    write_report,
    write_selection,
)
from util import random_batch, random_cache, tiny_config


def _same_cache(a, b):
    return all(
        getattr(a, f).tobytes() == getattr(b, f).tobytes()
        for f in ("acts", "actions", "traj_index", "timestep", "running_std")
    ) and (a.token_position, a.stride, a.task_label) == (b.token_position, b.stride, b.task_label)


@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5))
def test_cache_round_trip(seed, N, L, H, dh):
    gen = np.random.default_rng(seed)
    cache = random_cache(gen, N, gen.integers(1, 6, N), L, H, dh)
    data = encode_cache(cache)
    back = decode_cache(data)
    assert _same_cache(cache, back)
    assert encode_cache(back) == data


def test_cache_file_io_and_rejections(tmp_path):
    gen = np.random.default_rng(0)
    cache = random_cache(gen, 3, [4, 2, 5], 2, 2, 3)
    path = tmp_path / "c.hsac"
    write_cache(path, cache)
    assert _same_cache(read_cache(path), cache)
    one = cache.subset_trajectories([0])
    with pytest.raises(ContractError):
        encode_cache(one)


@given(st.integers(0, 10_000), st.data())
def test_flipped_byte_is_detected(seed, data):
    gen = np.random.default_rng(seed)
    raw = bytearray(encode_cache(random_cache(gen, 2, [3, 2], 1, 2, 2)))
    pos = data.draw(st.integers(5, len(raw) - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    with pytest.raises(StoreError):
        decode_cache(bytes(raw))


def test_error_kinds_are_distinct():
    raw = encode_cache(random_cache(np.random.default_rng(1), 2, [3, 3], 1, 1, 2))
    with pytest.raises(BadMagicError):
        decode_cache(b"XXXXX" + raw[5:])
    with pytest.raises(TruncatedFileError):
        decode_cache(raw[:-20])
    payload = bytearray(raw)
    payload[-12] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_cache(bytes(payload))
    with pytest.raises(StoreError):
        decode_cache(raw + b"\0")
    # each file kind refuses the others' magic
    with pytest.raises(BadMagicError):
        decode_checkpoint(raw)


def test_cache_size_report():
    gen = np.random.default_rng(0)
    acts = np.zeros((4, 4, 800, 16), np.float32)
    c = ActivationCache(acts, np.zeros((800, 3), np.float32), np.repeat(np.arange(20), 40),
                        np.tile(np.arange(40), 20), np.zeros((4, 4), np.float32))
    # 20 demos x 40 steps x 4 layers x 4 heads x 16 dims = 204800 values
    assert cache_size_report(c) == pytest.approx(20 * 40 * 4 * 4 * 16 / 1e6) == pytest.approx(0.2048)
    doubled = ActivationCache.concat([c, c])
    assert cache_size_report(doubled) == pytest.approx(2 * cache_size_report(c))
    # full-scale shape: 18 layers x 8 heads x 256 dims, 20 demos of about 120 retained steps
    assert 10 <= 20 * 120 * 18 * 8 * 256 / 1e6 <= 1000
    assert random_cache(gen, 2, [1, 1], 1, 1, 1).n_rows == 2


@pytest.mark.parametrize("kind", ["regression", "flow_matching"])
def test_checkpoint_round_trip_and_forward(tmp_path, kind):
    cfg = tiny_config(action_head_kind=kind, flow_hidden=8, time_dim=4)
    p = init_params(cfg, 2)
    mask = build_mask(cfg, [HeadId(0, 1)], "queries_plus_mlp")
    attach(p, mask, 2, rng=np.random.default_rng(0))
    for a in p.adapters.values():
        a.B[...] = np.random.default_rng(1).normal(0, 0.1, a.B.shape)
    path = tmp_path / "p.hsck"
    write_checkpoint(path, p, mask.digest(), "abc")
    ck = read_checkpoint(path)
    assert ck.mask_digest == mask.digest() and ck.parent == "abc"
    assert set(ck.params.adapters) == set(p.adapters)
    b = random_batch(cfg, 3, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(3, 3)) if kind == "flow_matching" else None
    t = np.full(3, 0.5) if kind == "flow_matching" else None
    f1 = forward(p, b, flow_x=x, flow_t=t)
    f2 = forward(ck.params, b, flow_x=x, flow_t=t)
    assert f1.acts.tobytes() == f2.acts.tobytes()
    assert f1.action.tobytes() == f2.action.tobytes()
    assert encode_checkpoint(p, mask.digest(), "abc") == path.read_bytes()


def test_merged_checkpoint_has_plain_tensors_only(tmp_path):
    cfg = tiny_config()
    p = attach(init_params(cfg), build_mask(cfg, [HeadId(1, 1)], "queries_only"), 2)
    path = tmp_path / "m.hsck"
    write_checkpoint(path, merge(p))
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[5:13], "little")
    header = json.loads(raw[13 : 13 + hlen])
    assert header["adapters"] == {}
    assert all(".lora." not in blk["name"] for blk in header["blocks"])
    assert [blk["name"] for blk in header["blocks"]] == sorted(blk["name"] for blk in header["blocks"])


def test_checkpoint_into_mismatched_config_lists_offenders():
    small = init_params(tiny_config(), 0)
    data = encode_checkpoint(small)
    bigger = tiny_config(n_layers=3)
    with pytest.raises(ContractError) as e:
        decode_checkpoint(data, expect=bigger)
    assert "layer2" in str(e.value)


def test_demo_round_trip(tmp_path):
    demos = gen_demos(TASKS["push-blue"], n=3, noise=0.3, seed=4)
    path = tmp_path / "d.hsdm"
    write_demos(path, demos)
    back = read_demos(path)
    assert back.N == 3 and back.task_label == demos.task_label and back.seed == 4
    for a, b in zip(demos.trajectories, back.trajectories):
        assert a.task == b.task and a.success == b.success
        for f in ("obs", "obs_mask", "state", "actions", "gripper_change"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert encode_demos(back) == path.read_bytes()


@given(st.integers(0, 10_000))
def test_demo_encoding_is_inverse(seed):
    demos = gen_demos(TASKS["reach-red"], n=2, noise=0.3, seed=seed)
    data = encode_demos(demos)
    assert encode_demos(decode_demos(data)) == data


def test_selection_and_report_text(tmp_path):
    cache = random_cache(np.random.default_rng(0), 3, [4, 4, 4], 2, 2, 3)
    sel = select_top_m(score_heads(cache, 3), 2)
    path = tmp_path / "sel.json"
    write_selection(path, sel)
    back = read_selection(path)
    assert back.heads == sel.heads and back.table.scores == sel.table.scores and back.m == 2
    d = json.loads(path.read_text())
    assert d["method"] == "knn" and d["k"] == 3
    t = HeadScoreTable({HeadId(0, 0): 1.0, HeadId(0, 1): 2.0}, "cma", None, 5, True)
    write_selection(path, select_top_m(t, 1))
    assert read_selection(path).heads == (HeadId(0, 1),)
    rep = [EvalReport("reach-red", "none", [True, False] * 20)]
    rpath = tmp_path / "r.json"
    write_report(rpath, rep)
    back = read_report(rpath)
    assert back[0].bitmap == rep[0].bitmap and back[0].rate == 0.5
