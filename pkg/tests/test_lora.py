import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from headsteer.errors import ContractError
from headsteer.lora import HeadId, all_heads, attach, build_mask, merge, trainable_param_count
from headsteer.policy import PolicyConfig, forward, init_params, tensor_shapes
from util import random_batch, tiny_config

DESK = PolicyConfig()


def test_head_id_order_and_parse():
    assert sorted([HeadId(1, 0), HeadId(0, 3), HeadId(0, 1)]) == [(0, 1), (0, 3), (1, 0)]
    assert HeadId.parse("L2H3") == HeadId(2, 3)
    assert str(HeadId(2, 3)) == "L2H3"
    with pytest.raises(ContractError):
        HeadId.parse("layer2")


def test_mask_example_queries_only_slices():
    mask = build_mask(DESK, [HeadId(0, 1)], "queries_plus_mlp", adapt_output_slices=False)
    expected = {"layer0.q_head1", "layer0.mlp.in.w", "layer0.mlp.in.b", "layer0.mlp.out.w", "layer0.mlp.out.b",
                "action_head.w", "action_head.b"}
    assert mask.adapted_tensors == expected
    with_o = build_mask(DESK, [HeadId(0, 1)], "queries_plus_mlp")
    assert with_o.adapted_tensors == expected | {"layer0.o_head1"}


def test_mask_variants():
    sel = [HeadId(1, 2), HeadId(3, 0)]
    qo = build_mask(DESK, sel, "queries_only")
    assert not any(".mlp." in n for n in qo.adapted_tensors)
    assert {"layer1.q_head2", "layer3.q_head0"} <= qo.lora_targets
    full = build_mask(DESK, sel, "full_head_baseline")
    assert {f"layer{l}.q_head{h}" for l, h in all_heads(4, 4)} <= full.lora_targets
    assert {"embed.obs.w", "embed.obs.b"} <= full.direct
    assert "embed.task" in full.frozen_tensors
    everything = build_mask(DESK, all_heads(4, 4), "queries_plus_mlp")
    assert sum(1 for n in everything.lora_targets if ".q_head" in n) == 16
    with pytest.raises(ContractError):
        build_mask(DESK, [], "queries_plus_mlp")
    with pytest.raises(ContractError):
        build_mask(DESK, [HeadId(4, 0)], "queries_only")


@given(st.sets(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=16),
       st.sampled_from(["queries_only", "queries_plus_mlp", "full_head_baseline"]), st.booleans())
def test_mask_partition_and_kv_frozen(sel, variant, o_slices):
    mask = build_mask(DESK, [HeadId(*h) for h in sel], variant, adapt_output_slices=o_slices)
    names = set(tensor_shapes(DESK))
    assert mask.adapted_tensors | mask.frozen_tensors == names
    assert not mask.adapted_tensors & mask.frozen_tensors
    assert all(f"layer{l}.kv" in mask.frozen_tensors for l in range(4))
    assert not any(".ln" in n for n in mask.adapted_tensors)
    if variant != "full_head_baseline":
        q = {n for n in mask.lora_targets if ".q_head" in n}
        assert q == {f"layer{l}.q_head{h}" for l, h in sel}


def test_adapted_parameter_count_oracle():
    sel = [HeadId(0, 1), HeadId(2, 3)]
    r = 2
    mask = build_mask(DESK, sel, "queries_plus_mlp")
    D, dh, F = 64, 16, 256
    q_and_o = 2 * (r * (D + dh) + r * (dh + D))
    mlps = 2 * (F * D + F + D * F + D)
    head = 3 * D + 3
    assert trainable_param_count(DESK, mask, r) == q_and_o + mlps + head
    base = build_mask(DESK, sel, "full_head_baseline")
    assert trainable_param_count(DESK, mask, 8) < trainable_param_count(DESK, base, 8)


def test_attach_is_neutral_and_guarded():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    b = random_batch(cfg, 5, np.random.default_rng(0))
    before = forward(p, b)
    mask = build_mask(cfg, [HeadId(1, 0)], "queries_plus_mlp")
    attach(p, mask, rank=4, rng=np.random.default_rng(1))
    after = forward(p, b)
    assert before.acts.tobytes() == after.acts.tobytes()
    assert before.action.tobytes() == after.action.tobytes()
    ad = p.adapters["layer1.q_head0"]
    assert ad.rank == 4 and not np.any(ad.B) and abs(ad.A.std() - 0.01) < 0.005
    with pytest.raises(ContractError):
        attach(p, mask, rank=4)
    with pytest.raises(ContractError):
        attach(init_params(cfg), mask, rank=9)


def test_known_adapter_values_fold_entrywise():
    cfg = PolicyConfig(n_layers=1, n_heads=1, d_model=2, obs_features=2, n_tasks=1)
    p = init_params(cfg, 0)
    mask = build_mask(cfg, [HeadId(0, 0)], "queries_only", adapt_output_slices=False)
    for alpha in (1.0, 3.0):
        q = init_params(cfg, 0)
        attach(q, mask, rank=1, alpha=alpha)
        ad = q.adapters["layer0.q_head0"]
        ad.A[...] = [[2.0, -1.0]]
        ad.B[...] = [[0.5], [3.0]]
        W = p.tensors["layer0.q_head0"].astype(np.float64)
        expect = W + alpha * np.array([[1.0, -0.5], [6.0, -3.0]])
        assert np.array_equal(merge(q).tensors["layer0.q_head0"], expect.astype(np.float32))


def test_full_rank_adapter_represents_any_update():
    gen = np.random.default_rng(0)
    target = gen.normal(size=(4, 4))
    U, s, Vt = np.linalg.svd(target)
    B, A = U * s, Vt
    assert np.allclose(B @ A, target)
    assert np.linalg.matrix_rank(B @ A) == 4


def test_merge_equivalence_and_idempotence():
    cfg = tiny_config()
    p = init_params(cfg, 4)
    mask = build_mask(cfg, [HeadId(0, 0), HeadId(1, 1)], "queries_plus_mlp")
    assert merge(attach(p.copy(), mask, 2)).tensors.keys() == p.tensors.keys()
    zero = merge(attach(p.copy(), mask, 2))
    assert all(zero.tensors[k].tobytes() == p.tensors[k].tobytes() for k in p.tensors)
    gen = np.random.default_rng(2)
    attach(p, mask, 2, rng=gen)
    for a in p.adapters.values():
        a.B[...] = gen.normal(0, 0.3, a.B.shape)
    m = merge(p)
    assert not m.adapters
    worst = 0.0
    for i in range(20):
        b = random_batch(cfg, 1, np.random.default_rng(100 + i))
        worst = max(worst, float(np.max(np.abs(forward(p, b).action - forward(m, b).action))))
    assert worst < 1e-6
    mm = merge(m)
    assert all(mm.tensors[k].tobytes() == m.tensors[k].tobytes() for k in m.tensors)


def test_mask_digest_stable():
    a = build_mask(DESK, [HeadId(0, 1), HeadId(2, 2)], "queries_plus_mlp")
    b = build_mask(DESK, [HeadId(2, 2), HeadId(0, 1)], "queries_plus_mlp")
    c = build_mask(DESK, [HeadId(2, 2)], "queries_plus_mlp")
    assert a.digest() == b.digest() != c.digest()
