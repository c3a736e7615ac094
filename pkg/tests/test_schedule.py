import pytest

from streamtrain import schedule as sch


def _ops(plan):
    return [(s.op, s.unit) for s in plan]


def test_plan_l4_k2_by_hand():
    expected = [
        ("embed_fwd", 0), ("fwd", 1), ("fwd", 2), ("fwd", 3), ("fwd", 4), ("head", 6),
        ("ckpt_load", 1), ("recompute_block", 1), ("recompute", 3), ("bwd", 4), ("bwd", 3),
        ("ckpt_free", 1),
        ("ckpt_load", 0), ("recompute_block", 0), ("recompute", 1), ("bwd", 2), ("bwd", 1),
        ("ckpt_free", 0),
        ("embed_bwd", 0),
    ]
    plan = sch.build_plan(4, 2)
    assert _ops(plan) == expected
    # embed, 4 fwd, head, 2 recompute, 4 bwd
    assert [s.k for s in sch.stream_order(plan)] == list(range(12))


def test_plan_ragged_last_block():
    # L=5, K=2: blocks {1,2} {3,4} {5}; the last block has nothing to recompute
    plan = sch.build_plan(5, 2)
    assert sch.anchor_indices(5, 2) == [0, 2, 4]
    assert [u for op, u in _ops(plan) if op == "recompute"] == [3, 1]
    assert sch.recompute_count(plan) == 2
    assert [u for op, u in _ops(plan) if op == "bwd"] == [5, 4, 3, 2, 1]


@pytest.mark.parametrize("L", range(1, 13))
def test_every_layer_backward_once(L):
    for K in range(1, L + 1):
        for variant in ("alg1", "interleaved"):
            plan = sch.build_plan(L, K, variant)
            assert sorted(u for op, u in _ops(plan) if op == "bwd") == list(range(1, L + 1))
            assert sch.recompute_count(plan) == L - len(sch.anchor_indices(L, K))


def test_interleaved_differs_but_same_multiset():
    a, b = sch.build_plan(8, 4), sch.build_plan(8, 4, "interleaved")
    assert _ops(a) != _ops(b)
    assert sorted(_ops(a)) == sorted(_ops(b))


def test_plan_rejects_bad_args():
    with pytest.raises(ValueError):
        sch.build_plan(4, 5)
    with pytest.raises(ValueError):
        sch.build_plan(4, 2, "zigzag")
