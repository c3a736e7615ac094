import numpy as np
import pytest

from fd_oracle import CHECKS, REL_TOL
from streamtrain.memory_model import ModelSpec, layer_param_count
from streamtrain.numeric_core import (BLOCK_SLOT_ORDER, BindError, LayerKind, NumericFault,
                                      StaleBindingError, TemplatePool, bind, block_forward,
                                      block_local_backward, embed_forward, head_loss_and_grads)

SPEC = ModelSpec(2, 8, 12, 10, num_heads=2)


@pytest.mark.parametrize("kind", list(CHECKS))
@pytest.mark.parametrize("seed", range(3))
def test_finite_differences(kind, seed):
    assert CHECKS[kind](seed) < REL_TOL


def test_template_slots_cover_layer():
    pool = TemplatePool(SPEC)
    t = pool.get(LayerKind.TRANSFORMER_BLOCK)
    assert [s.name for s in t.slots] == list(BLOCK_SLOT_ORDER)
    assert t.total == layer_param_count(SPEC)
    offsets = [s.offset for s in t.slots]
    assert offsets[0] == 0 and offsets == sorted(offsets)
    assert pool.for_unit(SPEC.head_id).total == SPEC.hidden_size * (SPEC.vocab_size + 1)
    assert pool.get(LayerKind.HEAD, 0) is not pool.get(LayerKind.HEAD, 1)
    with pytest.raises(ValueError):
        pool.for_unit(SPEC.final_norm_id)


def test_bind_is_zero_copy():
    t = TemplatePool(SPEC).get(LayerKind.EMBEDDING)
    buf = np.zeros(t.total + 5, dtype=np.float32)
    b = bind(t, buf)
    buf[3] = 7.0
    assert b.tensors()["table"].ravel()[3] == 7.0
    with pytest.raises(BindError):
        bind(t, np.zeros(t.total - 1, dtype=np.float32))


class _Buf:
    def __init__(self, n):
        self.data = np.zeros(n, dtype=np.uint16)
        self.epoch = 0
        self.state = "Ready"
        self.bindable = True


def test_stale_binding_detected():
    t = TemplatePool(SPEC).get(LayerKind.EMBEDDING)
    buf = _Buf(t.total)
    b = bind(t, buf)
    b.tensors()
    buf.epoch += 1
    with pytest.raises(StaleBindingError):
        b.tensors()
    buf.bindable = False
    with pytest.raises(BindError):
        bind(t, buf)


def test_zero_gout_gives_zero_grads():
    rng = np.random.default_rng(0)
    t = TemplatePool(SPEC).get(LayerKind.TRANSFORMER_BLOCK)
    theta = rng.standard_normal(t.total)
    x = rng.standard_normal((5, 8))
    g_in, flat = block_local_backward(bind(t, theta), x, np.zeros_like(x))
    assert not g_in.any() and not flat.any()


def test_causality():
    rng = np.random.default_rng(1)
    t = TemplatePool(SPEC).get(LayerKind.TRANSFORMER_BLOCK)
    b = bind(t, rng.standard_normal(t.total))
    x = rng.standard_normal((6, 8))
    y = x.copy()
    y[4:] += 1.0
    assert np.array_equal(block_forward(b, x)[:4], block_forward(b, y)[:4])


def test_zero_head_gives_ln_v():
    t = TemplatePool(SPEC).get(LayerKind.HEAD)
    theta = np.zeros(t.total, dtype=np.float32)
    theta[:8] = 1
    h = np.random.default_rng(2).standard_normal((7, 8)).astype(np.float32)
    loss, _, _ = head_loss_and_grads(bind(t, theta), h, np.arange(7) % 10)
    assert loss == pytest.approx(np.log(10), rel=1e-6)


def test_numeric_fault_and_bad_ids():
    t = TemplatePool(SPEC).get(LayerKind.TRANSFORMER_BLOCK)
    theta = np.full(t.total, np.nan)
    with pytest.raises(NumericFault) as info:
        block_forward(bind(t, theta), np.ones((2, 8)), layer=3)
    assert info.value.layer == 3
    e = TemplatePool(SPEC).get(LayerKind.EMBEDDING)
    with pytest.raises(ValueError):
        embed_forward(bind(e, np.zeros(e.total)), [0, 10])
    h = TemplatePool(SPEC).get(LayerKind.HEAD)
    with pytest.raises(ValueError):
        head_loss_and_grads(bind(h, np.zeros(h.total)), np.ones((2, 8)), [0, 99])
