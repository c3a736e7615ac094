"""Central finite-difference checks of every layer kind, in float64.

Each check compares directional derivatives along random directions (over
all weights, and over the layer input) with the analytic gradients.
"""

import numpy as np

from streamtrain.memory_model import ModelSpec
from streamtrain.numeric_core import (LayerKind, TemplatePool, bind, block_forward,
                                      block_local_backward, embed_backward, embed_forward,
                                      head_loss_and_grads, rmsnorm, rmsnorm_backward)

REL_TOL = 1e-3
FLOOR = 1e-6
STEP = 1e-6


def rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), FLOOR)


def _directional(f, x, u):
    return (f(x + STEP * u) - f(x - STEP * u)) / (2 * STEP)


def _spec(rng) -> ModelSpec:
    H = int(rng.choice([1, 2]))
    return ModelSpec(1, 4 * H * int(rng.integers(1, 3)), int(rng.integers(3, 9)),
                     int(rng.integers(5, 12)), H)


def check_block(seed: int, directions: int = 3) -> float:
    rng = np.random.default_rng(seed)
    spec = _spec(rng)
    t = TemplatePool(spec).get(LayerKind.TRANSFORMER_BLOCK)
    N = int(rng.integers(2, 7))
    theta = rng.normal(0, 0.4, t.total)
    for s in t.slots:  # gains near 1
        if len(s.shape) == 1:
            theta[s.offset:s.offset + s.length] += 1.0
    x = rng.standard_normal((N, spec.hidden_size))
    R = rng.standard_normal((N, spec.hidden_size))
    g_in, flat = block_local_backward(bind(t, theta), x, R)
    worst = 0.0
    for _ in range(directions):
        u = rng.standard_normal(t.total)
        fd = _directional(lambda th: np.sum(block_forward(bind(t, th), x) * R), theta, u)
        worst = max(worst, rel_err(fd, float(flat @ u)))
        v = rng.standard_normal(x.shape)
        fd = _directional(lambda xx: np.sum(block_forward(bind(t, theta), xx) * R), x, v)
        worst = max(worst, rel_err(fd, float(np.sum(g_in * v))))
    return worst


def check_head(seed: int, directions: int = 3) -> float:
    rng = np.random.default_rng(seed)
    spec = _spec(rng)
    t = TemplatePool(spec).get(LayerKind.HEAD)
    N = int(rng.integers(2, 7))
    theta = rng.normal(0, 0.5, t.total)
    theta[:spec.hidden_size] += 1.0
    h = rng.standard_normal((N, spec.hidden_size))
    y = rng.integers(0, spec.vocab_size, N)
    _, g_L, flat = head_loss_and_grads(bind(t, theta), h, y)
    worst = 0.0
    for _ in range(directions):
        u = rng.standard_normal(t.total)
        fd = _directional(lambda th: head_loss_and_grads(bind(t, th), h, y)[0], theta, u)
        worst = max(worst, rel_err(fd, float(flat @ u)))
        v = rng.standard_normal(h.shape)
        fd = _directional(lambda hh: head_loss_and_grads(bind(t, theta), hh, y)[0], h, v)
        worst = max(worst, rel_err(fd, float(np.sum(g_L * v))))
    return worst


def check_embedding(seed: int, directions: int = 3) -> float:
    rng = np.random.default_rng(seed)
    spec = _spec(rng)
    t = TemplatePool(spec).get(LayerKind.EMBEDDING)
    N = int(rng.integers(2, 9))
    ids = rng.integers(0, spec.vocab_size, N)
    theta = rng.standard_normal(t.total)
    R = rng.standard_normal((N, spec.hidden_size))
    flat = embed_backward(t, ids, R)
    worst = 0.0
    for _ in range(directions):
        u = rng.standard_normal(t.total)
        fd = _directional(
            lambda th: np.sum(embed_forward(bind(t, th), ids, np.float64) * R), theta, u)
        worst = max(worst, rel_err(fd, float(flat @ u)))
    return worst


def check_final_norm(seed: int, directions: int = 3) -> float:
    rng = np.random.default_rng(seed)
    spec = _spec(rng)
    t = TemplatePool(spec).get(LayerKind.FINAL_NORM)
    N = int(rng.integers(2, 7))
    gain = 1.0 + rng.normal(0, 0.3, t.total)
    x = rng.standard_normal((N, spec.hidden_size))
    R = rng.standard_normal(x.shape)
    _, r = rmsnorm(x, gain)
    dx, dgain = rmsnorm_backward(x, r, gain, R)
    worst = 0.0
    for _ in range(directions):
        u = rng.standard_normal(t.total)
        fd = _directional(lambda g: np.sum(rmsnorm(x, g)[0] * R), gain, u)
        worst = max(worst, rel_err(fd, float(dgain @ u)))
        v = rng.standard_normal(x.shape)
        fd = _directional(lambda xx: np.sum(rmsnorm(xx, gain)[0] * R), x, v)
        worst = max(worst, rel_err(fd, float(np.sum(dx * v))))
    return worst


CHECKS = {
    LayerKind.TRANSFORMER_BLOCK: check_block,
    LayerKind.EMBEDDING: check_embedding,
    LayerKind.HEAD: check_head,
    LayerKind.FINAL_NORM: check_final_norm,
}
