"""Reference math for the streamed model.

A block is pre-norm RMSNorm -> causal multi-head attention (no positional
encoding) -> residual, then pre-norm RMSNorm -> gated SiLU MLP -> residual.
Row vectors throughout: ``y = x @ W``.

Layers never own weights.  A :class:`LayerTemplate` describes where each
sub-tensor sits inside a flat weight buffer; :func:`bind` produces a
:class:`BoundLayer` whose tensors are views into that buffer.  All functions
compute in the dtype of their activation input, so the same code runs at fp32
in the engine and at fp64 under finite-difference checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from math import prod

import numpy as np

from .bf16 import bf16_bits_to_f32
from .memory_model import ModelSpec

RMS_EPS = 1e-6


class NumericFault(FloatingPointError):
    def __init__(self, msg: str, layer: int | None = None):
        super().__init__(msg if layer is None else f"layer {layer}: {msg}")
        self.layer = layer


class BindError(Exception):
    pass


class StaleBindingError(BindError):
    pass


class LayerKind(enum.Enum):
    TRANSFORMER_BLOCK = "TransformerBlock"
    EMBEDDING = "Embedding"
    HEAD = "Head"
    FINAL_NORM = "FinalNorm"


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def length(self) -> int:
        return prod(self.shape)


@dataclass(frozen=True)
class LayerTemplate:
    kind: LayerKind
    hidden_size: int
    ffn_size: int
    num_heads: int
    vocab_size: int
    slots: tuple[Slot, ...]
    tag: str = "A"

    @property
    def total(self) -> int:
        return sum(s.length for s in self.slots)

    def slot_table(self) -> list[tuple[str, int, int]]:
        return [(s.name, s.offset, s.length) for s in self.slots]


def _slots(named_shapes) -> tuple[Slot, ...]:
    out, pos = [], 0
    for name, shape in named_shapes:
        out.append(Slot(name, shape, pos))
        pos += prod(shape)
    return tuple(out)


BLOCK_SLOT_ORDER = ("norm1", "wq", "wk", "wv", "wo", "norm2", "wgate", "wup", "wdown")


def _template(spec: ModelSpec, kind: LayerKind, tag: str) -> LayerTemplate:
    h, f, V = spec.hidden_size, spec.ffn_size, spec.vocab_size
    if kind is LayerKind.TRANSFORMER_BLOCK:
        shapes = [("norm1", (h,)), ("wq", (h, h)), ("wk", (h, h)), ("wv", (h, h)),
                  ("wo", (h, h)), ("norm2", (h,)), ("wgate", (h, f)), ("wup", (h, f)),
                  ("wdown", (f, h))]
    elif kind is LayerKind.EMBEDDING:
        shapes = [("table", (V, h))]
    elif kind is LayerKind.HEAD:
        shapes = [("final_norm", (h,)), ("w_head", (V, h))]
    else:
        shapes = [("gain", (h,))]
    return LayerTemplate(kind, h, f, spec.num_heads, V, _slots(shapes), tag)


class TemplatePool:
    """Two interchangeable templates (A/B) per layer kind, for ping-pong binding."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.templates = {k: (_template(spec, k, "A"), _template(spec, k, "B"))
                          for k in LayerKind}

    def get(self, kind: LayerKind, parity: int = 0) -> LayerTemplate:
        return self.templates[kind][parity % 2]

    def for_unit(self, unit: int, parity: int = 0) -> LayerTemplate:
        s = self.spec
        if unit == s.embed_id:
            kind = LayerKind.EMBEDDING
        elif unit == s.head_id:
            kind = LayerKind.HEAD
        elif unit in s.block_ids:
            kind = LayerKind.TRANSFORMER_BLOCK
        else:
            raise ValueError(f"{unit} is not a streaming unit")
        return self.get(kind, parity)


def make_templates(spec: ModelSpec) -> TemplatePool:
    return TemplatePool(spec)


class BoundLayer:
    """A template bound to a flat weight buffer; holds views only.

    ``source`` may be a bare numpy array or any object exposing ``data`` and
    ``epoch`` (the engine's device buffers).  The binding goes stale once the
    source's epoch moves on, i.e. after the buffer was released.
    """

    def __init__(self, template: LayerTemplate, source):
        self.template = template
        self.source = source
        self.epoch = getattr(source, "epoch", None)
        flat = self._flat()
        self._views = {s.name: flat[s.offset:s.offset + s.length].reshape(s.shape)
                       for s in template.slots}

    def _flat(self) -> np.ndarray:
        return self.source if isinstance(self.source, np.ndarray) else self.source.data

    @property
    def valid(self) -> bool:
        return self.epoch is None or getattr(self.source, "epoch", None) == self.epoch

    def tensors(self, dtype=np.float32) -> dict[str, np.ndarray]:
        """Weights as compute-dtype arrays; bf16 payloads are widened on read."""
        if not self.valid:
            raise StaleBindingError(f"{self.template.kind.value} binding used after buffer release")
        out = {}
        for name, view in self._views.items():
            if view.dtype == np.uint16:
                out[name] = bf16_bits_to_f32(view).astype(dtype, copy=False)
            else:
                out[name] = view.astype(dtype, copy=False)
        return out


def bind(template: LayerTemplate, buffer) -> BoundLayer:
    """Map the template's slots onto ``buffer`` without copying weights."""
    flat = buffer if isinstance(buffer, np.ndarray) else buffer.data
    if getattr(buffer, "state", None) is not None and not getattr(buffer, "bindable", True):
        raise BindError(f"buffer {getattr(buffer, 'id', '?')} is not bindable "
                        f"(state {buffer.state})")
    if flat.ndim != 1 or flat.size < template.total:
        raise BindError(f"buffer has {flat.size} elements, template needs {template.total}")
    return BoundLayer(template, buffer)


# ---------------------------------------------------------------- primitives

def _check_finite(x: np.ndarray, what: str, layer):
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite {what}", layer)


def rmsnorm(x, gain):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.dtype.type(RMS_EPS))
    return x * r * gain, r


def rmsnorm_backward(x, r, gain, dy):
    dgain = np.sum(dy * x * r, axis=0)
    dxhat = dy * gain
    dx = r * dxhat - (r ** 3) * x * np.mean(dxhat * x, axis=-1, keepdims=True)
    return dx, dgain


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _split_heads(x, H):
    N, h = x.shape
    return x.reshape(N, H, h // H).transpose(1, 0, 2)


def _merge_heads(x):
    H, N, d = x.shape
    return x.transpose(1, 0, 2).reshape(N, H * d)


def _block_forward(w, x, H):
    dt = x.dtype.type
    N, h = x.shape
    d = h // H
    scale = dt(1.0 / np.sqrt(d))
    a, r1 = rmsnorm(x, w["norm1"])
    q, k, v = a @ w["wq"], a @ w["wk"], a @ w["wv"]
    qh, kh, vh = _split_heads(q, H), _split_heads(k, H), _split_heads(v, H)
    s = (qh @ kh.transpose(0, 2, 1)) * scale
    s = np.where(_causal_mask(N), -np.inf, s)
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / np.sum(e, axis=-1, keepdims=True)
    o = _merge_heads(p @ vh)
    x1 = x + o @ w["wo"]
    b, r2 = rmsnorm(x1, w["norm2"])
    gate, up = b @ w["wgate"], b @ w["wup"]
    sg = _sigmoid(gate)
    act = gate * sg * up
    out = x1 + act @ w["wdown"]
    cache = dict(a=a, r1=r1, qh=qh, kh=kh, vh=vh, p=p, o=o, x1=x1, b=b, r2=r2,
                 gate=gate, up=up, sg=sg, act=act, scale=scale)
    return out, cache


def block_forward(bound: BoundLayer, h_in: np.ndarray, layer: int | None = None) -> np.ndarray:
    t = bound.template
    if h_in.ndim != 2 or h_in.shape[1] != t.hidden_size:
        raise ValueError(f"expected [N, {t.hidden_size}] input, got {h_in.shape}")
    out, _ = _block_forward(bound.tensors(h_in.dtype), h_in, t.num_heads)
    _check_finite(out, "block output", layer)
    return out


def block_local_backward(bound: BoundLayer, h_in: np.ndarray, g_out: np.ndarray,
                         layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the block input plus flat weight grads in slot order.

    The block's forward intermediates are rebuilt from ``h_in``.
    """
    t = bound.template
    if h_in.ndim != 2 or h_in.shape[1] != t.hidden_size or g_out.shape != h_in.shape:
        raise ValueError(f"shape mismatch: h_in {h_in.shape}, g_out {g_out.shape}")
    w = bound.tensors(h_in.dtype)
    H = t.num_heads
    _, c = _block_forward(w, h_in, H)
    x = h_in
    g = g_out.astype(h_in.dtype, copy=False)

    # MLP branch
    dwdown = c["act"].T @ g
    dact = g @ w["wdown"].T
    silu = c["gate"] * c["sg"]
    dup = dact * silu
    dgate = dact * c["up"] * (c["sg"] * (1 + c["gate"] * (1 - c["sg"])))
    dwgate = c["b"].T @ dgate
    dwup = c["b"].T @ dup
    db = dgate @ w["wgate"].T + dup @ w["wup"].T
    dx1_norm, dnorm2 = rmsnorm_backward(c["x1"], c["r2"], w["norm2"], db)
    dx1 = g + dx1_norm

    # attention branch
    dwo = c["o"].T @ dx1
    do = _split_heads(dx1 @ w["wo"].T, H)
    dp = do @ c["vh"].transpose(0, 2, 1)
    dvh = c["p"].transpose(0, 2, 1) @ do
    ds = c["p"] * (dp - np.sum(dp * c["p"], axis=-1, keepdims=True))
    dqh = (ds @ c["kh"]) * c["scale"]
    dkh = (ds.transpose(0, 2, 1) @ c["qh"]) * c["scale"]
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    a = c["a"]
    dwq, dwk, dwv = a.T @ dq, a.T @ dk, a.T @ dv
    da = dq @ w["wq"].T + dk @ w["wk"].T + dv @ w["wv"].T
    dx_norm, dnorm1 = rmsnorm_backward(x, c["r1"], w["norm1"], da)
    g_in = dx1 + dx_norm

    parts = dict(norm1=dnorm1, wq=dwq, wk=dwk, wv=dwv, wo=dwo, norm2=dnorm2,
                 wgate=dwgate, wup=dwup, wdown=dwdown)
    flat = np.concatenate([parts[name].ravel() for name in BLOCK_SLOT_ORDER])
    _check_finite(g_in, "input gradient", layer)
    _check_finite(flat, "weight gradient", layer)
    return g_in, flat


def embed_forward(bound: BoundLayer, ids, dtype=np.float32) -> np.ndarray:
    ids = np.asarray(ids)
    V = bound.template.vocab_size
    if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= V)):
        raise ValueError(f"token ids must be a 1-D sequence in [0, {V})")
    table = bound.tensors(dtype)["table"]
    return table[ids]


def embed_backward(template: LayerTemplate, ids, g: np.ndarray) -> np.ndarray:
    """Scatter-add rows of ``g`` into a zero table gradient (fixed sequential order)."""
    dtable = np.zeros((template.vocab_size, template.hidden_size), dtype=g.dtype)
    np.add.at(dtable, np.asarray(ids), g)
    return dtable.ravel()


def head_loss_and_grads(bound: BoundLayer, h_L: np.ndarray, targets,
                        layer: int | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Final norm -> logits -> mean token cross-entropy.

    Returns ``(loss, dloss/dh_L, flat grads)`` with the flat buffer in the
    head template's slot order (final-norm gain, then head matrix).
    """
    t = bound.template
    targets = np.asarray(targets)
    N = h_L.shape[0]
    if h_L.ndim != 2 or h_L.shape[1] != t.hidden_size or targets.shape != (N,):
        raise ValueError(f"shape mismatch: h_L {h_L.shape}, targets {targets.shape}")
    if N and (targets.min() < 0 or targets.max() >= t.vocab_size):
        raise ValueError(f"targets must lie in [0, {t.vocab_size})")
    w = bound.tensors(h_L.dtype)
    xn, r = rmsnorm(h_L, w["final_norm"])
    logits = xn @ w["w_head"].T
    mx = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - mx)
    z = np.sum(e, axis=-1, keepdims=True)
    rows = np.arange(N)
    nll = (np.log(z) + mx)[:, 0] - logits[rows, targets]
    loss = np.mean(nll)
    _check_finite(np.asarray(loss), "loss", layer)
    dlogits = e / z
    dlogits[rows, targets] -= 1
    dlogits /= h_L.dtype.type(N)
    dw = dlogits.T @ xn
    dxn = dlogits @ w["w_head"]
    g_L, dgain = rmsnorm_backward(h_L, r, w["final_norm"], dxn)
    flat = np.concatenate([dgain.ravel(), dw.ravel()])
    _check_finite(flat, "head gradient", layer)
    return float(loss), g_L, flat
