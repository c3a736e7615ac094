"""bfloat16 emulation on top of numpy float32 bit patterns."""

from __future__ import annotations

import numpy as np


def f32_to_bf16_bits(x) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even), returned as uint16 bits."""
    a = np.ascontiguousarray(x, dtype=np.float32)
    bits = a.view(np.uint32)
    nan = np.isnan(a)
    # round-to-nearest-even on the 16 discarded mantissa bits
    bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = ((bits + bias) >> np.uint32(16)).astype(np.uint16)
    if nan.any():
        out = np.where(nan, ((bits >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16), out)
    return out


def bf16_bits_to_f32(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16)
    return (b.astype(np.uint32) << np.uint32(16)).view(np.float32)


def bf16_round(x):
    """Nearest bf16-representable float32; idempotent, NaN/inf pass through."""
    scalar = np.isscalar(x)
    out = bf16_bits_to_f32(f32_to_bf16_bits(np.atleast_1d(np.asarray(x, dtype=np.float32))))
    return np.float32(out[0]) if scalar else out.reshape(np.shape(x))
