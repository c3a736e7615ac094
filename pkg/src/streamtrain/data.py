"""Synthetic token tasks and deterministic weight initialisation."""

from __future__ import annotations

import numpy as np

from .engine import Batch
from .memory_model import ModelSpec
from .numeric_core import TemplatePool
from .tile_store import Section, TileStore

TASKS = ("copy", "reverse")


def make_synthetic_batch(task: str, seed: int, tokens: int, vocab_size: int) -> Batch:
    """Uniform random ids with targets derived token by token.

    ``copy`` shifts each id by one place in the vocabulary, ``reverse``
    mirrors it (``V - 1 - x``).  Both are per-token maps, so a model with no
    positional signal can learn them.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if tokens < 1 or vocab_size < 2:
        raise ValueError("need tokens >= 1 and vocab_size >= 2")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab_size, size=tokens, dtype=np.int64)
    return Batch(ids, synthetic_targets(task, ids, vocab_size))


def synthetic_targets(task: str, ids: np.ndarray, vocab_size: int) -> np.ndarray:
    if task == "copy":
        return (ids + 1) % vocab_size
    if task == "reverse":
        return vocab_size - 1 - ids
    raise ValueError(f"unknown task {task!r}")


def init_store(spec: ModelSpec, store: TileStore, seed: int, zero_head: bool = True,
               std: float = 0.02) -> TileStore:
    """Fill weights in place: unit norm gains, N(0, std) matrices, unit-variance embeddings.

    With ``zero_head`` (and untied embeddings) the first loss is exactly ln V.
    Moments and grads are zeroed and the step counter reset.
    """
    rng = np.random.default_rng(seed)
    pool = TemplatePool(spec)
    store.backing.fill(0)
    store.step = 0
    for unit in store.layout.units:
        tmpl = pool.for_unit(unit)
        flat = np.zeros(tmpl.total, dtype=np.float32)
        for slot in tmpl.slots:
            seg = flat[slot.offset:slot.offset + slot.length]
            if len(slot.shape) == 1:
                seg[:] = 1.0
            elif slot.name == "table":
                seg[:] = rng.standard_normal(slot.length)
            elif slot.name == "w_head" and zero_head and not spec.tied_embeddings:
                seg[:] = 0.0
            elif slot.name == "w_head" and spec.tied_embeddings:
                continue  # shares the embedding table
            else:
                seg[:] = rng.normal(0.0, std, slot.length)
        pos = 0
        for tile in store.layout.unit_tiles(unit):
            n = store.layout.elements(tile)
            if not (spec.tied_embeddings and unit == spec.head_id and tile == spec.head_id):
                store.write_tile(tile, Section.WEIGHTS, flat[pos:pos + n])
            pos += n
    return store


def new_store(spec: ModelSpec, seed: int, **kw) -> TileStore:
    return init_store(spec, TileStore.for_spec(spec), seed, **kw)
