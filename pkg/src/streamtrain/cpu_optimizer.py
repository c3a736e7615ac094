"""Host-side gradient accumulation and mixed-precision Adam.

Gradients arrive from the device as bf16 slabs and are summed into an fp32
scratch accumulator per physical tile.  Adam runs on fp32 shadows of the bf16
master weights, keeps ``m``/``v`` in fp32 and writes the weights back rounded
to bf16.  The tile's 2-byte grad section only receives the bf16 image of the
accumulated gradient.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bf16 import bf16_bits_to_f32, bf16_round, f32_to_bf16_bits
from .tile_store import GradSlabPool, Section, SlabState, StagingSlab, StoreError, TileStore


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


class GradAccumulator:
    """fp32 gradient scratch keyed by physical tile id."""

    def __init__(self, store: TileStore):
        self.store = store
        self.grads = {t: np.zeros(store.layout.elements(t), dtype=np.float32)
                      for t in store.layout.physical_tiles}

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.grads[self.store.layout.resolve(layer)]

    def add(self, layer: int, values_f32: np.ndarray) -> None:
        acc = self[layer]
        if values_f32.size != acc.size:
            raise StoreError(f"gradient for layer {layer} has {values_f32.size} elements, "
                             f"expected {acc.size}")
        np.add(acc, values_f32, out=acc)

    def zero(self, layer: int) -> None:
        self[layer].fill(0)


def split_unit(store: TileStore, unit: int, flat: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Cut a unit-ordered flat buffer into per-tile pieces."""
    out, pos = [], 0
    for tile in store.layout.unit_tiles(unit):
        n = store.layout.elements(tile)
        out.append((tile, flat[pos:pos + n]))
        pos += n
    if pos != flat.size:
        raise StoreError(f"unit {unit}: flat buffer has {flat.size} elements, tiles need {pos}")
    return out


def accumulate_grad(store: TileStore, unit: int, slab: StagingSlab, acc: GradAccumulator,
                    pool: GradSlabPool | None = None) -> None:
    """Add a slab of bf16 unit gradients into the fp32 accumulator, then free the slab."""
    if slab.layer != unit:
        raise StoreError(f"slab {slab.id} holds layer {slab.layer}, not {unit}")
    if slab.state is not SlabState.DRAINING:
        raise StoreError(f"slab {slab.id} is {slab.state.value}, expected Draining")
    grads = bf16_bits_to_f32(slab.data[:slab.filled].view(np.uint16))
    for tile, part in split_unit(store, unit, grads):
        with store.lock(tile):
            acc.add(tile, part)
            store.write_tile(tile, Section.GRADS, f32_to_bf16_bits(acc[tile]))
    if pool is not None:
        pool.release(slab)


def adam_step_arrays(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                     t: int, hyper: AdamHyper) -> np.ndarray:
    """In-place fp32 Adam on ``m``/``v``; returns the new (unrounded) theta."""
    f = np.float32
    b1, b2, lr, eps = f(hyper.beta1), f(hyper.beta2), f(hyper.lr), f(hyper.eps)
    one = f(1)
    m *= b1
    m += (one - b1) * g
    v *= b2
    v += (one - b2) * (g * g)
    bc1 = one - b1 ** t
    bc2 = one - b2 ** t
    m_hat = m / bc1
    v_hat = v / bc2
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_update(store: TileStore, layer: int, hyper: AdamHyper, grad: np.ndarray,
                step: int | None = None) -> dict:
    """Apply one Adam step to a tile and clear its gradient.

    ``step`` defaults to ``store.step + 1``.  ``grad`` is the fp32 accumulated
    gradient and is zeroed in place.
    """
    t = store.step + 1 if step is None else step
    gnorm = float(np.sqrt(np.sum(grad.astype(np.float64) ** 2)))
    with store.lock(layer):
        theta = store.weights_f32(layer)
        m = store.view(layer, Section.M)
        v = store.view(layer, Section.V)
        new = bf16_round(adam_step_arrays(theta, grad, m, v, t, hyper))
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite Adam update on layer {layer}")
        delta = new - theta
        store.write_tile(layer, Section.WEIGHTS, f32_to_bf16_bits(new))
        store.view(layer, Section.GRADS).fill(0)
        grad.fill(0)
    return {"layer": store.layout.resolve(layer),
            "grad_norm": gnorm,
            "update_norm": float(np.sqrt(np.sum(delta.astype(np.float64) ** 2))),
            "max_abs_update": float(np.max(np.abs(delta))) if delta.size else 0.0}


def scalar_adam(theta: float, grads: list[float], hyper: AdamHyper) -> float:
    """Straight-line single-parameter Adam in fp32 with bf16 weight rounding.

    Kept independent of :func:`adam_step_arrays` as a reference.
    """
    f = np.float32
    th = bf16_round(f(theta))
    m = f(0.0)
    v = f(0.0)
    for t, g in enumerate(grads, start=1):
        g = f(g)
        m = f(hyper.beta1) * m + (f(1) - f(hyper.beta1)) * g
        v = f(hyper.beta2) * v + (f(1) - f(hyper.beta2)) * (g * g)
        mh = m / (f(1) - f(hyper.beta1) ** t)
        vh = v / (f(1) - f(hyper.beta2) ** t)
        th = bf16_round(f(th - f(hyper.lr) * mh / (np.sqrt(vh) + f(hyper.eps))))
    return float(th)


class OptimizerWorker:
    """Consumes drained gradient slabs, accumulates, and updates each tile once per step.

    A tile is updated as soon as its last expected slab of the step lands.
    ``mode`` is ``"inline"`` (work done in :meth:`submit`), ``"thread"``
    (background thread) or ``"post"`` (slabs accumulate as they arrive,
    all Adam updates deferred to :meth:`finish`).
    """

    def __init__(self, store: TileStore, pool: GradSlabPool, hyper: AdamHyper,
                 expected: dict[int, int], mode: str = "inline",
                 on_accumulate: Callable[[int, StagingSlab, int, int], None] | None = None,
                 on_update: Callable[[int], None] | None = None):
        if mode not in ("inline", "thread", "post"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.store, self.pool, self.hyper, self.mode = store, pool, hyper, mode
        self.acc = GradAccumulator(store)
        self.remaining = {store.layout.resolve(k): 0 for k in expected}
        for k, n in expected.items():
            self.remaining[store.layout.resolve(k)] += n
        self.on_accumulate = on_accumulate
        self.on_update = on_update
        self.stats: list[dict] = []
        self.updates: dict[int, int] = {}
        self.error: BaseException | None = None
        self._q: queue.Queue = queue.Queue()
        self._thread = None
        if mode == "thread":
            self._thread = threading.Thread(target=self._loop, name="optimizer", daemon=True)
            self._thread.start()

    def submit(self, unit: int, slab: StagingSlab) -> None:
        if self.error is not None:
            raise self.error
        if self.mode == "thread":
            self._q.put((unit, slab))
        else:
            self._process(unit, slab)

    def _loop(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            if self.error is not None:
                continue
            try:
                self._process(*item)
            except BaseException as exc:  # surfaced to the engine in finish()
                self.error = exc

    def _process(self, unit: int, slab: StagingSlab) -> None:
        slab.advance(SlabState.DRAINING)
        t0 = time.perf_counter_ns()
        accumulate_grad(self.store, unit, slab, self.acc)
        if self.on_accumulate is not None:
            self.on_accumulate(unit, slab, t0, time.perf_counter_ns())
        self.pool.release(slab)
        tiles = {self.store.layout.resolve(t) for t in self.store.layout.unit_tiles(unit)}
        for tile in sorted(tiles):
            self.remaining[tile] -= 1
            if self.remaining[tile] == 0 and self.mode != "post":
                self._update(tile)

    def _update(self, tile: int) -> None:
        self.stats.append(adam_update(self.store, tile, self.hyper, self.acc[tile]))
        self.updates[tile] = self.updates.get(tile, 0) + 1
        if self.on_update is not None:
            self.on_update(tile)

    def abort(self) -> None:
        """Stop the worker thread without applying anything further."""
        if self._thread is not None and self._thread.is_alive():
            self.error = self.error or RuntimeError("optimizer aborted")
            self._q.put(None)
            self._thread.join(timeout=5)

    def finish(self) -> list[dict]:
        """Drain outstanding work; returns per-tile update stats sorted by tile."""
        if self._thread is not None:
            self._q.put(None)
            self._thread.join()
        if self.error is not None:
            raise self.error
        pending = [t for t, n in self.remaining.items() if n != 0]
        if pending:
            raise RuntimeError(f"tiles {pending} did not receive all gradient slabs")
        if self.mode == "post":
            for tile in sorted(self.remaining):
                self._update(tile)
        return sorted(self.stats, key=lambda s: s["layer"])


def optimizer_worker(store: TileStore, pool: GradSlabPool, hyper: AdamHyper,
                     expected: dict[int, int], mode: str = "thread", **hooks) -> OptimizerWorker:
    return OptimizerWorker(store, pool, hyper, expected, mode, **hooks)
