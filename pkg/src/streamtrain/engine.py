"""Streaming execution engine.

Runs one training step as the compute lane's plan (see :mod:`.schedule`)
against a bounded :class:`DeviceArena`.  Weights stream from the tile store
into one or two staging buffers; gradients leave through a single device
grad buffer into the host slab pool and are consumed by the optimizer worker.

Two schedulers drive the lanes:

* ``serial``: one thread of control.  H2D work runs on demand (with one-ahead
  prefetch when double buffered) and D2H work is deferred until its buffer is
  needed, so the log shows the same overlaps the threaded version produces,
  deterministically.
* ``overlapped``: H2D, D2H and optimizer workers on their own threads, with
  all cross-lane hand-offs going through buffer states guarded by one
  condition variable.

Numerics are identical in both; only record order and timing differ.
"""

from __future__ import annotations

import collections
import contextlib
import enum
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import events as ev
from . import schedule as sch
from .bf16 import bf16_bits_to_f32, f32_to_bf16_bits
from .cpu_optimizer import AdamHyper, GradAccumulator, OptimizerWorker, adam_update, split_unit
from .memory_model import (ModelSpec, activation_unit_bytes, device_budget, op_workspace_bytes,
                           workspace_bound)
from .numeric_core import (TemplatePool, bind, block_forward, block_local_backward,
                           embed_backward, embed_forward, head_loss_and_grads)
from .tile_store import GradSlabPool, Section, SlabState, StagingSlab, TileStore, pack_weights

POISON = np.uint16(0x7FC0)  # bf16 quiet NaN


class EngineError(Exception):
    pass


class InfeasibleConfig(EngineError):
    pass


class ArenaOverflow(EngineError, MemoryError):
    def __init__(self, site: str, region: str, requested: int, live: int, capacity: int):
        super().__init__(f"arena overflow at {site}: {region} needs {requested} bytes, "
                         f"{live} live of {capacity}")
        self.site = site
        self.region = region


class ProtocolViolation(EngineError):
    pass


class DeadlockError(EngineError):
    pass


# ---------------------------------------------------------------- device memory

class DeviceArena:
    """Byte accounting for transient device memory, by region.

    Every region has its own cap and the sum is capped by ``capacity``;
    ``peak`` is reset between steps, ``peak_non_anchor`` excludes the anchor
    region.
    """

    def __init__(self, capacity: int, regions: dict[str, int]):
        self.capacity = capacity
        self.caps = dict(regions)
        self.used = {r: 0 for r in regions}
        self.live = 0
        self.peak = 0
        self.peak_non_anchor = 0
        self.region_peak = {r: 0 for r in regions}
        self._lock = threading.Lock()

    def alloc(self, region: str, nbytes: int, site: str) -> None:
        with self._lock:
            if self.used[region] + nbytes > self.caps[region]:
                raise ArenaOverflow(site, region, nbytes, self.used[region], self.caps[region])
            if self.live + nbytes > self.capacity:
                raise ArenaOverflow(site, "arena", nbytes, self.live, self.capacity)
            self.used[region] += nbytes
            self.live += nbytes
            self.peak = max(self.peak, self.live)
            self.peak_non_anchor = max(self.peak_non_anchor,
                                       self.live - self.used.get("anchors", 0))
            self.region_peak[region] = max(self.region_peak[region], self.used[region])

    def free(self, region: str, nbytes: int) -> None:
        with self._lock:
            if nbytes > self.used[region]:
                raise EngineError(f"freeing {nbytes} bytes from {region} holding {self.used[region]}")
            self.used[region] -= nbytes
            self.live -= nbytes

    @contextlib.contextmanager
    def workspace(self, nbytes: int, site: str):
        self.alloc("workspace", nbytes, site)
        try:
            yield
        finally:
            self.free("workspace", nbytes)

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.live
            self.peak_non_anchor = self.live - self.used.get("anchors", 0)
            self.region_peak = dict(self.used)


class BufferState(enum.Enum):
    FREE = "Free"
    LOADING = "Loading"
    READY = "Ready"
    BOUND = "Bound"
    DRAINING = "Draining"


class DeviceBuffer:
    def __init__(self, buffer_id, elements: int):
        self.id = buffer_id
        self.data = np.full(elements, POISON, dtype=np.uint16)
        self.state = BufferState.FREE
        self.layer: int | None = None
        self.k: int | None = None
        self.epoch = 0

    @property
    def bindable(self) -> bool:
        return self.state in (BufferState.READY, BufferState.BOUND)

    def __repr__(self):
        return f"DeviceBuffer({self.id}, {self.state.value}, layer={self.layer})"


# ---------------------------------------------------------------- options & reports

@dataclass(frozen=True)
class EngineOptions:
    k_ckpt: int = 2
    k_slab: int = 12
    double_buffering: bool = True
    scheduler: str = "serial"
    strict: bool = True
    anchors_on_host: bool = False
    optimizer_mode: str | None = None  # inline / thread / post; default by scheduler
    poison: bool = True
    arena_capacity: int | None = None
    check_budget: bool = True
    wait_timeout: float = 60.0

    @property
    def n_buffers(self) -> int:
        return 2 if self.double_buffering else 1


@dataclass
class StepReport:
    step: int
    loss: float
    grad_norms: dict[int, float]
    peak_device_bytes: int = 0
    peak_non_anchor_bytes: int = 0
    anchor_count: int = 0
    recompute_count: int = 0
    event_digest: str = ""
    wall_time: float = 0.0
    optimizer: list[dict] = field(default_factory=list)
    violations: list[dict] = field(default_factory=list)

    def to_json(self, timing: bool = False) -> dict:
        d = asdict(self)
        d["grad_norms"] = {str(k): v for k, v in sorted(self.grad_norms.items())}
        if not timing:
            d.pop("wall_time")
        return d


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.tokens.shape != self.targets.shape or self.tokens.ndim != 1:
            raise ValueError("tokens and targets must be 1-D arrays of equal length")

    def __len__(self):
        return int(self.tokens.size)


def _now() -> int:
    return time.perf_counter_ns()


# ---------------------------------------------------------------- engine

class StreamingEngine:
    def __init__(self, spec: ModelSpec, store: TileStore, hyper: AdamHyper, tokens: int,
                 options: EngineOptions = EngineOptions()):
        self.spec = spec
        self.store = store
        self.hyper = hyper
        self.tokens = tokens
        self.templates = TemplatePool(spec)
        self.layout = store.layout
        if self.layout.num_layers != spec.num_layers:
            raise EngineError("store layout does not match model spec")
        self.log = ev.EventLog()
        self.violations: list[ev.Violation] = []
        self._configure(options)

    # ---- configuration
    def _configure(self, opts: EngineOptions) -> None:
        spec, N = self.spec, self.tokens
        if opts.scheduler not in ("serial", "overlapped"):
            raise EngineError(f"unknown scheduler {opts.scheduler!r}")
        if not 1 <= opts.k_ckpt <= spec.num_layers:
            raise EngineError(f"k_ckpt must lie in [1, {spec.num_layers}]")
        if opts.k_slab < 1:
            raise EngineError("k_slab must be >= 1")
        mode = opts.optimizer_mode or ("thread" if opts.scheduler == "overlapped" else "inline")
        if mode not in ("inline", "thread", "post"):
            raise EngineError(f"unknown optimizer mode {mode!r}")
        self.opts = opts
        self.optimizer_mode = mode
        self.budget = device_budget(spec, N, opts.k_ckpt, opts.double_buffering,
                                    w_max=workspace_bound(spec, N),
                                    anchors_on_host=opts.anchors_on_host)
        capacity = opts.arena_capacity
        if capacity is None:
            capacity = self.budget.peak_device_bound
        if opts.check_budget and capacity < self.budget.peak_device_bound:
            raise InfeasibleConfig(f"arena capacity {capacity} below device budget "
                                   f"{self.budget.peak_device_bound}")
        b = self.budget
        self.arena = DeviceArena(capacity, {
            "weights": b.weight_buffers, "grad": b.grad_buffer,
            "anchors": b.checkpoint_anchors, "stack": b.block_activation_stack,
            "workspace": b.workspace})
        pmax_bytes = self.layout.p_max_bytes
        self.buffers = [DeviceBuffer(i, pmax_bytes // 2) for i in range(opts.n_buffers)]
        self.grad_buf = DeviceBuffer(ev.GRAD_BUFFER, pmax_bytes // 2)
        self.arena.alloc("weights", opts.n_buffers * pmax_bytes, "weight staging buffers")
        self.arena.alloc("grad", pmax_bytes, "grad buffer")
        self.wslabs = [StagingSlab(i, pmax_bytes) for i in range(opts.n_buffers)]
        self.pool = GradSlabPool(pmax_bytes, opts.k_slab)
        self._cv = threading.Condition()
        self._row_bytes = N * activation_unit_bytes(spec)

    def set_execution_mode(self, **changes) -> None:
        """Swap schedule toggles (``double_buffering``, ``k_ckpt``, ``k_slab``, ...) between steps."""
        try:
            opts = replace(self.opts, **changes)
        except TypeError as exc:
            raise EngineError(str(exc)) from None
        self._configure(opts)

    # ---- protocol helpers
    def _violation(self, lane: str, msg: str, rule: str = "protocol") -> None:
        rec = self.log.record(lane, ev.VIOLATION, message=msg, rule=rule)
        self.violations.append(ev.Violation(rule, rec.seq, msg))
        if self.opts.strict:
            raise ProtocolViolation(msg)

    def _new_log(self) -> None:
        s = self.spec
        self.log = ev.EventLog(k_slab=self.opts.k_slab, n_buffers=self.opts.n_buffers,
                               k_ckpt=self.opts.k_ckpt, scheduler=self.opts.scheduler,
                               tokens=self.tokens, spec=s.to_dict(), step=self.store.step)
        self.violations = []

    def _template_for(self, unit: int, k: int):
        return self.templates.for_unit(unit, parity=k)

    def _poison(self, buf: DeviceBuffer) -> None:
        if self.opts.poison:
            buf.data.fill(POISON)

    # ---- H2D lane
    def _pack(self, unit: int, phase: str, buf_id: int) -> StagingSlab:
        slab = self.wslabs[buf_id]
        t0 = _now()
        n = pack_weights(self.store, unit, slab)
        self.log.record(ev.H2D, ev.PACK, unit, buf_id, phase, t0, _now(), bytes=n)
        return slab

    def _transfer(self, unit: int, phase: str, buf: DeviceBuffer, slab: StagingSlab,
                  k: int | None) -> None:
        with self._cv:
            if buf.state is not BufferState.FREE:
                self._violation(ev.H2D, f"StreamIn({unit}) into buffer {buf.id} "
                                        f"still {buf.state.value} with layer {buf.layer}")
            buf.state = BufferState.LOADING
        t0 = _now()
        buf.data.view(np.uint8)[:slab.filled] = slab.data[:slab.filled]
        t1 = _now()
        slab.advance(SlabState.DRAINING)
        slab.advance(SlabState.FREE)
        self.log.record(ev.H2D, ev.STREAM_IN, unit, buf.id, phase, t0, t1, bytes=slab.filled)
        with self._cv:
            buf.state = BufferState.READY
            buf.layer, buf.k = unit, k
            self.log.record(ev.H2D, ev.WEIGHTS_READY, unit, buf.id, phase)
            self._cv.notify_all()

    def stream_in(self, unit: int, buffer: int = 0, phase: str = "forward",
                  k: int | None = None) -> None:
        """Pack ``unit`` and copy it into staging buffer ``buffer`` (H2D lane)."""
        if unit not in self.layout.units:
            raise EngineError(f"unknown layer {unit}")
        buf = self.buffers[buffer]
        slab = self._pack(unit, phase, buf.id)
        self._transfer(unit, phase, buf, slab, k)

    # ---- compute-lane buffer hand-offs
    def _bind(self, step: sch.PlanStep, buf: DeviceBuffer):
        with self._cv:
            if not (buf.bindable and buf.layer == step.unit and buf.k == step.k):
                self._violation(ev.COMPUTE, f"Bind({step.unit}) on buffer {buf.id} "
                                            f"holding {buf.layer} ({buf.state.value})")
            buf.state = BufferState.BOUND
        self.log.record(ev.COMPUTE, ev.BIND, step.unit, buf.id, step.phase)
        return bind(self._template_for(step.unit, step.k), buf)

    def _release(self, step: sch.PlanStep, buf: DeviceBuffer) -> None:
        with self._cv:
            self._poison(buf)
            buf.epoch += 1
            buf.state = BufferState.FREE
            buf.layer = buf.k = None
            self.log.record(ev.COMPUTE, ev.RELEASE, step.unit, buf.id, step.phase)
            self.log.record(ev.COMPUTE, ev.BUFFER_FREE, step.unit, buf.id, step.phase)
            self._cv.notify_all()

    def _write_grads(self, step: sch.PlanStep, flat: np.ndarray, wbuf: DeviceBuffer | None):
        g = self.grad_buf
        bits = f32_to_bf16_bits(flat)
        g.data[:bits.size] = bits
        with self._cv:
            g.state = BufferState.DRAINING
            g.layer = step.unit
            g.k = bits.size
            if wbuf is not None:
                wbuf.state = BufferState.DRAINING
            self.log.record(ev.COMPUTE, ev.BACKWARD_DONE, step.unit, ev.GRAD_BUFFER, step.phase)
            self._pending_bwd[(step.unit, step.phase)] = wbuf
        self._lanes.offload(step, wbuf)

    # ---- D2H lane
    def _offload(self, unit: int, phase: str, wbuf: DeviceBuffer | None) -> None:
        if (unit, phase) not in self._pending_bwd:
            self._violation(ev.D2H, f"Offload({unit}) before BackwardDone")
            return
        del self._pending_bwd[(unit, phase)]
        g = self.grad_buf
        t0 = _now()
        try:
            slab = self.pool.acquire(timeout=self.opts.wait_timeout)
        except TimeoutError as exc:
            raise DeadlockError(f"Offload({unit}): {exc}") from None
        self.log.record(ev.D2H, ev.SLAB_ACQUIRE, unit, None, phase, slab=slab.id)
        n = g.k * 2
        slab.data[:n] = g.data.view(np.uint8)[:n]
        slab.layer, slab.filled = unit, n
        slab.advance(SlabState.IN_FLIGHT)
        self.log.record(ev.D2H, ev.OFFLOAD, unit, ev.GRAD_BUFFER, phase, t0, _now(),
                        bytes=n, slab=slab.id)
        with self._cv:
            g.state = BufferState.FREE
            g.layer = g.k = None
            self.log.record(ev.D2H, ev.BUFFER_FREE, unit, ev.GRAD_BUFFER, phase)
            if wbuf is not None:
                self._poison(wbuf)
                wbuf.epoch += 1
                wbuf.state = BufferState.FREE
                wbuf.layer = wbuf.k = None
                self.log.record(ev.D2H, ev.BUFFER_FREE, unit, wbuf.id, phase)
            self._cv.notify_all()
        self._optimizer.submit(unit, slab)

    def offload_grads(self, unit: int, phase: str = "backward") -> None:
        """Evacuate the grad buffer for ``unit`` (D2H lane); needs its BackwardDone."""
        wbuf = self._pending_bwd.get((unit, phase))
        self._offload(unit, phase, wbuf)

    # ---- optimizer hooks
    def _on_accumulate(self, unit: int, slab: StagingSlab, t0: int, t1: int) -> None:
        self.log.record(ev.HOST, ev.ACCUMULATE, unit, None, None, t0, t1, slab=slab.id)
        self.log.record(ev.HOST, ev.SLAB_RELEASE, unit, None, None, slab=slab.id)

    def _on_update(self, tile: int) -> None:
        self.log.record(ev.HOST, ev.ADAM_UPDATE, tile)

    def _expected_slabs(self) -> dict[int, int]:
        exp: dict[int, int] = collections.Counter()
        for unit in self.layout.units:
            for tile in self.layout.unit_tiles(unit):
                exp[self.layout.resolve(tile)] += 1
        return dict(exp)

    # ---- step
    def train_step(self, batch: Batch) -> StepReport:
        if len(batch) != self.tokens:
            raise EngineError(f"engine sized for {self.tokens} tokens, batch has {len(batch)}")
        if any(b.state is not BufferState.FREE for b in self.buffers + [self.grad_buf]):
            raise EngineError("device buffers not free at step start")
        self._new_log()
        self.arena.reset_peak()
        self._pending_bwd: dict = {}
        plan = sch.build_plan(self.spec.num_layers, self.opts.k_ckpt)
        self._optimizer = OptimizerWorker(
            self.store, self.pool, self.hyper, self._expected_slabs(), self.optimizer_mode,
            on_accumulate=self._on_accumulate, on_update=self._on_update)
        lanes_cls = SerialLanes if self.opts.scheduler == "serial" else OverlappedLanes
        self._lanes = lanes_cls(self, plan)
        t0 = time.perf_counter()
        try:
            self._lanes.start()
            loss = self._run_plan(plan, batch)
            self._lanes.finish()
            stats = self._optimizer.finish()
        except BaseException:
            self._lanes.abort()
            self._optimizer.abort()
            self._configure(self.opts)  # fresh buffers and slab pool for the next attempt
            raise
        if not self.pool.all_free:
            raise EngineError("gradient slabs outstanding at step end")
        self.store.step += 1
        return StepReport(
            step=self.store.step, loss=loss,
            grad_norms={s["layer"]: s["grad_norm"] for s in stats},
            peak_device_bytes=self.arena.peak,
            peak_non_anchor_bytes=self.arena.peak_non_anchor,
            anchor_count=len(self.log.of(ev.CKPT_WRITE)),
            recompute_count=len(self.log.of(ev.COMPUTE_OP, phase="recompute")),
            event_digest=self.log.digest(), wall_time=time.perf_counter() - t0,
            optimizer=stats, violations=[v.to_json() for v in self.violations])

    # ---- compute lane
    def _run_plan(self, plan: list[sch.PlanStep], batch: Batch) -> float:
        spec, arena, log, N = self.spec, self.arena, self.log, self.tokens
        L, K = spec.num_layers, self.opts.k_ckpt
        row = self._row_bytes
        anchors: dict[int, np.ndarray] = {}
        stack: list[tuple[str, np.ndarray]] = []
        anchor_region = None if self.opts.anchors_on_host else "anchors"
        ids, targets = batch.tokens, batch.targets
        loss = float("nan")

        def push(slot: str, arr: np.ndarray, layer=None):
            arena.alloc("stack", row, f"push {slot}")
            log.record(ev.COMPUTE, ev.STACK_PUSH, layer, len(stack), None, slot=slot)
            stack.append((slot, arr))

        def pop():
            slot, _ = stack.pop()
            log.record(ev.COMPUTE, ev.STACK_POP, None, len(stack), None, slot=slot)
            arena.free("stack", row)

        def ckpt_write(i: int, h: np.ndarray):
            if anchor_region:
                arena.alloc(anchor_region, row, f"checkpoint h{i}")
            anchors[i] = h.copy()
            log.record(ev.COMPUTE, ev.CKPT_WRITE, i, None, "forward")

        def hidden_input(i: int, block_start: int) -> np.ndarray:
            """h_{i-1} for layer i: the anchor at a block start, otherwise the stack top."""
            if i - 1 == block_start:
                return anchors[block_start]
            slot, arr = stack[-1]
            if slot != f"h{i - 1}":
                raise EngineError(f"stack top {slot} is not h{i - 1}")
            return arr

        def compute(step, fn, ws_op):
            with arena.workspace(op_workspace_bytes(spec, N, ws_op), f"{step.op} {step.unit}"):
                t0 = _now()
                out = fn()
                kind = ev.LOCAL_BACKWARD if step.op in (sch.BWD, sch.EMBED_BWD) else ev.COMPUTE_OP
                log.record(ev.COMPUTE, kind, step.unit, None, step.phase, t0, _now())
            return out

        for step in plan:
            op = step.op
            if op == sch.EMBED_FWD:
                buf = self._lanes.weights(step)
                bound = self._bind(step, buf)
                self._lanes.prefetch(step)
                h0 = compute(step, lambda: embed_forward(bound, ids), "embed_fwd")
                self._release(step, buf)
                ckpt_write(0, h0)
            elif op == sch.FWD:
                i = step.unit
                buf = self._lanes.weights(step)
                bound = self._bind(step, buf)
                self._lanes.prefetch(step)
                x = hidden_input(i, (i - 1) // K * K)
                h = compute(step, lambda: block_forward(bound, x, i), "block_fwd")
                self._release(step, buf)
                push(f"h{i}", h, i)
                if i % K == 0 and i < L:
                    ckpt_write(i, h)
                    while stack:
                        pop()
            elif op == sch.HEAD:
                buf = self._lanes.weights(step)
                bound = self._bind(step, buf)
                self._lanes.prefetch(step)
                h_L = hidden_input(L + 1, -1)
                loss, g, flat = compute(
                    step, lambda: head_loss_and_grads(bound, h_L, targets, step.unit), "head")
                while stack:
                    pop()
                push("g", g)
                self._lanes.grad_buffer()
                self._write_grads(step, flat, buf)
            elif op == sch.CKPT_LOAD:
                start, _ = sch.block_bounds(L, K, step.unit)
                if start not in anchors:
                    raise EngineError(f"missing checkpoint h{start}")
                log.record(ev.COMPUTE, ev.CKPT_LOAD, start, None, "backward")
            elif op == sch.RECOMPUTE_BLOCK:
                log.record(ev.COMPUTE, ev.RECOMPUTE_BLOCK, step.unit, None, "recompute")
            elif op == sch.RECOMPUTE:
                i = step.unit
                start = (i - 1) // K * K
                buf = self._lanes.weights(step)
                bound = self._bind(step, buf)
                self._lanes.prefetch(step)
                x = hidden_input(i, start)
                h = compute(step, lambda: block_forward(bound, x, i), "block_fwd")
                self._release(step, buf)
                push(f"h{i}", h, i)
            elif op == sch.BWD:
                i = step.unit
                start = (i - 1) // K * K
                buf = self._lanes.weights(step)
                bound = self._bind(step, buf)
                self._lanes.prefetch(step)
                x = hidden_input(i, start)
                slot, g = stack[0]
                g_in, flat = compute(step, lambda: block_local_backward(bound, x, g, i),
                                     "block_bwd")
                stack[0] = (slot, g_in)
                self._lanes.grad_buffer()
                self._write_grads(step, flat, buf)
                if i - 1 > start:
                    pop()
            elif op == sch.CKPT_FREE:
                start, _ = sch.block_bounds(L, K, step.unit)
                del anchors[start]
                if anchor_region:
                    arena.free(anchor_region, row)
                log.record(ev.COMPUTE, ev.CKPT_FREE, start, None, "backward")
            elif op == sch.EMBED_BWD:
                _, g = stack[0]
                tmpl = self.templates.for_unit(0)
                flat = compute(step, lambda: embed_backward(tmpl, ids, g), "embed_bwd")
                pop()
                self._lanes.grad_buffer()
                self._write_grads(step, flat, None)
            else:
                raise EngineError(f"unknown plan op {op}")
        if stack or anchors:
            raise EngineError("activation state left on device after the step")
        return loss


# ---------------------------------------------------------------- lanes

class SerialLanes:
    """Single thread of control; H2D on demand, D2H deferred until its buffer is needed."""

    def __init__(self, engine: StreamingEngine, plan: list[sch.PlanStep]):
        self.e = engine
        self.streams = sch.stream_order(plan)
        self.filled: set[int] = set()
        self.pending: collections.deque = collections.deque()

    def start(self):
        pass

    def _buffer(self, k: int) -> DeviceBuffer:
        return self.e.buffers[k % len(self.e.buffers)]

    def _fill(self, step: sch.PlanStep) -> None:
        buf = self._buffer(step.k)
        slab = self.e._pack(step.unit, step.phase, buf.id)
        while buf.state is not BufferState.FREE and self.pending:
            self._flush_one()
        self.e._transfer(step.unit, step.phase, buf, slab, step.k)
        self.filled.add(step.k)

    def weights(self, step: sch.PlanStep) -> DeviceBuffer:
        if step.k not in self.filled:
            self._fill(step)
        return self._buffer(step.k)

    def prefetch(self, step: sch.PlanStep) -> None:
        nxt = step.k + 1
        if len(self.e.buffers) < 2 or nxt >= len(self.streams) or nxt in self.filled:
            return
        if self._buffer(nxt).state is BufferState.FREE:
            self._fill(self.streams[nxt])

    def grad_buffer(self) -> None:
        while self.e.grad_buf.state is not BufferState.FREE and self.pending:
            self._flush_one()

    def offload(self, step: sch.PlanStep, wbuf) -> None:
        self.pending.append((step.unit, step.phase, wbuf))

    def _flush_one(self):
        self.e._offload(*self.pending.popleft())

    def finish(self):
        while self.pending:
            self._flush_one()

    def abort(self):
        self.pending.clear()


class OverlappedLanes:
    """H2D and D2H workers on threads; the caller's thread is the compute lane."""

    def __init__(self, engine: StreamingEngine, plan: list[sch.PlanStep]):
        self.e = engine
        self.streams = sch.stream_order(plan)
        self.filled: set[int] = set()
        self.d2h_q: collections.deque = collections.deque()
        self.error: BaseException | None = None
        self.stop = False
        self.h2d = threading.Thread(target=self._guard(self._h2d_loop), name="h2d", daemon=True)
        self.d2h = threading.Thread(target=self._guard(self._d2h_loop), name="d2h", daemon=True)

    def _guard(self, fn):
        def run():
            try:
                fn()
            except BaseException as exc:
                with self.e._cv:
                    if self.error is None:
                        self.error = exc
                    self.stop = True
                    self.e._cv.notify_all()
        return run

    def _wait(self, pred, what: str):
        cv = self.e._cv
        ok = cv.wait_for(lambda: pred() or self.stop, timeout=self.e.opts.wait_timeout)
        if self.error is not None:
            raise self.error
        if self.stop and not pred():
            raise EngineError(f"lanes stopped while waiting for {what}")
        if not ok:
            raise DeadlockError(f"timed out waiting for {what}")

    def start(self):
        self.h2d.start()
        self.d2h.start()

    def _h2d_loop(self):
        nbuf = len(self.e.buffers)
        for step in self.streams:
            buf = self.e.buffers[step.k % nbuf]
            slab = self.e._pack(step.unit, step.phase, buf.id)
            with self.e._cv:
                self._wait(lambda: buf.state is BufferState.FREE, f"BufferFree({buf.id})")
            if self.stop:
                return
            self.e._transfer(step.unit, step.phase, buf, slab, step.k)
            with self.e._cv:
                self.filled.add(step.k)
                self.e._cv.notify_all()

    def _d2h_loop(self):
        cv = self.e._cv
        while True:
            with cv:
                self._wait(lambda: bool(self.d2h_q), "offload request")
                item = self.d2h_q.popleft()
            if item is None:
                return
            self.e._offload(*item)

    def weights(self, step: sch.PlanStep) -> DeviceBuffer:
        with self.e._cv:
            self._wait(lambda: step.k in self.filled, f"WeightsReady({step.unit})")
        return self.e.buffers[step.k % len(self.e.buffers)]

    def prefetch(self, step):
        pass

    def grad_buffer(self) -> None:
        g = self.e.grad_buf
        with self.e._cv:
            self._wait(lambda: g.state is BufferState.FREE, "BufferFree(G)")

    def offload(self, step: sch.PlanStep, wbuf) -> None:
        with self.e._cv:
            self.d2h_q.append((step.unit, step.phase, wbuf))
            self.e._cv.notify_all()

    def finish(self):
        with self.e._cv:
            self.d2h_q.append(None)
            self.e._cv.notify_all()
        self.h2d.join()
        self.d2h.join()
        if self.error is not None:
            raise self.error

    def abort(self):
        with self.e._cv:
            self.stop = True
            self.d2h_q.append(None)
            self.e._cv.notify_all()
        self.h2d.join(timeout=5)
        self.d2h.join(timeout=5)


# ---------------------------------------------------------------- resident baseline

def _unit_flat(store: TileStore, unit: int) -> np.ndarray:
    parts = [store.view(t, Section.WEIGHTS) for t in store.layout.unit_tiles(unit)]
    return np.concatenate(parts)


def reference_step(spec: ModelSpec, store: TileStore, batch: Batch,
                   hyper: AdamHyper) -> tuple[StepReport, TileStore]:
    """Fully resident forward/backward + Adam on a copy of ``store``.

    No streaming and no recomputation: every block's input is kept, every
    tile's weights are bound straight from the store.  Gradients take the
    same bf16 round trip and fp32 accumulation order as the streamed path.
    """
    store = store.copy()
    pool = TemplatePool(spec)
    L = spec.num_layers
    bound = {u: bind(pool.for_unit(u), _unit_flat(store, u)) for u in store.layout.units}
    ids, targets = batch.tokens, batch.targets

    hs = [embed_forward(bound[0], ids)]
    for i in spec.block_ids:
        hs.append(block_forward(bound[i], hs[-1], i))
    loss, g, head_flat = head_loss_and_grads(bound[spec.head_id], hs[L], targets, spec.head_id)

    unit_grads = [(spec.head_id, head_flat)]
    for i in range(L, 0, -1):
        g, flat = block_local_backward(bound[i], hs[i - 1], g, i)
        unit_grads.append((i, flat))
    unit_grads.append((0, embed_backward(pool.for_unit(0), ids, g)))

    acc = GradAccumulator(store)
    for unit, flat in unit_grads:
        for tile, part in split_unit(store, unit, bf16_bits_to_f32(f32_to_bf16_bits(flat))):
            acc.add(tile, part)
    stats = [adam_update(store, t, hyper, acc[t]) for t in store.layout.physical_tiles]
    store.step += 1
    report = StepReport(step=store.step, loss=loss,
                        grad_norms={s["layer"]: s["grad_norm"] for s in stats},
                        anchor_count=0, recompute_count=0, optimizer=stats)
    return report, store
