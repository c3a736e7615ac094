"""Discrete-event model of the three-lane streaming schedule.

Each lane (H2D, Compute, D2H, Host) runs a fixed program; cross-lane
dependencies mirror the engine's event protocol:

* a weight transfer into buffer ``k % n_buffers`` waits for the BufferFree
  of stream ``k - n_buffers``;
* a compute step waits for its WeightsReady, and a gradient-producing step
  also waits for the previous offload to free the grad buffer;
* offload ``j`` waits for its BackwardDone and for gradient slab
  ``j - k_slab`` to be released by the host accumulator.

With program order fixed, every start time is a max over earlier end times,
so the model is monotone in every duration and the number of buffers/slabs.
Time is integer nanoseconds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import events as ev
from . import schedule as sch
from .memory_model import (HardwareProfile, ModelSpec, block_forward_flops, head_forward_flops,
                           unit_param_counts)
from .numeric_core import TemplatePool

DEFAULT_LATENCY_NS = 10_000

COMPUTE_KINDS = (sch.EMBED_FWD, sch.FWD, sch.HEAD, sch.RECOMPUTE, sch.BWD, sch.EMBED_BWD)
TRANSFER_KINDS = ("pack", "h2d", "d2h", "accum")
LANE_PRIORITY = {ev.H2D: 0, ev.COMPUTE: 1, ev.D2H: 2, ev.HOST: 3}


class SimulationError(Exception):
    pass


class DeadlockError(SimulationError):
    def __init__(self, message: str, blocked: list[dict]):
        super().__init__(message)
        self.blocked = blocked


class CalibrationError(SimulationError):
    pass


def _key(kind: str, unit: int) -> str:
    return f"{kind}:{unit}"


def _units(num_layers: int) -> list[int]:
    return [0, *range(1, num_layers + 1), num_layers + 2]


# ---------------------------------------------------------------- workload

@dataclass
class Workload:
    """Everything the simulator needs about one training step.

    ``durations`` holds explicit integer-ns durations keyed ``"kind:unit"``
    (kinds: the compute ops plus ``pack``, ``h2d``, ``d2h``, ``accum``).  Any
    entry missing there is derived from bytes/FLOPs and the hardware profile.
    """
    num_layers: int
    k_ckpt: int = 1
    n_buffers: int = 2
    k_slab: int = 12
    variant: str = "alg1"
    h2d_bytes: dict[int, int] = field(default_factory=dict)
    d2h_bytes: dict[int, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    transfers_per_unit: dict[int, int] = field(default_factory=dict)
    latency_ns: int = 0
    durations: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 1 <= self.k_ckpt <= self.num_layers:
            raise ValueError(f"k_ckpt must lie in [1, {self.num_layers}]")
        if self.n_buffers not in (1, 2):
            raise ValueError("n_buffers must be 1 or 2")
        if self.k_slab < 1:
            raise ValueError("k_slab must be >= 1")
        if self.latency_ns < 0:
            raise ValueError("latency must be non-negative")
        for k, v in self.durations.items():
            if v < 0:
                raise ValueError(f"negative duration for {k}")
        for table in (self.h2d_bytes, self.d2h_bytes, self.flops):
            if any(v < 0 for v in table.values()):
                raise ValueError("bytes and FLOPs must be non-negative")

    @property
    def units(self) -> list[int]:
        return _units(self.num_layers)

    @property
    def double_buffering(self) -> bool:
        return self.n_buffers == 2

    def with_(self, **changes) -> "Workload":
        return replace(self, **changes)

    # ---- constructors
    @classmethod
    def from_spec(cls, spec: ModelSpec, tokens: int, k_ckpt: int = 1, n_buffers: int = 2,
                  k_slab: int = 12, fragmented: bool = False,
                  latency_ns: int = DEFAULT_LATENCY_NS, variant: str = "alg1") -> "Workload":
        """Bytes from the tile layout, FLOPs from the accounting model.

        ``fragmented`` models one transfer per sub-tensor instead of one flat
        transfer per unit, each paying the fixed latency.
        """
        L = spec.num_layers
        counts = unit_param_counts(spec)
        h2d = {u: counts[u] * spec.weight_bytes for u in _units(L)}
        d2h = {u: counts[u] * spec.grad_bytes for u in _units(L)}
        F = block_forward_flops(spec, tokens)
        Hf = head_forward_flops(spec, tokens)
        flops = {}
        for i in range(1, L + 1):
            flops[_key(sch.FWD, i)] = F
            flops[_key(sch.RECOMPUTE, i)] = F
            flops[_key(sch.BWD, i)] = 2 * F
        flops[_key(sch.HEAD, L + 2)] = 3 * Hf
        flops[_key(sch.EMBED_FWD, 0)] = 0
        flops[_key(sch.EMBED_BWD, 0)] = 0
        if fragmented:
            pool = TemplatePool(spec)
            frags = {u: len(pool.for_unit(u).slots) for u in _units(L)}
        else:
            frags = {u: 1 for u in _units(L)}
        return cls(L, k_ckpt, n_buffers, k_slab, variant, h2d, d2h, flops, frags, latency_ns)

    @classmethod
    def uniform(cls, num_layers: int, compute_ns: int, transfer_ns: int, *, k_ckpt: int = 1,
                n_buffers: int = 2, k_slab: int = 12, backward_factor: int = 1,
                offload_ns: int | None = None, pack_ns: int = 0, accum_ns: int = 0,
                edge_compute_ns: int = 0, edge_transfer_ns: int = 0,
                variant: str = "alg1") -> "Workload":
        """Identical blocks; embedding and head get the ``edge_*`` durations."""
        d: dict[str, int] = {}
        off = transfer_ns if offload_ns is None else offload_ns
        L = num_layers
        for u in _units(L):
            block = 1 <= u <= L
            d[_key("h2d", u)] = transfer_ns if block else edge_transfer_ns
            d[_key("d2h", u)] = off if block else edge_transfer_ns
            d[_key("pack", u)] = pack_ns
            d[_key("accum", u)] = accum_ns
        for i in range(1, L + 1):
            d[_key(sch.FWD, i)] = compute_ns
            d[_key(sch.RECOMPUTE, i)] = compute_ns
            d[_key(sch.BWD, i)] = backward_factor * compute_ns
        d[_key(sch.EMBED_FWD, 0)] = edge_compute_ns
        d[_key(sch.EMBED_BWD, 0)] = edge_compute_ns
        d[_key(sch.HEAD, L + 2)] = edge_compute_ns
        return cls(L, k_ckpt, n_buffers, k_slab, variant, durations=d)

    # ---- duration resolution
    def duration(self, kind: str, unit: int, profile: HardwareProfile | None) -> int:
        key = _key(kind, unit)
        if key in self.durations:
            return int(self.durations[key])
        if profile is None:
            raise SimulationError(f"no duration for {key} and no hardware profile given")
        if kind in COMPUTE_KINDS:
            return _ns(self.flops.get(key, 0), profile.compute_rate)
        if kind == "h2d":
            return (self.transfers_per_unit.get(unit, 1) * self.latency_ns
                    + _ns(self.h2d_bytes.get(unit, 0), profile.h2d_bandwidth))
        if kind == "d2h":
            return (self.transfers_per_unit.get(unit, 1) * self.latency_ns
                    + _ns(self.d2h_bytes.get(unit, 0), profile.d2h_bandwidth))
        if kind == "pack":
            return _ns(self.h2d_bytes.get(unit, 0), profile.host_pack_rate)
        if kind == "accum":
            return _ns(self.d2h_bytes.get(unit, 0), profile.host_pack_rate)
        raise SimulationError(f"unknown duration kind {kind!r}")

    def required_keys(self) -> list[str]:
        """Duration keys the plan touches."""
        keys = [_key(kind, u) for u in self.units for kind in TRANSFER_KINDS]
        plan = sch.build_plan(self.num_layers, self.k_ckpt, self.variant)
        for s in plan:
            if s.op in COMPUTE_KINDS and _key(s.op, s.unit) not in keys:
                keys.append(_key(s.op, s.unit))
        return keys

    def resolved(self, profile: HardwareProfile | None) -> dict[str, int]:
        """Every duration the plan can ask for, as explicit integers."""
        out = {}
        for key in self.required_keys():
            kind, unit = key.split(":")
            out[key] = self.duration(kind, int(unit), profile)
        return out

    def total_flops(self, plan: list[sch.PlanStep] | None = None) -> int:
        plan = plan or sch.build_plan(self.num_layers, self.k_ckpt, self.variant)
        return sum(self.flops.get(_key(s.op, s.unit), 0) for s in plan if s.op in COMPUTE_KINDS)

    def to_json(self) -> dict:
        return {"num_layers": self.num_layers, "k_ckpt": self.k_ckpt,
                "n_buffers": self.n_buffers, "k_slab": self.k_slab, "variant": self.variant,
                "h2d_bytes": {str(k): v for k, v in self.h2d_bytes.items()},
                "d2h_bytes": {str(k): v for k, v in self.d2h_bytes.items()},
                "flops": dict(self.flops),
                "transfers_per_unit": {str(k): v for k, v in self.transfers_per_unit.items()},
                "latency_ns": self.latency_ns, "durations": dict(self.durations)}


def _ns(amount: float, rate: float) -> int:
    return int(math.ceil(amount * 1e9 / rate)) if amount else 0


# ---------------------------------------------------------------- timeline

@dataclass(frozen=True)
class Interval:
    lane: str
    start: int
    end: int
    label: str
    layer: int
    k: int | None = None
    phase: str | None = None

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass
class Timeline:
    intervals: dict[str, list[Interval]]
    markers: list[tuple[int, str, int]]
    records: list[dict]
    header: dict

    @property
    def step_time(self) -> int:
        ends = [iv.end for lane in self.intervals.values() for iv in lane]
        return max(ends, default=0)

    def busy(self, lane: str) -> int:
        return sum(iv.duration for iv in self.intervals.get(lane, []))

    @property
    def busy_fraction(self) -> dict[str, float]:
        T = self.step_time
        return {lane: (self.busy(lane) / T if T else 0.0) for lane in ev.LANES}

    @property
    def bubbles(self) -> list[Interval]:
        """Idle gaps on the compute lane, labelled with the op that ended them."""
        out, t = [], 0
        for iv in self.intervals[ev.COMPUTE]:
            if iv.start > t:
                out.append(Interval(ev.COMPUTE, t, iv.start, "idle", iv.layer, iv.k, iv.phase))
            t = max(t, iv.end)
        return out

    def compute_intervals(self, phase: str | None = None) -> list[Interval]:
        return [iv for iv in self.intervals[ev.COMPUTE] if phase is None or iv.phase == phase]

    def to_json(self) -> dict:
        return {
            "step_time_ns": self.step_time,
            "busy_fraction": self.busy_fraction,
            "lanes": {lane: [[iv.start, iv.end, iv.label, iv.layer] for iv in ivs]
                      for lane, ivs in self.intervals.items()},
            "bubbles": [[b.start, b.end, b.layer] for b in self.bubbles],
            "markers": [list(m) for m in self.markers],
            "header": self.header,
        }

    def gantt_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lane", "start_ns", "end_ns", "label", "layer"])
        rows = [(iv.start, LANE_PRIORITY[iv.lane], iv) for ivs in self.intervals.values()
                for iv in ivs]
        for _, _, iv in sorted(rows, key=lambda r: (r[0], r[1])):
            w.writerow([iv.lane, iv.start, iv.end, iv.label, iv.layer])
        return buf.getvalue()

    def to_event_log(self) -> ev.EventLog:
        log = ev.EventLog(**self.header)
        for r in self.records:
            log.record(r["lane"], r["kind"], r.get("layer"), r.get("buffer"), r.get("phase"),
                       r.get("t0_ns"), r.get("t1_ns"), **r.get("info", {}))
        return log


# ---------------------------------------------------------------- simulation

@dataclass
class _Op:
    id: int
    lane: str
    kind: str                      # pack / h2d / a plan op / d2h / accum / marker kind
    unit: int | None
    duration: int
    deps: list[int]
    k: int | None = None
    phase: str | None = None
    grad: int | None = None        # index among gradient-producing steps
    buffer: int | None = None
    releases_weights: bool = False
    marker: bool = False


def _programs(w: Workload, plan: list[sch.PlanStep], d: dict[str, int]):
    L, K, nbuf = w.num_layers, w.k_ckpt, w.n_buffers
    streams = sch.stream_order(plan)
    if [s.k for s in streams] != list(range(len(streams))):
        streams = sorted(streams, key=lambda s: s.k)
    ops: list[_Op] = []

    def new(lane, kind, unit, dur, deps=(), **kw) -> _Op:
        op = _Op(len(ops), lane, kind, unit, dur, list(deps), **kw)
        ops.append(op)
        return op

    h2d, compute, d2h, host = [], [], [], []
    xfer_of: dict[int, _Op] = {}
    for s in streams:
        buf = s.k % nbuf
        h2d.append(new(ev.H2D, "pack", s.unit, d[_key("pack", s.unit)], k=s.k, phase=s.phase,
                       buffer=buf))
        xfer = new(ev.H2D, "h2d", s.unit, d[_key("h2d", s.unit)], k=s.k, phase=s.phase,
                   buffer=buf)
        h2d.append(xfer)
        xfer_of[s.k] = xfer

    grad_steps = []
    compute_of: dict[int, _Op] = {}
    for s in plan:
        if s.op in COMPUTE_KINDS:
            deps = [xfer_of[s.k].id] if s.k is not None else []
            g = None
            if s.op in sch.GRAD_OPS:
                g = len(grad_steps)
                grad_steps.append(s)
            op = new(ev.COMPUTE, s.op, s.unit, d[_key(s.op, s.unit)], deps, k=s.k,
                     phase=s.phase, grad=g, buffer=None if s.k is None else s.k % nbuf,
                     releases_weights=s.op in sch.COMPUTE_RELEASED)
            compute.append(op)
            if s.k is not None:
                compute_of[s.k] = op
            if s.op == sch.EMBED_FWD:
                compute.append(new(ev.COMPUTE, ev.CKPT_WRITE, 0, 0, phase="forward", marker=True))
            elif s.op == sch.FWD and s.unit % K == 0 and s.unit < L:
                compute.append(new(ev.COMPUTE, ev.CKPT_WRITE, s.unit, 0, phase="forward",
                                   marker=True))
        else:
            kind = {sch.CKPT_LOAD: ev.CKPT_LOAD, sch.RECOMPUTE_BLOCK: ev.RECOMPUTE_BLOCK,
                    sch.CKPT_FREE: ev.CKPT_FREE}[s.op]
            layer = s.unit if s.op == sch.RECOMPUTE_BLOCK else sch.block_bounds(L, K, s.unit)[0]
            compute.append(new(ev.COMPUTE, kind, layer, 0, phase=s.phase, marker=True))

    grad_compute = [op for op in compute if op.grad is not None]
    offloads = []
    for g, cop in enumerate(grad_compute):
        off = new(ev.D2H, "d2h", cop.unit, d[_key("d2h", cop.unit)], [cop.id], k=cop.k,
                  phase=cop.phase, grad=g, buffer=cop.buffer)
        offloads.append(off)
        d2h.append(off)
        acc = new(ev.HOST, "accum", cop.unit, d[_key("accum", cop.unit)], [off.id], grad=g,
                  phase=cop.phase)
        host.append(acc)
    for g, off in enumerate(offloads):
        if g >= w.k_slab:
            off.deps.append(host[g - w.k_slab].id)        # slab back-pressure
    for g, cop in enumerate(grad_compute):
        if g > 0:
            cop.deps.append(offloads[g - 1].id)          # single grad buffer

    # buffer reuse: stream k waits for the BufferFree of stream k - nbuf
    offload_of_k = {off.k: off for off in offloads if off.k is not None}
    for s in streams:
        prev = s.k - nbuf
        if prev < 0:
            continue
        if prev not in compute_of:
            raise SimulationError(f"stream {prev} has no compute step in the plan")
        holder = compute_of[prev]
        freer = holder if holder.releases_weights else offload_of_k[prev]
        xfer_of[s.k].deps.append(freer.id)
    return ops, {ev.H2D: h2d, ev.COMPUTE: compute, ev.D2H: d2h, ev.HOST: host}


def simulate_step(workload: Workload, profile: HardwareProfile | None = None, *,
                  mode: str = "pipelined", plan: list[sch.PlanStep] | None = None) -> Timeline:
    """Run the lane programs to completion.

    ``mode="serial"`` additionally chains every op after the previously
    executed one, modelling a single thread of control.
    """
    if mode not in ("pipelined", "serial"):
        raise ValueError(f"unknown mode {mode!r}")
    w = workload
    plan = plan or sch.build_plan(w.num_layers, w.k_ckpt, w.variant)
    d = w.resolved(profile)
    ops, lanes = _programs(w, plan, d)
    end: dict[int, int] = {}
    pos = {lane: 0 for lane in lanes}
    lane_free = {lane: 0 for lane in lanes}
    last_end = 0
    intervals: dict[str, list[Interval]] = {lane: [] for lane in ev.LANES}
    markers: list[tuple[int, str, int]] = []
    records: list[dict] = []
    slab_of: dict[int, int] = {}
    header = {"source": "pipeline_sim", "num_layers": w.num_layers, "k_ckpt": w.k_ckpt,
              "n_buffers": w.n_buffers, "k_slab": w.k_slab, "variant": w.variant,
              "mode": mode, "profile": getattr(profile, "name", None)}

    def rec(lane, kind, layer=None, buffer=None, phase=None, t0=None, t1=None, **info):
        r = {"lane": lane, "kind": kind, "layer": layer, "buffer": buffer, "phase": phase}
        if t0 is not None:
            r["t0_ns"], r["t1_ns"] = t0, t1
        if info:
            r["info"] = info
        records.append(r)

    total = len(ops)
    while len(end) < total:
        best = None
        for lane, prog in lanes.items():
            if pos[lane] >= len(prog):
                continue
            op = prog[pos[lane]]
            if any(dep not in end for dep in op.deps):
                continue
            start = max([lane_free[lane]] + [end[dep] for dep in op.deps])
            if mode == "serial":
                start = max(start, last_end)
            key = (start, LANE_PRIORITY[lane], op.unit if op.unit is not None else -1)
            if best is None or key < best[0]:
                best = (key, lane, op, start)
        if best is None:
            blocked = []
            for lane, prog in lanes.items():
                if pos[lane] < len(prog):
                    op = prog[pos[lane]]
                    waits = [ops[dep] for dep in op.deps if dep not in end]
                    blocked.append({"lane": lane, "op": op.kind, "layer": op.unit,
                                    "waiting_for": [(x.lane, x.kind, x.unit) for x in waits]})
            desc = "; ".join(f"{b['lane']} {b['op']}({b['layer']}) waits on {b['waiting_for']}"
                             for b in blocked)
            raise DeadlockError(f"simulation deadlock: {desc}", blocked)
        _, lane, op, t0 = best
        t1 = t0 + op.duration
        end[op.id] = t1
        pos[lane] += 1
        lane_free[lane] = t1
        last_end = max(last_end, t1)
        _emit(op, t0, t1, lane, intervals, markers, rec, slab_of, w.k_slab)
    return Timeline(intervals, markers, records, header)


_LABEL = {sch.EMBED_FWD: "E", sch.FWD: "F", sch.HEAD: "H", sch.RECOMPUTE: "R",
          sch.BWD: "B", sch.EMBED_BWD: "EB", "pack": "P", "h2d": "W", "d2h": "G",
          "accum": "A"}


def _emit(op: _Op, t0, t1, lane, intervals, markers, rec, slab_of, k_slab):
    if op.marker:
        markers.append((t0, op.kind, op.unit))
        rec(lane, op.kind, op.unit, None, op.phase)
        return
    intervals[lane].append(Interval(lane, t0, t1, _LABEL[op.kind], op.unit, op.k, op.phase))
    if op.kind == "pack":
        rec(ev.H2D, ev.PACK, op.unit, op.buffer, op.phase, t0, t1)
    elif op.kind == "h2d":
        rec(ev.H2D, ev.STREAM_IN, op.unit, op.buffer, op.phase, t0, t1)
        rec(ev.H2D, ev.WEIGHTS_READY, op.unit, op.buffer, op.phase)
    elif op.kind in COMPUTE_KINDS:
        if op.buffer is not None:
            rec(ev.COMPUTE, ev.BIND, op.unit, op.buffer, op.phase)
        kind = ev.LOCAL_BACKWARD if op.kind in (sch.BWD, sch.EMBED_BWD) else ev.COMPUTE_OP
        rec(ev.COMPUTE, kind, op.unit, None, op.phase, t0, t1)
        if op.releases_weights:
            rec(ev.COMPUTE, ev.RELEASE, op.unit, op.buffer, op.phase)
            rec(ev.COMPUTE, ev.BUFFER_FREE, op.unit, op.buffer, op.phase)
        if op.grad is not None:
            rec(ev.COMPUTE, ev.BACKWARD_DONE, op.unit, ev.GRAD_BUFFER, op.phase)
    elif op.kind == "d2h":
        slab = op.grad % k_slab
        slab_of[op.grad] = slab
        rec(ev.D2H, ev.SLAB_ACQUIRE, op.unit, None, op.phase, slab=slab)
        rec(ev.D2H, ev.OFFLOAD, op.unit, ev.GRAD_BUFFER, op.phase, t0, t1, slab=slab)
        rec(ev.D2H, ev.BUFFER_FREE, op.unit, ev.GRAD_BUFFER, op.phase)
        if op.buffer is not None:
            rec(ev.D2H, ev.BUFFER_FREE, op.unit, op.buffer, op.phase)
    elif op.kind == "accum":
        slab = slab_of[op.grad]
        rec(ev.HOST, ev.ACCUMULATE, op.unit, None, None, t0, t1, slab=slab)
        rec(ev.HOST, ev.SLAB_RELEASE, op.unit, None, None, slab=slab)


# ---------------------------------------------------------------- bounds & reports

def serial_upper_bound(workload: Workload, profile: HardwareProfile | None = None) -> int:
    """Step time with every op fully serialized."""
    return simulate_step(workload, profile, mode="serial").step_time


def lane_lower_bound(timeline: Timeline) -> int:
    return max(timeline.busy(lane) for lane in ev.LANES)


def overlap_report(workload: Workload, profile: HardwareProfile | None = None,
                   timeline: Timeline | None = None) -> dict:
    """Per streamed step: was its weight transfer hidden behind earlier compute?

    A step counts as hidden when its compute starts the moment the compute
    lane becomes free, i.e. no bubble precedes it.  The analytic check
    ``transfer <= previous compute`` is reported alongside.
    """
    tl = timeline or simulate_step(workload, profile)
    d = workload.resolved(profile)
    rows = []
    prev_compute, lane_free = None, 0
    for iv in tl.intervals[ev.COMPUTE]:
        hidden = iv.start <= lane_free
        lane_free = max(lane_free, iv.end)
        if iv.k is not None:
            transfer = d[_key("h2d", iv.layer)] + d[_key("pack", iv.layer)]
            rows.append({"k": iv.k, "op": iv.label, "layer": iv.layer, "phase": iv.phase,
                         "transfer_ns": transfer, "prev_compute_ns": prev_compute,
                         "hidden": hidden,
                         "transfer_le_prev_compute": (transfer == 0 if prev_compute is None
                                                      else transfer <= prev_compute)})
        prev_compute = iv.duration
    sum_c = tl.busy(ev.COMPUTE)
    sum_t = sum(d[_key("h2d", iv.layer)] for iv in tl.intervals[ev.H2D] if iv.label == "W")
    h2d = tl.intervals[ev.H2D]
    fill = h2d[1].end if len(h2d) > 1 else 0  # first pack + transfer
    tail = tl.intervals[ev.D2H][-1:] + tl.intervals[ev.HOST][-1:]
    drain = sum(iv.duration for iv in tail)
    return {
        "layers": rows,
        "summary": {
            "hidden_fraction": (sum(r["hidden"] for r in rows) / len(rows)) if rows else 1.0,
            "sum_compute_ns": sum_c, "sum_transfer_ns": sum_t,
            "bound_ns": max(sum_c, sum_t) + fill + drain,
            "step_time_ns": tl.step_time,
        },
    }


@dataclass
class Ablation:
    toggle: str
    base: Timeline
    variant: Timeline
    base_value: object
    variant_value: object

    @property
    def delta(self) -> float:
        b = self.base.step_time
        return (self.variant.step_time - b) / b if b else 0.0

    def to_json(self) -> dict:
        return {"toggle": self.toggle, "base_value": self.base_value,
                "variant_value": self.variant_value,
                "base_step_time_ns": self.base.step_time,
                "variant_step_time_ns": self.variant.step_time,
                "delta": self.delta}


ABLATION_TOGGLES = ("double_buffering", "K_slab", "K_ckpt")


def ablate(workload: Workload, profile: HardwareProfile | None, toggle: str,
           value=None) -> Ablation:
    """Simulate ``workload`` with one schedule knob changed.

    Defaults: ``double_buffering`` flips the buffer count, ``K_slab`` and
    ``K_ckpt`` drop to 1.
    """
    if toggle == "double_buffering":
        base_v = workload.double_buffering
        var_v = (not base_v) if value is None else bool(value)
        other = workload.with_(n_buffers=2 if var_v else 1)
    elif toggle == "K_slab":
        base_v, var_v = workload.k_slab, 1 if value is None else int(value)
        other = workload.with_(k_slab=var_v)
    elif toggle == "K_ckpt":
        base_v, var_v = workload.k_ckpt, 1 if value is None else int(value)
        other = workload.with_(k_ckpt=var_v)
    else:
        raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATION_TOGGLES}")
    return Ablation(toggle, simulate_step(workload, profile), simulate_step(other, profile),
                    base_v, var_v)


# ---------------------------------------------------------------- calibration

def _op_kind(r: ev.Record) -> str | None:
    """Map a timed trace record to a workload duration kind."""
    if r.t0_ns is None or r.t1_ns is None:
        return None
    if r.kind == ev.PACK:
        return "pack"
    if r.kind == ev.STREAM_IN:
        return "h2d"
    if r.kind == ev.OFFLOAD:
        return "d2h"
    if r.kind == ev.ACCUMULATE:
        return "accum"
    if r.kind == ev.COMPUTE_OP:
        if r.phase == "head":
            return sch.HEAD
        if r.phase == "recompute":
            return sch.RECOMPUTE
        return sch.EMBED_FWD if r.layer == 0 else sch.FWD
    if r.kind == ev.LOCAL_BACKWARD:
        return sch.EMBED_BWD if r.layer == 0 else sch.BWD
    return None


def _trimmed_mean(values: list[int], trim: float = 0.1) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = int(len(v) * trim)
    if len(v) - 2 * k >= 1:
        v = v[k:len(v) - k]
    return float(v.mean())


def _as_logs(trace) -> list[ev.EventLog]:
    if isinstance(trace, ev.EventLog):
        return [trace]
    if isinstance(trace, (str, Path)):
        return [ev.EventLog.load(trace)]
    logs = [_as_logs(t)[0] for t in trace]
    if not logs:
        raise CalibrationError("no traces given")
    return logs


def calibrate(trace, *, dispatch_overhead: bool = False, trim: float = 0.1) -> Workload:
    """Fit per-(kind, layer) durations from one or more step traces.

    Each duration is a trimmed mean over all samples.  With
    ``dispatch_overhead`` the compute lane's untimed gaps (binding, Python
    dispatch) are spread evenly over the compute ops.
    """
    logs = _as_logs(trace)
    head = logs[0].header
    try:
        L = int(head["num_layers"] if "num_layers" in head else head["spec"]["num_layers"])
        k_ckpt = int(head["k_ckpt"])
    except (KeyError, TypeError, ValueError):
        raise CalibrationError("trace header lacks num_layers / k_ckpt") from None
    samples: dict[str, list[int]] = {}
    gaps: list[float] = []
    for log in logs:
        if not len(log):
            raise CalibrationError("empty trace")
        timed = []
        for r in log:
            kind = _op_kind(r)
            if kind is None:
                continue
            samples.setdefault(_key(kind, r.layer), []).append(r.duration_ns)
            timed.append(r)
        if dispatch_overhead and timed:
            comp = [r for r in timed if r.lane == ev.COMPUTE]
            span = max(r.t1_ns for r in timed) - min(r.t0_ns for r in timed)
            busy = sum(r.duration_ns for r in timed)
            if comp:
                gaps.append(max(0, span - busy) / len(comp))
    if not samples:
        raise CalibrationError("trace has no timed records")
    w = Workload(L, k_ckpt, int(head.get("n_buffers", 2)), int(head.get("k_slab", 12)),
                 head.get("variant", "alg1"))
    durations = {k: int(round(_trimmed_mean(v, trim))) for k, v in samples.items()}
    if gaps:
        extra = int(round(float(np.mean(gaps))))
        for key in durations:
            if key.split(":")[0] in COMPUTE_KINDS:
                durations[key] += extra
    missing = [k for k in w.required_keys() if k not in durations]
    if missing:
        raise CalibrationError(f"insufficient samples: no timings for {missing[:6]}")
    w.durations = durations
    return w


def save_timeline(timeline: Timeline, out_dir, stem: str = "timeline") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js, cs = out / f"{stem}.json", out / f"{stem}_gantt.csv"
    js.write_text(json.dumps(timeline.to_json(), indent=2, sort_keys=True) + "\n")
    cs.write_text(timeline.gantt_csv())
    return {"json": js, "csv": cs}
