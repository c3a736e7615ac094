"""Lane event log, protocol validator and line-delimited JSON trace format.

Both the streaming engine and the pipeline simulator emit :class:`EventLog`
instances; :func:`validate_event_log` is the single definition of the
three-lane protocol they must satisfy.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

TRACE_FORMAT = "streamtrain-trace"
TRACE_VERSION = 1

# lanes
COMPUTE, H2D, D2H, HOST = "Compute", "H2D", "D2H", "Host"
LANES = (COMPUTE, H2D, D2H, HOST)

# synchronization events
WEIGHTS_READY, BACKWARD_DONE, BUFFER_FREE = "WeightsReady", "BackwardDone", "BufferFree"
EVENT_KINDS = (WEIGHTS_READY, BACKWARD_DONE, BUFFER_FREE)

# operation records
PACK, STREAM_IN, BIND, COMPUTE_OP = "Pack", "StreamIn", "Bind", "Compute"
RECOMPUTE_BLOCK, LOCAL_BACKWARD, OFFLOAD, RELEASE = (
    "RecomputeBlock", "LocalBackward", "Offload", "Release")
CKPT_WRITE, CKPT_LOAD, CKPT_FREE = "CheckpointWrite", "CheckpointLoad", "CheckpointFree"
STACK_PUSH, STACK_POP = "StackPush", "StackPop"
SLAB_ACQUIRE, SLAB_RELEASE = "SlabAcquire", "SlabRelease"
ACCUMULATE, ADAM_UPDATE, VIOLATION = "Accumulate", "AdamUpdate", "Violation"

GRAD_BUFFER = "G"


class TraceFormatError(ValueError):
    pass


@dataclass
class Record:
    seq: int
    ts: int
    lane: str
    kind: str
    layer: int | None = None
    buffer: int | str | None = None
    phase: str | None = None
    t0_ns: int | None = None
    t1_ns: int | None = None
    info: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"seq": self.seq, "ts": self.ts, "lane": self.lane, "kind": self.kind,
             "layer": self.layer, "buffer": self.buffer, "phase": self.phase}
        if self.t0_ns is not None:
            d["t0_ns"], d["t1_ns"] = self.t0_ns, self.t1_ns
        if self.info:
            d["info"] = self.info
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        try:
            return cls(seq=int(d["seq"]), ts=int(d["ts"]), lane=str(d["lane"]),
                       kind=str(d["kind"]), layer=d.get("layer"), buffer=d.get("buffer"),
                       phase=d.get("phase"), t0_ns=d.get("t0_ns"), t1_ns=d.get("t1_ns"),
                       info=dict(d.get("info") or {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"malformed trace record {d!r}: {exc}") from None

    @property
    def duration_ns(self) -> int | None:
        if self.t0_ns is None or self.t1_ns is None:
            return None
        return self.t1_ns - self.t0_ns


class EventLog:
    """Append-only, thread-safe record list; ``ts`` is a global logical clock."""

    def __init__(self, **header):
        self.header = dict(header)
        self.records: list[Record] = []
        self._lock = threading.Lock()

    def record(self, lane: str, kind: str, layer=None, buffer=None, phase=None,
               t0_ns=None, t1_ns=None, **info) -> Record:
        with self._lock:
            n = len(self.records)
            rec = Record(n, n + 1, lane, kind, layer, buffer, phase, t0_ns, t1_ns, info)
            self.records.append(rec)
            return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def of(self, kind: str, **match) -> list[Record]:
        return [r for r in self.records
                if r.kind == kind and all(getattr(r, k) == v for k, v in match.items())]

    def digest(self) -> str:
        """Hash of the record sequence, ignoring wall-clock fields."""
        h = hashlib.sha256()
        for r in self.records:
            info = {k: v for k, v in r.info.items() if not k.endswith("_ns")}
            h.update(json.dumps([r.lane, r.kind, r.layer, r.buffer, r.phase, info],
                                sort_keys=True).encode())
        return h.hexdigest()

    # ---- trace io
    def to_jsonl(self) -> str:
        head = {"format": TRACE_FORMAT, "version": TRACE_VERSION, **self.header}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EventLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TraceFormatError("empty trace")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"bad trace header: {exc}") from None
        if not isinstance(head, dict) or head.get("format") != TRACE_FORMAT:
            raise TraceFormatError("missing trace header")
        if head.get("version") != TRACE_VERSION:
            raise TraceFormatError(f"unsupported trace version {head.get('version')}")
        log = cls(**{k: v for k, v in head.items() if k not in ("format", "version")})
        for n, ln in enumerate(lines[1:], start=2):
            try:
                d = json.loads(ln)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {n}: {exc}") from None
            if not isinstance(d, dict):
                raise TraceFormatError(f"line {n}: record is not an object")
            log.records.append(Record.from_json(d))
        return log

    @classmethod
    def load(cls, path) -> "EventLog":
        return cls.from_jsonl(Path(path).read_text())


@dataclass(frozen=True)
class Violation:
    rule: str
    seq: int
    message: str

    def to_json(self) -> dict:
        return {"rule": self.rule, "seq": self.seq, "message": self.message}


def validate_event_log(log: EventLog, k_slab: int | None = None) -> list[Violation]:
    """Check a complete step log against the lane protocol.

    Rules::

        a  Bind(i, b) needs WeightsReady(i, b) with no BufferFree(b) since
        b  Offload(i) needs an unconsumed BackwardDone(i) of the same phase
        c  refilling a buffer (StreamIn on b, BackwardDone on G) needs
           BufferFree(b) since its previous fill
        d  logical timestamps strictly increase within each lane
        e  StackPop matches the top StackPush (slot label and depth)
        f  outstanding gradient slabs never exceed k_slab and never go negative
    """
    if k_slab is None:
        k_slab = log.header.get("k_slab")
    out: list[Violation] = []
    ready: dict = {}
    filled: dict = {}          # buffer -> still holding an un-freed fill
    pending_bwd: dict = {}
    last_ts: dict = {}
    stack: list = []
    slabs = 0

    for r in log.records:
        v = lambda rule, msg: out.append(Violation(rule, r.seq, msg))  # noqa: E731
        prev = last_ts.get(r.lane)
        if prev is not None and r.ts <= prev:
            v("d", f"{r.lane} timestamp {r.ts} does not exceed {prev}")
        last_ts[r.lane] = r.ts if prev is None else max(prev, r.ts)

        k = r.kind
        if k == WEIGHTS_READY:
            ready[r.buffer] = r.layer
        elif k == BIND:
            if ready.get(r.buffer) != r.layer:
                v("a", f"Bind({r.layer}) on buffer {r.buffer} without WeightsReady")
        elif k == STREAM_IN:
            if filled.get(r.buffer):
                v("c", f"buffer {r.buffer} refilled with layer {r.layer} before BufferFree")
            filled[r.buffer] = True
        elif k == BACKWARD_DONE:
            if r.buffer == GRAD_BUFFER:
                if filled.get(GRAD_BUFFER):
                    v("c", f"grad buffer rewritten by layer {r.layer} before BufferFree")
                filled[GRAD_BUFFER] = True
            key = (r.layer, r.phase)
            pending_bwd[key] = pending_bwd.get(key, 0) + 1
        elif k == OFFLOAD:
            key = (r.layer, r.phase)
            if pending_bwd.get(key, 0) < 1:
                v("b", f"Offload({r.layer}) before BackwardDone")
            else:
                pending_bwd[key] -= 1
        elif k == BUFFER_FREE:
            filled[r.buffer] = False
            ready.pop(r.buffer, None)
        elif k == STACK_PUSH:
            depth = r.buffer
            if depth != len(stack):
                v("e", f"push at depth {depth}, stack holds {len(stack)}")
            stack.append((r.info.get("slot"), depth))
        elif k == STACK_POP:
            top = stack[-1] if stack else None
            if top != (r.info.get("slot"), r.buffer):
                v("e", f"pop of {r.info.get('slot')}@{r.buffer} but top is {top}")
            if stack:
                stack.pop()
        elif k == SLAB_ACQUIRE:
            slabs += 1
            if k_slab is not None and slabs > k_slab:
                v("f", f"{slabs} slabs outstanding, pool holds {k_slab}")
        elif k == SLAB_RELEASE:
            slabs -= 1
            if slabs < 0:
                v("f", "slab released that was never acquired")
                slabs = 0
    return out
