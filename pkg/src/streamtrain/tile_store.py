"""Host-authoritative parameter store.

All persistent training state lives in one contiguous byte region split into
layer-contiguous tiles.  Each tile holds four page-aligned sections in the
order weights, grads, m, v.  Weights and grads are bf16 bit patterns, the two
Adam moments are fp32.

Staging slabs model the pinned host buffers: a fixed pool whose capacity
discipline, rather than page-locking, is what the engine relies on.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import crcmod.predefined
import numpy as np

from .bf16 import bf16_bits_to_f32, f32_to_bf16_bits
from .memory_model import ModelSpec, tile_param_counts

PAGE_SIZE = 4096
DEFAULT_K_SLAB = 12

MAGIC = b"MGTS"
FORMAT_VERSION = 1

_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


class Section(enum.IntEnum):
    WEIGHTS = 0
    GRADS = 1
    M = 2
    V = 3


class StoreError(Exception):
    pass


class StoreFormatError(StoreError):
    pass


class ProtocolError(Exception):
    """A buffer or slab was used out of its permitted state order."""


@dataclass(frozen=True)
class SectionEntry:
    layer: int
    kind: Section
    offset: int
    length: int


@dataclass(frozen=True)
class TileLayout:
    sections: tuple[SectionEntry, ...]
    alias_map: dict[int, int]
    page_size: int
    total_bytes: int
    weight_bytes: int = 2
    grad_bytes: int = 2
    moment_bytes: int = 4
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {(s.layer, s.kind): s for s in self.sections})

    @property
    def num_layers(self) -> int:
        return max(self.alias_map) - 2

    @property
    def physical_tiles(self) -> list[int]:
        return sorted({s.layer for s in self.sections})

    def resolve(self, layer: int) -> int:
        try:
            return self.alias_map[layer]
        except KeyError:
            raise StoreError(f"unknown layer id {layer}") from None

    def section(self, layer: int, kind: Section) -> SectionEntry:
        return self._index[(self.resolve(layer), Section(kind))]

    def elements(self, layer: int) -> int:
        return self.section(layer, Section.WEIGHTS).length // self.weight_bytes

    def element_bytes(self, kind: Section) -> int:
        return {Section.WEIGHTS: self.weight_bytes, Section.GRADS: self.grad_bytes}.get(
            kind, self.moment_bytes)

    def unit_tiles(self, unit: int) -> list[int]:
        """Logical tiles packed by one StreamIn of ``unit`` (head carries the final norm)."""
        L = self.num_layers
        if unit == L + 2:
            return [L + 1, L + 2]
        if 0 <= unit <= L:
            return [unit]
        raise StoreError(f"{unit} is not a streaming unit")

    def unit_bytes(self, unit: int) -> int:
        return sum(self.section(t, Section.WEIGHTS).length for t in self.unit_tiles(unit))

    @property
    def units(self) -> list[int]:
        return list(range(self.num_layers + 1)) + [self.num_layers + 2]

    @property
    def p_max_bytes(self) -> int:
        return max(self.unit_bytes(u) for u in self.units)

    def to_dict(self) -> dict:
        return {
            "page_size": self.page_size,
            "total_bytes": self.total_bytes,
            "sections": [{"layer": s.layer, "kind": s.kind.name.lower(), "offset": s.offset,
                          "length": s.length} for s in self.sections],
            "aliases": {str(k): v for k, v in sorted(self.alias_map.items()) if k != v},
        }


def _align(n: int, page: int) -> int:
    return -(-n // page) * page


def build_layout(spec: ModelSpec, page_size: int = PAGE_SIZE) -> TileLayout:
    if page_size < 64 or page_size & (page_size - 1):
        raise ValueError(f"page_size must be a power of two >= 64, got {page_size}")
    offset = 0
    sections = []
    widths = {Section.WEIGHTS: spec.weight_bytes, Section.GRADS: spec.grad_bytes,
              Section.M: spec.moment_bytes, Section.V: spec.moment_bytes}
    for layer, n in sorted(tile_param_counts(spec).items()):
        for kind in Section:
            length = n * widths[kind]
            sections.append(SectionEntry(layer, kind, offset, length))
            offset = _align(offset + length, page_size)
    if offset >= 2**64:
        raise OverflowError("layout exceeds 64-bit addressable size")
    alias = {i: i for i in range(spec.head_id + 1)}
    if spec.tied_embeddings:
        alias[spec.head_id] = spec.embed_id
    return TileLayout(tuple(sections), alias, page_size, offset,
                      spec.weight_bytes, spec.grad_bytes, spec.moment_bytes)


class TileStore:
    def __init__(self, layout: TileLayout, backing: np.ndarray | None = None, step: int = 0):
        if (layout.weight_bytes, layout.grad_bytes, layout.moment_bytes) != (2, 2, 4):
            raise StoreError("tile storage supports bf16 weights/grads and fp32 moments only")
        self.layout = layout
        if backing is None:
            backing = np.zeros(layout.total_bytes, dtype=np.uint8)
        if backing.dtype != np.uint8 or backing.size != layout.total_bytes:
            raise StoreError("backing region does not match layout.total_bytes")
        self.backing = backing
        self.step = step
        self._locks = {t: threading.Lock() for t in layout.physical_tiles}

    @classmethod
    def for_spec(cls, spec: ModelSpec, page_size: int = PAGE_SIZE) -> "TileStore":
        return cls(build_layout(spec, page_size))

    @property
    def alias_map(self) -> dict[int, int]:
        return self.layout.alias_map

    def lock(self, layer: int) -> threading.Lock:
        return self._locks[self.layout.resolve(layer)]

    def raw(self, layer: int, kind: Section) -> np.ndarray:
        s = self.layout.section(layer, kind)
        return self.backing[s.offset:s.offset + s.length]

    def view(self, layer: int, kind: Section) -> np.ndarray:
        """Typed in-place view: uint16 bf16 bits for weights/grads, float32 for moments."""
        dtype = np.float32 if Section(kind) in (Section.M, Section.V) else np.uint16
        return self.raw(layer, kind).view(dtype)

    def read_tile(self, layer: int, kind: Section) -> np.ndarray:
        return self.view(layer, kind).copy()

    def write_tile(self, layer: int, kind: Section, values) -> None:
        dst = self.view(layer, kind)
        if isinstance(values, (bytes, bytearray, memoryview)):
            values = np.frombuffer(values, dtype=np.uint8).view(dst.dtype)
        values = np.asarray(values)
        if values.size != dst.size:
            raise StoreError(f"layer {layer} {Section(kind).name}: expected {dst.size} "
                             f"elements, got {values.size}")
        if values.dtype != dst.dtype:
            if dst.dtype == np.uint16 and values.dtype.kind == "f":
                values = f32_to_bf16_bits(values.astype(np.float32))
            else:
                values = values.astype(dst.dtype)
        dst[...] = values.reshape(-1)

    def weights_f32(self, layer: int) -> np.ndarray:
        return bf16_bits_to_f32(self.view(layer, Section.WEIGHTS))

    def checksum(self) -> int:
        return _crc64(self.backing.tobytes())

    def copy(self) -> "TileStore":
        return TileStore(self.layout, self.backing.copy(), self.step)


# ---------------------------------------------------------------- slabs

class SlabState(enum.Enum):
    FREE = "Free"
    PACKING = "Packing"
    IN_FLIGHT = "InFlight"
    DRAINING = "Draining"


_NEXT = {SlabState.FREE: SlabState.PACKING, SlabState.PACKING: SlabState.IN_FLIGHT,
         SlabState.IN_FLIGHT: SlabState.DRAINING, SlabState.DRAINING: SlabState.FREE}


class StagingSlab:
    def __init__(self, slab_id: int, capacity: int):
        self.id = slab_id
        self.capacity = capacity
        self.data = np.zeros(capacity, dtype=np.uint8)
        self.state = SlabState.FREE
        self.layer: int | None = None
        self.filled = 0

    def advance(self, to: SlabState) -> None:
        if _NEXT[self.state] is not to:
            raise ProtocolError(f"slab {self.id}: illegal transition {self.state.value} -> {to.value}")
        self.state = to
        if to is SlabState.FREE:
            self.layer = None

    def __repr__(self):
        return f"StagingSlab(id={self.id}, state={self.state.value}, layer={self.layer})"


def pack_weights(store: TileStore, unit: int, slab: StagingSlab) -> int:
    """JIT-pack a unit's flat weight section(s) into a free slab.

    Returns the number of bytes packed.  The slab leaves in ``InFlight``.
    """
    if slab.state is not SlabState.FREE:
        raise ProtocolError(f"slab {slab.id} is busy ({slab.state.value})")
    n = store.layout.unit_bytes(unit)
    if n > slab.capacity:
        raise StoreError(f"unit {unit} needs {n} bytes, slab holds {slab.capacity}")
    slab.advance(SlabState.PACKING)
    slab.layer = unit
    pos = 0
    for tile in store.layout.unit_tiles(unit):
        src = store.raw(tile, Section.WEIGHTS)
        slab.data[pos:pos + src.size] = src
        pos += src.size
    slab.filled = pos
    slab.advance(SlabState.IN_FLIGHT)
    return pos


def unpack(slab: StagingSlab) -> bytes:
    return slab.data[:slab.filled].tobytes()


class GradSlabPool:
    """Fixed pool of gradient slabs; acquiring from an empty pool blocks."""

    def __init__(self, capacity_bytes: int, k_slab: int = DEFAULT_K_SLAB):
        if k_slab < 1:
            raise ValueError("k_slab must be >= 1")
        self.k_slab = k_slab
        self.slabs = [StagingSlab(i, capacity_bytes) for i in range(k_slab)]
        self._free = list(self.slabs)
        self._cond = threading.Condition()
        self.outstanding = 0
        self.max_outstanding = 0

    def acquire(self, timeout: float | None = None) -> StagingSlab:
        with self._cond:
            if not self._cond.wait_for(lambda: self._free, timeout=timeout):
                raise TimeoutError("no gradient slab released within timeout")
            slab = self._free.pop(0)
            slab.advance(SlabState.PACKING)
            self.outstanding += 1
            self.max_outstanding = max(self.max_outstanding, self.outstanding)
            return slab

    def try_acquire(self) -> StagingSlab | None:
        with self._cond:
            if not self._free:
                return None
        return self.acquire()

    def release(self, slab: StagingSlab) -> None:
        with self._cond:
            if slab.state is SlabState.FREE or slab not in self.slabs:
                raise ProtocolError(f"release of slab {slab.id} that is not outstanding")
            # a slab may be handed back from any busy state
            slab.state = SlabState.FREE
            slab.layer = None
            slab.filled = 0
            self._free.append(slab)
            self.outstanding -= 1
            self._cond.notify()

    @property
    def all_free(self) -> bool:
        with self._cond:
            return len(self._free) == self.k_slab


def acquire_grad_slab(pool: GradSlabPool, timeout: float | None = None) -> StagingSlab:
    return pool.acquire(timeout)


def release_grad_slab(pool: GradSlabPool, slab: StagingSlab) -> None:
    pool.release(slab)


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<4sIIQBBB")
_ENTRY = struct.Struct("<IBQQ")
_ALIAS = struct.Struct("<II")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def save_store(store: TileStore, path) -> None:
    """Write ``MGTS`` v1: header, section table, alias table, step, payload, CRC-64."""
    lay = store.layout
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, lay.page_size, lay.total_bytes,
                          lay.weight_bytes, lay.grad_bytes, lay.moment_bytes),
             _U32.pack(len(lay.sections))]
    parts += [_ENTRY.pack(s.layer, int(s.kind), s.offset, s.length) for s in lay.sections]
    parts.append(_U32.pack(len(lay.alias_map)))
    parts += [_ALIAS.pack(k, v) for k, v in sorted(lay.alias_map.items())]
    parts.append(_U64.pack(store.step))
    payload = store.backing.tobytes()
    parts += [payload, _U64.pack(_crc64(payload))]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, st: struct.Struct) -> tuple:
        if self.pos + st.size > len(self.data):
            raise StoreFormatError("truncated store file")
        out = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreFormatError("truncated store file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_store(path) -> TileStore:
    r = _Reader(Path(path).read_bytes())
    magic, version, page, total, wb, gb, mb = r.take(_HEADER)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreFormatError(f"unsupported store version {version}")
    (count,) = r.take(_U32)
    sections = []
    for _ in range(count):
        layer, kind, off, length = r.take(_ENTRY)
        sections.append(SectionEntry(layer, Section(kind), off, length))
    (n_alias,) = r.take(_U32)
    alias = dict(r.take(_ALIAS) for _ in range(n_alias))
    (step,) = r.take(_U64)
    payload = r.raw(total)
    (crc,) = r.take(_U64)
    if r.pos != len(r.data):
        raise StoreFormatError("trailing bytes after checksum")
    if _crc64(payload) != crc:
        raise StoreFormatError("payload checksum mismatch")
    layout = TileLayout(tuple(sections), alias, page, total, wb, gb, mb)
    return TileStore(layout, np.frombuffer(payload, dtype=np.uint8).copy(), step)
