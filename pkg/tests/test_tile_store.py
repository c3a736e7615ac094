import threading

import numpy as np
import pytest

from streamtrain.memory_model import ModelSpec, tile_param_counts
from streamtrain.tile_store import (PAGE_SIZE, GradSlabPool, ProtocolError, Section, SlabState,
                                    StagingSlab, StoreError, StoreFormatError, TileStore,
                                    build_layout, load_store, pack_weights, save_store, unpack)


def test_layout_page_aligned_and_contiguous(tiny_spec):
    lay = build_layout(tiny_spec)
    assert all(s.offset % PAGE_SIZE == 0 for s in lay.sections)
    # sections of one tile are adjacent in θ, ∇θ, m, v order
    for t in lay.physical_tiles:
        secs = [lay.section(t, k) for k in Section]
        assert [s.kind for s in secs] == list(Section)
        assert all(a.offset < b.offset for a, b in zip(secs, secs[1:]))
    # tiles ordered by layer id
    firsts = [lay.section(t, Section.WEIGHTS).offset for t in lay.physical_tiles]
    assert firsts == sorted(firsts)


def test_layout_lengths_follow_widths(tiny_spec):
    lay = build_layout(tiny_spec)
    for t, n in tile_param_counts(tiny_spec).items():
        assert lay.section(t, Section.WEIGHTS).length == 2 * n
        assert lay.section(t, Section.GRADS).length == 2 * n
        assert lay.section(t, Section.M).length == 4 * n
        assert lay.section(t, Section.V).length == 4 * n


def test_no_overlap(tiny_spec):
    lay = build_layout(tiny_spec)
    spans = sorted((s.offset, s.offset + s.length) for s in lay.sections)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] <= lay.total_bytes


def test_bad_page_size(tiny_spec):
    with pytest.raises(ValueError):
        build_layout(tiny_spec, page_size=1000)


def test_tied_head_aliases_embedding():
    spec = ModelSpec(2, 8, 16, 12, tied_embeddings=True)
    store = TileStore.for_spec(spec)
    assert store.layout.resolve(spec.head_id) == 0
    assert spec.head_id not in store.layout.physical_tiles
    store.write_tile(0, Section.WEIGHTS, np.full(96, 0.5, dtype=np.float32))
    assert np.all(store.weights_f32(spec.head_id) == 0.5)
    with pytest.raises(StoreError):
        store.layout.resolve(99)


def test_write_read_and_views(tiny_store):
    vals = np.linspace(-1, 1, tiny_store.layout.elements(1)).astype(np.float32)
    tiny_store.write_tile(1, Section.M, vals)
    assert np.array_equal(tiny_store.read_tile(1, Section.M), vals)
    with pytest.raises(StoreError):
        tiny_store.write_tile(1, Section.M, vals[:-1])
    tiny_store.write_tile(1, Section.WEIGHTS, vals)
    assert tiny_store.view(1, Section.WEIGHTS).dtype == np.uint16


def test_save_load_byte_exact(tmp_path, tiny_store):
    tiny_store.step = 7
    p = tmp_path / "s.mgts"
    save_store(tiny_store, p)
    back = load_store(p)
    assert back.step == 7
    assert np.array_equal(back.backing, tiny_store.backing)
    assert back.layout == tiny_store.layout
    save_store(back, tmp_path / "t.mgts")
    assert (tmp_path / "t.mgts").read_bytes() == p.read_bytes()


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-20], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:-9] + bytes([b[-9] ^ 1]) + b[-8:], "checksum"),
])
def test_load_rejects_corruption(tmp_path, tiny_store, mutate, message):
    p = tmp_path / "s.mgts"
    save_store(tiny_store, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(StoreFormatError, match=message):
        load_store(p)


def test_pack_unpack_byte_exact(tiny_spec, tiny_store):
    lay = tiny_store.layout
    for unit in lay.units:
        slab = StagingSlab(0, lay.p_max_bytes)
        n = pack_weights(tiny_store, unit, slab)
        expected = b"".join(tiny_store.raw(t, Section.WEIGHTS).tobytes()
                            for t in lay.unit_tiles(unit))
        assert n == len(expected) and unpack(slab) == expected
        assert slab.state is SlabState.IN_FLIGHT


def test_pack_requires_free_and_capacity(tiny_store):
    slab = StagingSlab(0, 4)
    with pytest.raises(StoreError):
        pack_weights(tiny_store, 1, slab)
    slab = StagingSlab(0, tiny_store.layout.p_max_bytes)
    pack_weights(tiny_store, 1, slab)
    with pytest.raises(ProtocolError):
        pack_weights(tiny_store, 1, slab)


def test_slab_state_machine():
    s = StagingSlab(0, 8)
    with pytest.raises(ProtocolError):
        s.advance(SlabState.DRAINING)
    for st in (SlabState.PACKING, SlabState.IN_FLIGHT, SlabState.DRAINING, SlabState.FREE):
        s.advance(st)
    assert s.state is SlabState.FREE


def test_grad_pool_backpressure():
    pool = GradSlabPool(16, k_slab=2)
    a, b = pool.acquire(), pool.acquire()
    assert pool.try_acquire() is None
    with pytest.raises(TimeoutError):
        pool.acquire(timeout=0.01)
    got = []
    t = threading.Thread(target=lambda: got.append(pool.acquire(timeout=5)))
    t.start()
    pool.release(a)
    t.join()
    assert got and got[0] is a
    assert pool.max_outstanding == 2
    pool.release(b)
    pool.release(got[0])
    assert pool.all_free
    with pytest.raises(ProtocolError):
        pool.release(a)
    with pytest.raises(ValueError):
        GradSlabPool(16, 0)


def test_checksum_and_copy(tiny_store):
    c = tiny_store.copy()
    assert c.checksum() == tiny_store.checksum()
    c.backing[0] ^= 1
    assert c.checksum() != tiny_store.checksum()
