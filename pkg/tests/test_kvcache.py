import struct
import threading

import numpy as np
import pytest

from kvpacket import flops, kvcache
from kvpacket.kvcache import (
    CacheEntry,
    CacheFormatError,
    CacheNotFoundError,
    CacheStore,
    ContiguityError,
    DuplicateEntryError,
    decode_entry,
    encode_entry,
)
from kvpacket.model import CacheError, KVCache, PositionRangeError, embed_tokens, prefill
from kvpacket.tensor import Tensor


def _cache(w, cfg, ids, start=0):
    return prefill(w, cfg, embed_tokens(w, ids), start, logits=False).cache


def _assert_close(a: KVCache, b: KVCache, atol):
    assert a.base_position == b.base_position and a.n_tokens == b.n_tokens
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_allclose(la.keys.data, lb.keys.data, atol=atol)
        np.testing.assert_allclose(la.values.data, lb.values.data, atol=atol)


def test_realign_matches_direct_prefill(tiny_weights, tiny_cfg):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 64, size=12).tolist()
    built = _cache(tiny_weights, tiny_cfg, ids, start=16)
    for delta in (-16, -3, 1, 37, 512):
        moved = kvcache.realign(built, delta, tiny_cfg.rope_theta)
        _assert_close(moved, _cache(tiny_weights, tiny_cfg, ids, start=16 + delta), 1e-5)


def test_realign_identity_inverse_and_additivity(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, list(range(9)))
    assert kvcache.realign(c, 0) is c
    _assert_close(kvcache.realign(kvcache.realign(c, 7), -7), c, 1e-6)
    _assert_close(kvcache.realign(kvcache.realign(c, 5), 11), kvcache.realign(c, 16), 1e-6)
    moved = kvcache.realign(c, 40)
    for a, b in zip(moved.layers, c.layers):
        np.testing.assert_array_equal(a.values.data, b.values.data)


def test_realign_below_zero_is_a_range_error(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, [1, 2, 3], start=4)
    with pytest.raises(PositionRangeError):
        kvcache.realign(c, -5)


def test_realign_counts_elementwise_ops(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, list(range(10)))
    m = flops.FlopsMeter()
    with m:
        kvcache.realign(c, 3)
    assert m.reading(flops.REALIGN) == 10 * tiny_cfg.n_layers * tiny_cfg.n_heads * tiny_cfg.head_dim
    assert m.reading(flops.FORWARD) == 0


def test_concat_split_halves_equals_full(tiny_weights, tiny_cfg):
    ids = list(range(5, 25))
    full = _cache(tiny_weights, tiny_cfg, ids)
    first = _cache(tiny_weights, tiny_cfg, ids[:10])
    second = prefill(tiny_weights, tiny_cfg, embed_tokens(tiny_weights, ids[10:]), prefix_cache=first,
                     logits=False).cache
    joined = kvcache.concat([first, second])
    assert joined.n_tokens == first.n_tokens + second.n_tokens
    _assert_close(joined, full, 1e-5)
    assert kvcache.concat([first]) is first


def test_concat_reports_gap(tiny_weights, tiny_cfg):
    a = _cache(tiny_weights, tiny_cfg, [1, 2, 3])
    b = _cache(tiny_weights, tiny_cfg, [4, 5], start=5)
    with pytest.raises(ContiguityError, match="ends at 3.*starts at 5"):
        kvcache.concat([a, b])
    with pytest.raises(CacheError):
        kvcache.concat([])


def test_prune_counts_and_subset(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, list(range(10)))
    same, mask = kvcache.prune(c, 0.0)
    assert all(k.all() for k in mask.keep)
    pruned, mask = kvcache.prune(c, 0.5, "random", seed=3)
    assert mask.kept_counts() == [5] * tiny_cfg.n_layers
    assert pruned.is_pruned and pruned.n_tokens == 10
    for layer, orig, keep in zip(pruned.layers, c.layers, mask.keep):
        np.testing.assert_array_equal(layer.keys.data, orig.keys.data[keep])
        np.testing.assert_array_equal(layer.token_positions(), np.flatnonzero(keep))
    # layers select independently
    assert len({tuple(k) for k in mask.keep}) > 1


def test_prune_key_norm_keeps_the_largest_key(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, list(range(12)))
    for rate in (0.1, 0.5, 0.95):
        _, mask = kvcache.prune(c, rate, "key_norm")
        for layer, keep in zip(c.layers, mask.keep):
            norms = np.linalg.norm(layer.keys.data.reshape(12, -1), axis=1)
            assert keep[np.argmax(norms)]
            assert norms[keep].min() >= norms[~keep].max() if (~keep).any() else True


def test_prune_clamps_and_validates(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, [1, 2])
    _, mask = kvcache.prune(c, 0.99)
    assert mask.kept_counts() == [1] * tiny_cfg.n_layers
    with pytest.raises(ValueError):
        kvcache.prune(c, 1.0)
    with pytest.raises(ValueError):
        kvcache.prune(c, 0.2, "topk")


def test_attend_with_gaps(tiny_weights, tiny_cfg):
    rng = np.random.default_rng(2)
    c = _cache(tiny_weights, tiny_cfg, list(range(8)))
    q = Tensor(rng.normal(size=(2, tiny_cfg.n_heads, tiny_cfg.head_dim)).astype(np.float32))
    layer = c.layers[0]
    full = kvcache.attend_with_gaps(q, [8, 9], layer)
    kept, _ = kvcache.prune(c, 0.0)
    np.testing.assert_allclose(kvcache.attend_with_gaps(q, [8, 9], kept.layers[0]).data, full.data, atol=1e-6)
    single = kvcache.slice_cache(c, 3, 4).layers[0]
    out = kvcache.attend_with_gaps(q, [8, 9], single).data
    np.testing.assert_allclose(out, np.broadcast_to(single.values.data, out.shape), atol=1e-7)


def test_pruned_forward_keeps_rows_normalized(tiny_weights, tiny_cfg):
    c = _cache(tiny_weights, tiny_cfg, list(range(20)))
    pruned, _ = kvcache.prune(c, 0.3, seed=1)
    a = prefill(tiny_weights, tiny_cfg, embed_tokens(tiny_weights, [7, 8]), prefix_cache=c)
    b = prefill(tiny_weights, tiny_cfg, embed_tokens(tiny_weights, [7, 8]), prefix_cache=pruned, record_attention=True)
    assert not np.allclose(a.logits.data, b.logits.data)
    for p in b.attn_record.probs:
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)


def _oracle_bytes(doc_id, fp, base, keys, values, n_h=0, n_t=0):
    """Independent writer for the documented file layout."""
    out = b"KVPC" + struct.pack("<I", 1) + struct.pack("<I", len(doc_id)) + doc_id.encode() + fp
    n, h, d = keys[0].shape
    out += struct.pack("<qIIIIII", base, len(keys), n, h, d, n_h, n_t)
    for k, v in zip(keys, values):
        out += k.astype("<f4").tobytes() + v.astype("<f4").tobytes()
    return out


def test_encode_matches_independent_writer_and_round_trips():
    rng = np.random.default_rng(4)
    keys = [rng.normal(size=(3, 2, 4)).astype(np.float32) for _ in range(2)]
    values = [rng.normal(size=(3, 2, 4)).astype(np.float32) for _ in range(2)]
    cache = KVCache.from_arrays(keys, values, base_position=7)
    fp = "ab" * 32
    entry = CacheEntry.from_cache("doc-1", cache, fp, 1, 1)
    raw = encode_entry(entry)
    assert raw == _oracle_bytes("doc-1", bytes.fromhex(fp), 7, keys, values, 1, 1)
    back = decode_entry(raw)
    assert back.created_with == fp and back.token_count == 3 and back.cache.base_position == 7
    for la, k, v in zip(back.cache.layers, keys, values):
        assert la.keys.data.tobytes() == k.tobytes() and la.values.data.tobytes() == v.tobytes()
    plain = decode_entry(encode_entry(CacheEntry.from_cache("d", cache)))
    assert plain.created_with == kvcache.NO_FINGERPRINT


def test_decode_rejects_bad_files():
    cache = KVCache.from_arrays([np.zeros((1, 1, 2), np.float32)], [np.zeros((1, 1, 2), np.float32)])
    raw = encode_entry(CacheEntry.from_cache("d", cache))
    with pytest.raises(CacheFormatError):
        decode_entry(b"NOPE" + raw[4:])
    with pytest.raises(CacheFormatError):
        decode_entry(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CacheFormatError):
        decode_entry(raw + b"\0")


@pytest.mark.parametrize("on_disk", [False, True])
def test_store_put_get(tmp_path, tiny_weights, tiny_cfg, on_disk):
    store = CacheStore(tmp_path / "s" if on_disk else None)
    with pytest.raises(CacheNotFoundError):
        store.get("missing")
    c = _cache(tiny_weights, tiny_cfg, [3, 4, 5])
    store.put(CacheEntry.from_cache("a", c))
    with pytest.raises(DuplicateEntryError):
        store.put(CacheEntry.from_cache("a", c))
    store.put(CacheEntry.from_cache("a", c), overwrite=True)
    assert len(store) == 1 and "a" in store and store.doc_ids() == ["a"]
    got = CacheStore(tmp_path / "s").get("a") if on_disk else store.get("a")
    for la, lb in zip(got.cache.layers, c.layers):
        assert la.keys.data.tobytes() == lb.keys.data.tobytes()
    assert store.file_bytes("a") == len(encode_entry(CacheEntry.from_cache("a", c)))
    with pytest.raises(ValueError):
        store.put(CacheEntry.from_cache("../escape", c))


def test_store_serializes_concurrent_writers(tmp_path, tiny_weights, tiny_cfg):
    store = CacheStore(tmp_path / "s")
    c = _cache(tiny_weights, tiny_cfg, [1, 2])
    threads = [threading.Thread(target=store.put, args=(CacheEntry.from_cache(f"d{i}", c),)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(CacheStore(tmp_path / "s")) == 16
