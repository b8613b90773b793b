"""On-disk format conformance, dtype conversions, and reader/writer behavior."""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import pytest

from conftest import SMALL_SHAPES, random_checkpoint
from mergeforge.tensorstore import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointReader,
    CheckpointWriter,
    Tensor,
    from_f32,
    load_checkpoint,
    read_checkpoint,
    tensor_from_array,
    to_f32,
    validate_compat,
    write_checkpoint,
)


def craft(header_obj, payload: bytes, pad: bool = True, header_len: int | None = None) -> bytes:
    """Build raw file bytes without going through the library writer."""
    blob = json.dumps(header_obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if pad and len(blob) % 8:
        blob += b" " * (8 - len(blob) % 8)
    n = len(blob) if header_len is None else header_len
    return struct.pack("<Q", n) + blob + payload


def write_raw(tmp_path, data: bytes) -> str:
    p = tmp_path / "raw.safetensors"
    p.write_bytes(data)
    return str(p)


def bf16_oracle_f32(pattern: int) -> float:
    """BF16 bit pattern -> float via struct only (independent of numpy views)."""
    return struct.unpack("<f", struct.pack("<I", pattern << 16))[0]


# ---------------------------------------------------------------------------
# dtype conversions


def test_bf16_to_f32_exhaustive():
    patterns = np.arange(65536, dtype="<u2")
    t = Tensor("BF16", (65536,), patterns.tobytes())
    wide = to_f32(t)
    assert wide.dtype == "F32"
    got = np.frombuffer(wide.data, dtype="<f4")
    got_bits = got.view("<u4")
    for p in range(65536):
        want = bf16_oracle_f32(p)
        if want != want:  # NaN: compare bit patterns, value compare is useless
            assert got_bits[p] == (p << 16)
        else:
            assert got[p] == want, f"pattern {p:#06x}"


def test_bf16_f32_roundtrip_all_patterns():
    patterns = np.arange(65536, dtype="<u2")
    t = Tensor("BF16", (65536,), patterns.tobytes())
    back = from_f32(to_f32(t), "BF16")
    got = np.frombuffer(back.data, dtype="<u2")
    for p in range(65536):
        exp = p
        is_nan = (p & 0x7FFF) > 0x7F80
        if is_nan:
            exp = p | 0x0040  # narrowing quiets NaNs; quiet ones are unchanged
        assert got[p] == exp, f"pattern {p:#06x}"


@pytest.mark.parametrize(
    "f32_bits,bf16_bits",
    [
        (0x3F800000, 0x3F80),  # 1.0
        (0x3F808000, 0x3F80),  # halfway, rounds down to even mantissa
        (0x3F818000, 0x3F82),  # halfway, rounds up to even mantissa
        (0x3F808001, 0x3F81),  # just above halfway
        (0x3F807FFF, 0x3F80),  # just below halfway
        (0x7F800000, 0x7F80),  # +inf
        (0xFF800000, 0xFF80),  # -inf
        (0x7F7FFFFF, 0x7F80),  # f32 max rounds up to inf
        (0x00000000, 0x0000),  # +0
        (0x80000000, 0x8000),  # -0
        (0x00008000, 0x0000),  # subnormal halfway to even
        (0x00018000, 0x0002),  # subnormal halfway to even (up)
        (0x7FC00000, 0x7FC0),  # quiet NaN
        (0x7F800001, 0x7FC0),  # signaling NaN gets quieted
        (0xFF800001, 0xFFC0),  # quieting preserves the sign
    ],
)
def test_f32_to_bf16_round_to_nearest_even(f32_bits, bf16_bits):
    data = struct.pack("<I", f32_bits)
    t = Tensor("F32", (1,), data)
    out = from_f32(t, "BF16")
    (got,) = struct.unpack("<H", out.data)
    assert got == bf16_bits


def test_f32_to_bf16_picks_nearer_candidate(rng):
    vals = rng.standard_normal(2000).astype(np.float32) * np.float32(10.0)
    out = from_f32(Tensor("F32", (2000,), vals.tobytes()), "BF16")
    got = np.frombuffer(out.data, dtype="<u2")
    for v, g in zip(vals, got):
        bits = struct.unpack("<I", struct.pack("<f", float(v)))[0]
        lo = bits >> 16
        hi = (lo + 1) & 0xFFFF
        dlo = abs(float(v) - bf16_oracle_f32(lo))
        dhi = abs(bf16_oracle_f32(hi) - float(v))
        if dlo < dhi:
            assert g == lo
        elif dhi < dlo:
            assert g == hi
        else:
            assert g in (lo, hi) and g % 2 == 0


def test_from_f32_rejects_non_f32_and_unknown_target():
    t = Tensor("BF16", (1,), b"\x80\x3f")
    with pytest.raises(ValueError):
        from_f32(t, "BF16")
    f = Tensor("F32", (1,), struct.pack("<f", 1.0))
    with pytest.raises(ValueError):
        from_f32(f, "F64")


def test_tensor_from_array_converts_through_f32():
    arr = np.array([1.0, 2.5, -3.25], dtype=np.float64)
    t = tensor_from_array(arr)
    assert t.dtype == "F32" and t.shape == (3,)
    assert np.frombuffer(t.data, dtype="<f4").tolist() == [1.0, 2.5, -3.25]
    tb = tensor_from_array(arr, "BF16")
    assert tb.dtype == "BF16" and tb.nbytes == 6


# ---------------------------------------------------------------------------
# Tensor / Checkpoint invariants


def test_tensor_validates_payload_length_and_shape():
    with pytest.raises(ValueError):
        Tensor("F32", (2,), b"\x00" * 7)
    with pytest.raises(ValueError):
        Tensor("F32", (-1,), b"")
    with pytest.raises(ValueError):
        Tensor("F16", (1,), b"\x00\x00")
    with pytest.raises(ValueError):
        Tensor("F32", (True,), b"\x00" * 4)


def test_scalar_and_empty_tensors():
    s = Tensor("F32", (), struct.pack("<f", 7.0))
    assert s.numel == 1 and s.nbytes == 4
    e = Tensor("F32", (3, 0), b"")
    assert e.numel == 0 and e.nbytes == 0


def test_checkpoint_names_sorted_and_duplicates_rejected():
    ck = Checkpoint()
    ck.add("b", tensor_from_array(np.zeros(1, dtype=np.float32)))
    ck.add("a", tensor_from_array(np.zeros(1, dtype=np.float32)))
    assert ck.names == ["a", "b"]
    with pytest.raises(ValueError):
        ck.add("a", tensor_from_array(np.zeros(1, dtype=np.float32)))
    with pytest.raises(CheckpointFormatError):
        ck.add("", tensor_from_array(np.zeros(1, dtype=np.float32)))
    with pytest.raises(CheckpointFormatError):
        ck.add("x\x00y", tensor_from_array(np.zeros(1, dtype=np.float32)))


# ---------------------------------------------------------------------------
# write path: canonical bytes


def test_write_known_answer(tmp_path):
    ck = Checkpoint.from_arrays({"a": np.array([1.0, 2.0], dtype=np.float32)})
    p = tmp_path / "one.safetensors"
    write_checkpoint(ck, p)
    header = b'{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}'
    header += b" " * (-len(header) % 8)
    want = struct.pack("<Q", len(header)) + header + struct.pack("<ff", 1.0, 2.0)
    assert p.read_bytes() == want


def test_write_deterministic_across_insertion_order(tmp_path, rng):
    arrays = {n: rng.standard_normal(s).astype(np.float32) for n, s in SMALL_SHAPES.items()}
    ck1 = Checkpoint.from_arrays(arrays, metadata={"k": "v", "a": "b"})
    ck2 = Checkpoint(metadata={"a": "b", "k": "v"})
    for name in reversed(list(arrays)):
        ck2.add(name, tensor_from_array(arrays[name]))
    p1, p2 = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_checkpoint(ck1, p1)
    write_checkpoint(ck2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_written_layout_is_canonical(tmp_path, rng):
    ck = random_checkpoint(rng, SMALL_SHAPES)
    ck.metadata["origin"] = "test"
    p = tmp_path / "c.safetensors"
    write_checkpoint(ck, p)
    raw = p.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    assert n % 8 == 0
    blob = raw[8 : 8 + n]
    assert blob == blob.rstrip(b" ") + b" " * (len(blob) - len(blob.rstrip(b" ")))
    header = json.loads(blob.decode("utf-8"))
    keys = list(header)
    assert keys[0] == "__metadata__"
    assert keys[1:] == sorted(keys[1:])
    pos = 0
    for name in keys[1:]:
        b, e = header[name]["data_offsets"]
        assert b == pos  # contiguous ascending payloads
        pos = e
    assert 8 + n + pos == len(raw)


def test_empty_checkpoint_roundtrip(tmp_path):
    p = tmp_path / "empty.safetensors"
    write_checkpoint(Checkpoint(), p)
    ck = load_checkpoint(p)
    assert len(ck) == 0 and ck.metadata == {}


def test_roundtrip_values_and_metadata(tmp_path, rng):
    ck = random_checkpoint(rng, SMALL_SHAPES, dtype="BF16")
    ck.metadata["tag"] = "値"
    p = tmp_path / "rt.safetensors"
    write_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back.names == ck.names
    assert back.metadata == {"tag": "値"}
    for name in ck.names:
        assert back.dtype(name) == "BF16"
        assert back[name].data == ck[name].data
        assert back.shape(name) == ck.shape(name)


def test_unicode_tensor_names_roundtrip(tmp_path):
    ck = Checkpoint.from_arrays({"重み.0": np.array([1.5], dtype=np.float32)})
    p = tmp_path / "u.safetensors"
    write_checkpoint(ck, p)
    assert load_checkpoint(p).names == ["重み.0"]


# ---------------------------------------------------------------------------
# writer discipline


def test_writer_rejects_out_of_order_and_mismatched_puts(tmp_path):
    specs = [("a", "F32", (1,)), ("b", "F32", (1,))]
    w = CheckpointWriter(tmp_path / "w.safetensors", specs)
    t = tensor_from_array(np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError, match="out-of-order"):
        w.put("b", t)
    with pytest.raises(ValueError, match="schema"):
        w.put("a", tensor_from_array(np.zeros(2, dtype=np.float32)))
    w.put("a", t)
    w.put("b", t)
    with pytest.raises(ValueError):
        w.put("c", t)
    w.close()


def test_writer_close_requires_all_tensors(tmp_path):
    w = CheckpointWriter(tmp_path / "w.safetensors", [("a", "F32", (1,))])
    assert w.pending == ["a"]
    with pytest.raises(ValueError, match="incomplete"):
        w.close()


def test_writer_rejects_bad_specs(tmp_path):
    with pytest.raises(ValueError):
        CheckpointWriter(tmp_path / "x", [("a", "F32", (1,)), ("a", "F32", (1,))])
    with pytest.raises(ValueError):
        CheckpointWriter(tmp_path / "x", [("a", "F64", (1,))])
    with pytest.raises(ValueError):
        CheckpointWriter(tmp_path / "x", [("a", "F32", (-2,))])


def test_writer_abort_removes_partial_file(tmp_path):
    path = tmp_path / "part.safetensors"
    w = CheckpointWriter(path, [("a", "F32", (1,))])
    assert path.exists()
    w.abort()
    assert not path.exists()
    w.abort()  # idempotent


def test_writer_context_aborts_on_exception(tmp_path):
    path = tmp_path / "ctx.safetensors"
    with pytest.raises(RuntimeError):
        with CheckpointWriter(path, [("a", "F32", (1,))]):
            raise RuntimeError("boom")
    assert not path.exists()


# ---------------------------------------------------------------------------
# read path: lazy access


def test_reader_is_lazy_and_counts_payload_bytes(tmp_path, rng):
    ck = random_checkpoint(rng, SMALL_SHAPES)
    p = tmp_path / "lazy.safetensors"
    write_checkpoint(ck, p)
    with read_checkpoint(p) as r:
        (n,) = struct.unpack("<Q", p.read_bytes()[:8])
        assert r._file.tell() == 8 + n  # only the header was consumed at open
        assert r.payload_bytes_read == 0
        arr = r.get_array("layer.0.w")
        assert r.payload_bytes_read == 16 * 4
        assert np.array_equal(arr, ck.get_array("layer.0.w"))
        assert r.nbytes("embed.w") == 4 * 8 * 4
        assert r.dtype("head.b") == "F32" and r.shape("head.b") == (3, 2, 2)
        assert "embed.w" in r and len(r) == 3


def test_reader_concurrent_reads_share_handle(tmp_path, rng):
    from concurrent.futures import ThreadPoolExecutor

    ck = random_checkpoint(rng, {f"t{i:02d}": (64,) for i in range(20)})
    p = tmp_path / "mt.safetensors"
    write_checkpoint(ck, p)
    with read_checkpoint(p) as r:
        with ThreadPoolExecutor(max_workers=8) as pool:
            arrays = list(pool.map(r.get_array, r.names))
    for name, arr in zip(sorted(ck.names), arrays):
        assert np.array_equal(arr, ck.get_array(name))


# ---------------------------------------------------------------------------
# format conformance: hand-built files


def entry(dtype: str, shape: list[int], begin: int, end: int) -> dict:
    return {"dtype": dtype, "shape": shape, "data_offsets": [begin, end]}


def test_read_handcrafted_minimal_file(tmp_path):
    payload = struct.pack("<ff", 3.5, -1.25)
    path = write_raw(tmp_path, craft({"w": entry("F32", [2], 0, 8)}, payload))
    ck = load_checkpoint(path)
    assert ck.get_array("w").tolist() == [3.5, -1.25]


def test_read_tolerates_unpadded_header_and_gaps(tmp_path):
    # header length not a multiple of 8, and a 4-byte hole before the payload
    payload = b"\x00" * 4 + struct.pack("<f", 2.0)
    path = write_raw(tmp_path, craft({"w": entry("F32", [1], 4, 8)}, payload, pad=False))
    assert load_checkpoint(path).get_array("w").tolist() == [2.0]


def test_read_tolerates_trailing_unreferenced_bytes(tmp_path):
    payload = struct.pack("<f", 1.0) + b"junk"
    path = write_raw(tmp_path, craft({"w": entry("F32", [1], 0, 4)}, payload))
    assert load_checkpoint(path).get_array("w").tolist() == [1.0]


def test_read_metadata_only_file(tmp_path):
    path = write_raw(tmp_path, craft({"__metadata__": {"a": "b"}}, b""))
    ck = load_checkpoint(path)
    assert len(ck) == 0 and ck.metadata == {"a": "b"}


def test_read_zero_element_tensor(tmp_path):
    path = write_raw(tmp_path, craft({"w": entry("F32", [0, 3], 0, 0)}, b""))
    assert load_checkpoint(path).get_array("w").shape == (0, 3)


def test_read_scalar_tensor(tmp_path):
    path = write_raw(tmp_path, craft({"s": entry("F32", [], 0, 4)}, struct.pack("<f", 9.0)))
    arr = load_checkpoint(path).get_array("s")
    assert arr.shape == () and arr == np.float32(9.0)


@pytest.mark.parametrize(
    "data,msg",
    [
        (b"", "no 8-byte header length"),
        (b"\x01\x02\x03", "no 8-byte header length"),
        (struct.pack("<Q", 64) + b"{}", "truncated"),
        (struct.pack("<Q", 200 * 1024 * 1024), "sanity limit"),
        (craft({"w": entry("F32", [2], 0, 8)}, b"\x00" * 4), "out of bounds"),
        (craft({"w": entry("F32", [2], 0, 4)}, b"\x00" * 4), "do not match"),
        (craft({"w": entry("F32", [2], 4, 0)}, b"\x00" * 8), "data_offsets"),
        (craft({"w": entry("F64", [1], 0, 8)}, b"\x00" * 8), "unknown dtype"),
        (craft({"w": entry("F32", [-1], 0, 4)}, b"\x00" * 4), "invalid shape"),
        (craft({"w": entry("F32", [1], 0, 4), "x": entry("F32", [1], 2, 6)}, b"\x00" * 8), "overlapping"),
        (craft({"w": {"dtype": "F32", "shape": [1]}}, b"\x00" * 4), "exactly"),
        (craft({"w": entry("F32", [1], 0, 4), "__metadata__": {"k": 3}}, b"\x00" * 4), "__metadata__"),
        (craft([1, 2], b""), "must be an object"),
        (struct.pack("<Q", 8) + b"not-json", "malformed header JSON"),
        (struct.pack("<Q", 8) + b"\xff\xfe\xfd\xfc\xfb\xfa\xf9\xf8", "malformed header JSON"),
        (craft({"": entry("F32", [1], 0, 4)}, b"\x00" * 4), "non-empty"),
    ],
)
def test_read_rejects_malformed_files(tmp_path, data, msg):
    path = write_raw(tmp_path, data)
    with pytest.raises(CheckpointFormatError, match=msg):
        CheckpointReader(path)


def test_read_rejects_duplicate_header_keys(tmp_path):
    inner = json.dumps(entry("F32", [1], 0, 4), separators=(",", ":"))
    blob = ('{"w":%s,"w":%s}' % (inner, inner)).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    path = write_raw(tmp_path, struct.pack("<Q", len(blob)) + blob + b"\x00" * 4)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        CheckpointReader(path)


def test_read_rejects_overlap_even_with_equal_begins(tmp_path):
    data = craft(
        {"a": entry("F32", [1], 0, 4), "b": entry("F32", [2], 0, 8)}, b"\x00" * 8
    )
    with pytest.raises(CheckpointFormatError, match="overlapping"):
        CheckpointReader(write_raw(tmp_path, data))


def test_short_read_detected_when_file_shrinks(tmp_path):
    ck = Checkpoint.from_arrays({"a": np.ones(4, dtype=np.float32)})
    p = tmp_path / "shrink.safetensors"
    write_checkpoint(ck, p)
    r = read_checkpoint(p)
    os.truncate(p, os.path.getsize(p) - 8)
    with pytest.raises(CheckpointFormatError, match="short read"):
        r.get_tensor("a")
    r.close()


# ---------------------------------------------------------------------------
# independent implementations agree


def independent_parse(path: str) -> dict[str, tuple[str, tuple[int, ...], bytes]]:
    """Minimal from-scratch reader used to cross-check the library."""
    with open(path, "rb") as f:
        raw = f.read()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    header.pop("__metadata__", None)
    data = raw[8 + n :]
    out = {}
    for name, info in header.items():
        b, e = info["data_offsets"]
        out[name] = (info["dtype"], tuple(info["shape"]), data[b:e])
    return out


def test_independent_parser_agrees_with_reader(tmp_path, rng):
    for dtype in ("F32", "BF16"):
        ck = random_checkpoint(rng, SMALL_SHAPES, dtype=dtype)
        p = tmp_path / f"x_{dtype}.safetensors"
        write_checkpoint(ck, p)
        theirs = independent_parse(str(p))
        with read_checkpoint(p) as r:
            assert sorted(theirs) == r.names
            for name in r.names:
                dt, shape, data = theirs[name]
                t = r.get_tensor(name)
                assert (dt, shape, data) == (t.dtype, t.shape, t.data)


def test_safetensors_library_reads_our_files(tmp_path, rng):
    st = pytest.importorskip("safetensors.numpy")
    ck = random_checkpoint(rng, SMALL_SHAPES)
    ck.metadata["note"] = "interop"
    p = tmp_path / "ours.safetensors"
    write_checkpoint(ck, p)
    theirs = st.load_file(str(p))
    assert sorted(theirs) == ck.names
    for name, arr in theirs.items():
        assert arr.dtype == np.float32
        assert np.array_equal(arr, ck.get_array(name))


def test_we_read_safetensors_library_files(tmp_path, rng):
    st = pytest.importorskip("safetensors.numpy")
    arrays = {n: rng.standard_normal(s).astype(np.float32) for n, s in SMALL_SHAPES.items()}
    p = tmp_path / "theirs.safetensors"
    st.save_file(arrays, str(p), metadata={"source": "library"})
    ck = load_checkpoint(p)
    assert ck.metadata == {"source": "library"}
    for name, arr in arrays.items():
        assert np.array_equal(ck.get_array(name), arr)


# ---------------------------------------------------------------------------
# compat checks


def test_validate_compat_reports_mismatches(rng):
    a = random_checkpoint(rng, {"x": (2, 2), "y": (3,)})
    b = random_checkpoint(rng, {"x": (2, 2), "y": (4,)})
    c = random_checkpoint(rng, {"x": (2, 2)})
    rep = validate_compat([a, b, c])
    assert not rep.ok
    assert rep.shared_names == {"x"}
    assert ("y", "shape-differs") in rep.mismatches
    assert ("y", "missing-in-model-2") in rep.mismatches


def test_validate_compat_dtype_mismatch(rng):
    a = Checkpoint.from_arrays({"x": np.ones(2, dtype=np.float32)}, "F32")
    b = Checkpoint.from_arrays({"x": np.ones(2, dtype=np.float32)}, "BF16")
    rep = validate_compat([a, b])
    assert rep.mismatches == [("x", "dtype-differs")]


def test_validate_compat_ok_and_mixed_handles(tmp_path, rng):
    ck = random_checkpoint(rng, SMALL_SHAPES)
    p = tmp_path / "h.safetensors"
    write_checkpoint(ck, p)
    with read_checkpoint(p) as r:
        rep = validate_compat([ck, r])
        assert rep.ok and rep.shared_names == set(SMALL_SHAPES)
    with pytest.raises(ValueError):
        validate_compat([])
