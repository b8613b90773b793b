"""Checkpoint storage: a safetensors-compatible binary tensor format.

File layout (bit-exact):

* bytes 0-7: unsigned 64-bit little-endian header length N
* bytes 8 .. 8+N: UTF-8 JSON object mapping tensor name ->
  ``{"dtype": "F32"|"BF16", "shape": [...], "data_offsets": [begin, end]}``,
  plus an optional ``"__metadata__"`` string-to-string map; offsets are
  relative to byte 8+N
* remainder: contiguous raw little-endian tensor payloads

Writes are canonical: tensors serialized in lexicographic name order with
contiguous ascending offsets and the header space-padded to a multiple of
8 bytes, so equal checkpoints produce byte-identical files.

Only F32 and BF16 payloads are supported; all arithmetic elsewhere in the
package runs on float32, and the conversions live here. BF16 -> F32 is
exact (zero-extended mantissa); F32 -> BF16 rounds to nearest-even.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DTYPE_WIDTHS",
    "Tensor",
    "Checkpoint",
    "CheckpointReader",
    "CheckpointWriter",
    "CompatReport",
    "CheckpointFormatError",
    "read_checkpoint",
    "load_checkpoint",
    "write_checkpoint",
    "validate_compat",
    "to_f32",
    "from_f32",
    "tensor_from_array",
]

DTYPE_WIDTHS = {"F32": 4, "BF16": 2}

_MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file violates the on-disk format."""


def _numel(shape: Sequence[int]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise CheckpointFormatError("tensor names must be non-empty strings")
    if "\x00" in name or not name.isprintable():
        raise CheckpointFormatError(f"tensor name {name!r} contains non-printable characters")


@dataclass(frozen=True)
class Tensor:
    """One named weight: dtype tag, shape, and raw little-endian payload."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if self.dtype not in DTYPE_WIDTHS:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if any((not isinstance(d, int)) or isinstance(d, bool) or d < 0 for d in self.shape):
            raise ValueError(f"invalid shape {self.shape!r}")
        expect = self.numel * DTYPE_WIDTHS[self.dtype]
        if len(self.data) != expect:
            raise ValueError(
                f"payload of {len(self.data)} bytes does not match "
                f"shape {self.shape} x {self.dtype} ({expect} bytes)"
            )

    @property
    def numel(self) -> int:
        return _numel(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)


def _bf16_bits_to_f32(u16: np.ndarray) -> np.ndarray:
    return (u16.astype(np.uint32) << np.uint32(16)).view(np.float32)


def _f32_to_bf16_bits(f32: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(f32, dtype="<f4").view(np.uint32)
    # round to nearest, ties to even
    rounded = (bits + (np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1)))) >> np.uint32(16)
    nan = (bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    quiet = (bits >> np.uint32(16)) | np.uint32(0x0040)
    return np.where(nan, quiet, rounded).astype("<u2")


def to_f32(t: Tensor) -> Tensor:
    """Widen to F32. Exact for BF16 inputs; identity for F32."""
    if t.dtype == "F32":
        return t
    u16 = np.frombuffer(t.data, dtype="<u2")
    return Tensor("F32", t.shape, _bf16_bits_to_f32(u16).astype("<f4").tobytes())


def from_f32(t: Tensor, target: str) -> Tensor:
    """Narrow an F32 tensor to `target`, rounding to nearest-even for BF16."""
    if t.dtype != "F32":
        raise ValueError(f"from_f32 requires an F32 tensor, got {t.dtype}")
    if target == "F32":
        return t
    if target != "BF16":
        raise ValueError(f"unsupported target dtype {target!r}")
    f32 = np.frombuffer(t.data, dtype="<f4")
    return Tensor("BF16", t.shape, _f32_to_bf16_bits(f32).tobytes())


def tensor_from_array(arr: np.ndarray, dtype: str = "F32") -> Tensor:
    """Build a Tensor from a numpy array, converting through float32."""
    f32 = np.ascontiguousarray(arr, dtype="<f4")
    t = Tensor("F32", tuple(int(d) for d in f32.shape), f32.tobytes())
    return from_f32(t, dtype)


def _tensor_to_array(t: Tensor) -> np.ndarray:
    """Tensor payload as a float32 ndarray (read-only view for F32)."""
    if t.dtype == "F32":
        return np.frombuffer(t.data, dtype="<f4").reshape(t.shape)
    return _bf16_bits_to_f32(np.frombuffer(t.data, dtype="<u2")).reshape(t.shape)


class Checkpoint:
    """In-memory checkpoint: ordered name -> Tensor map plus metadata.

    Iteration and serialization order is always lexicographic by name,
    regardless of insertion order.
    """

    def __init__(
        self,
        tensors: dict[str, Tensor] | None = None,
        metadata: dict[str, str] | None = None,
    ) -> None:
        self._tensors: dict[str, Tensor] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for name, t in (tensors or {}).items():
            self.add(name, t)

    @classmethod
    def from_arrays(
        cls,
        arrays: dict[str, np.ndarray],
        dtypes: dict[str, str] | str = "F32",
        metadata: dict[str, str] | None = None,
    ) -> "Checkpoint":
        ck = cls(metadata=metadata)
        for name, arr in arrays.items():
            dt = dtypes if isinstance(dtypes, str) else dtypes.get(name, "F32")
            ck.add(name, tensor_from_array(arr, dt))
        return ck

    def add(self, name: str, tensor: Tensor) -> None:
        _check_name(name)
        if name in self._tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        self._tensors[name] = tensor

    @property
    def names(self) -> list[str]:
        return sorted(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def dtype(self, name: str) -> str:
        return self._tensors[name].dtype

    def shape(self, name: str) -> tuple[int, ...]:
        return self._tensors[name].shape

    def get_tensor(self, name: str) -> Tensor:
        return self._tensors[name]

    def get_array(self, name: str) -> np.ndarray:
        return _tensor_to_array(self._tensors[name])


def _parse_header(raw: bytes, data_size: int, path: str) -> tuple[dict, dict[str, str]]:
    def reject_dupes(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise CheckpointFormatError(f"{path}: duplicate tensor name {k!r} in header")
            d[k] = v
        return d

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_dupes)
    except CheckpointFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", getattr(e, "start", 0))
        raise CheckpointFormatError(f"{path}: malformed header JSON at byte {8 + pos}: {e}") from None
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header JSON must be an object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError(f"{path}: __metadata__ must map strings to strings")

    entries: dict[str, tuple[str, tuple[int, ...], int, int]] = {}
    for name, info in header.items():
        try:
            _check_name(name)
        except CheckpointFormatError as e:
            raise CheckpointFormatError(f"{path}: {e}") from None
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r}: entry must have exactly dtype/shape/data_offsets"
            )
        dtype = info["dtype"]
        if dtype not in DTYPE_WIDTHS:
            raise CheckpointFormatError(f"{path}: tensor {name!r}: unknown dtype {dtype!r}")
        shape = info["shape"]
        if not isinstance(shape, list) or any(
            (not isinstance(d, int)) or isinstance(d, bool) or d < 0 for d in shape
        ):
            raise CheckpointFormatError(f"{path}: tensor {name!r}: invalid shape {shape!r}")
        offs = info["data_offsets"]
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or any((not isinstance(o, int)) or isinstance(o, bool) or o < 0 for o in offs)
        ):
            raise CheckpointFormatError(f"{path}: tensor {name!r}: invalid data_offsets {offs!r}")
        begin, end = offs
        if begin > end or end > data_size:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r}: data_offsets [{begin}, {end}) out of bounds "
                f"(data region is {data_size} bytes; file truncated?)"
            )
        if end - begin != _numel(shape) * DTYPE_WIDTHS[dtype]:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r}: data_offsets [{begin}, {end}) do not match "
                f"shape {shape} x {dtype}"
            )
        entries[name] = (dtype, tuple(shape), begin, end)

    spans = sorted(
        ((b, e, n) for n, (_, _, b, e) in entries.items()), key=lambda s: (s[0], s[1])
    )
    for (b1, e1, n1), (b2, e2, n2) in zip(spans, spans[1:]):
        if b2 < e1:
            raise CheckpointFormatError(
                f"{path}: overlapping data_offsets: {n1!r} [{b1}, {e1}) and {n2!r} [{b2}, {e2})"
            )
    return entries, metadata


class CheckpointReader:
    """Lazy checkpoint handle: header parsed at open, payloads read on demand.

    Immutable after open and safe to share across threads; payload reads use
    positional I/O so distinct tensors may be loaded concurrently.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = str(path)
        self.payload_bytes_read = 0
        self._file = open(self.path, "rb")
        try:
            size = os.fstat(self._file.fileno()).st_size
            head = self._file.read(8)
            if len(head) < 8:
                raise CheckpointFormatError(f"{self.path}: truncated file: no 8-byte header length")
            (n,) = struct.unpack("<Q", head)
            if n > _MAX_HEADER_BYTES:
                raise CheckpointFormatError(f"{self.path}: header length {n} exceeds sanity limit")
            if 8 + n > size:
                raise CheckpointFormatError(
                    f"{self.path}: truncated file: header claims {n} bytes but only "
                    f"{size - 8} follow byte 8"
                )
            raw = self._file.read(n)
            self._data_start = 8 + n
            self._entries, self.metadata = _parse_header(raw, size - self._data_start, self.path)
        except Exception:
            self._file.close()
            raise

    @property
    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def dtype(self, name: str) -> str:
        return self._entries[name][0]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entries[name][1]

    def nbytes(self, name: str) -> int:
        _, _, begin, end = self._entries[name]
        return end - begin

    def get_tensor(self, name: str) -> Tensor:
        dtype, shape, begin, end = self._entries[name]
        data = os.pread(self._file.fileno(), end - begin, self._data_start + begin)
        if len(data) != end - begin:
            raise CheckpointFormatError(
                f"{self.path}: tensor {name!r}: short read at byte {self._data_start + begin}"
            )
        self.payload_bytes_read += len(data)
        return Tensor(dtype, shape, data)

    def get_array(self, name: str) -> np.ndarray:
        return _tensor_to_array(self.get_tensor(name))

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "CheckpointReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_checkpoint(path: str | os.PathLike) -> CheckpointReader:
    """Open a checkpoint for lazy per-tensor access."""
    return CheckpointReader(path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read a whole checkpoint into memory."""
    with read_checkpoint(path) as r:
        return Checkpoint({name: r.get_tensor(name) for name in r.names}, r.metadata)


def _encode_header(
    specs: Sequence[tuple[str, str, tuple[int, ...]]], metadata: dict[str, str] | None
) -> tuple[bytes, dict[str, tuple[int, int]]]:
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    offsets: dict[str, tuple[int, int]] = {}
    pos = 0
    for name, dtype, shape in specs:
        size = _numel(shape) * DTYPE_WIDTHS[dtype]
        offsets[name] = (pos, pos + size)
        header[name] = {
            "dtype": dtype,
            "shape": list(shape),
            "data_offsets": [pos, pos + size],
        }
        pos += size
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(blob) % 8:
        blob += b" " * (8 - len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob, offsets


class CheckpointWriter:
    """Streaming writer: header up front, payloads appended in canonical order.

    The full (name, dtype, shape) schema must be known at open; `put` must
    then be called once per tensor in lexicographic name order. Single
    writer per output file.
    """

    def __init__(
        self,
        path: str | os.PathLike,
        specs: Iterable[tuple[str, str, tuple[int, ...]]],
        metadata: dict[str, str] | None = None,
    ) -> None:
        self.path = str(path)
        ordered = sorted(specs, key=lambda s: s[0])
        seen: set[str] = set()
        for name, dtype, shape in ordered:
            _check_name(name)
            if name in seen:
                raise ValueError(f"duplicate tensor name {name!r}")
            seen.add(name)
            if dtype not in DTYPE_WIDTHS:
                raise ValueError(f"unsupported dtype {dtype!r}")
            if any((not isinstance(d, int)) or isinstance(d, bool) or d < 0 for d in shape):
                raise ValueError(f"invalid shape {shape!r} for tensor {name!r}")
        self._specs = [(n, d, tuple(s)) for n, d, s in ordered]
        self._next = 0
        header, _ = _encode_header(self._specs, metadata)
        self._file = open(self.path, "wb")
        self._file.write(header)

    @property
    def pending(self) -> list[str]:
        return [n for n, _, _ in self._specs[self._next:]]

    def put(self, name: str, tensor: Tensor) -> None:
        if self._next >= len(self._specs):
            raise ValueError("all tensors already written")
        want_name, want_dtype, want_shape = self._specs[self._next]
        if name != want_name:
            raise ValueError(f"out-of-order write: expected {want_name!r}, got {name!r}")
        if tensor.dtype != want_dtype or tensor.shape != want_shape:
            raise ValueError(
                f"tensor {name!r} is {tensor.dtype}{tensor.shape}, "
                f"schema says {want_dtype}{want_shape}"
            )
        self._file.write(tensor.data)
        self._next += 1

    def close(self) -> None:
        try:
            if self._next != len(self._specs):
                raise ValueError(f"checkpoint incomplete: {self.pending} not written")
        finally:
            self._file.close()

    def abort(self) -> None:
        """Close and delete the partial output; safe to call repeatedly."""
        self._file.close()
        try:
            os.unlink(self.path)
        except OSError:
            pass

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Serialize a checkpoint; equal inputs produce byte-identical files."""
    specs = [(n, ckpt.dtype(n), ckpt.shape(n)) for n in ckpt.names]
    with CheckpointWriter(path, specs, ckpt.metadata) as w:
        for name in ckpt.names:
            w.put(name, ckpt.get_tensor(name))


@dataclass
class CompatReport:
    """Name/shape/dtype agreement across checkpoints, judged against the first."""

    shared_names: set[str] = field(default_factory=set)
    mismatches: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def validate_compat(ckpts: Sequence[Checkpoint | CheckpointReader]) -> CompatReport:
    """Compare checkpoints tensor-by-tensor; disagreements are data, not errors."""
    if not ckpts:
        raise ValueError("validate_compat requires at least one checkpoint")
    name_sets = [set(c.names) for c in ckpts]
    shared = set.intersection(*name_sets)
    first = ckpts[0]
    mismatches: set[tuple[str, str]] = set()
    all_names = set.union(*name_sets)
    for name in all_names:
        for k, c in enumerate(ckpts):
            if name not in name_sets[k]:
                mismatches.add((name, f"missing-in-model-{k}"))
        if name not in name_sets[0]:
            continue
        for k, c in enumerate(ckpts[1:], start=1):
            if name not in name_sets[k]:
                continue
            if c.shape(name) != first.shape(name):
                mismatches.add((name, "shape-differs"))
            if c.dtype(name) != first.dtype(name):
                mismatches.add((name, "dtype-differs"))
    return CompatReport(shared_names=shared, mismatches=sorted(mismatches))
