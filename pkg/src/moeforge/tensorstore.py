"""Bit-exact reading and writing of checkpoints in the safetensors container.

Layout: bytes 0-7 hold the header length N as unsigned 64-bit little-endian,
bytes 8..8+N hold a UTF-8 JSON object mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` (plus an optional ``__metadata__``
string map), and the remainder is raw little-endian tensor data addressed by
``data_offsets`` relative to the end of the header.

Writing is canonical: tensor names are laid out in lexicographic order and
the header JSON is emitted with sorted keys, so identical maps produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

# Storage dtypes; F16/BF16 are kept bit-exact and promoted to F32 for compute.
DTYPE_WIDTH = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}

_NP_STORAGE = {"F64": np.float64, "F32": np.float32, "F16": np.float16}

MAX_HEADER_BYTES = 100 * 1024 * 1024  # bound adversarial inputs


@dataclass(frozen=True)
class TensorSpec:
    """Header entry for one tensor: dtype, shape, and its byte range in the
    data region."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    def nbytes(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n * DTYPE_WIDTH[self.dtype]


@dataclass
class TensorEntry:
    """One stored tensor: declared dtype, shape, and the raw little-endian
    bytes exactly as serialized."""

    dtype: str
    shape: tuple[int, ...]
    raw: bytes

    def to_array(self) -> np.ndarray:
        """Decode to a compute array: F64 stays F64, everything else is
        promoted to F32."""
        if self.dtype == "F64":
            arr = np.frombuffer(self.raw, dtype="<f8")
        elif self.dtype == "F32":
            arr = np.frombuffer(self.raw, dtype="<f4")
        elif self.dtype == "F16":
            arr = np.frombuffer(self.raw, dtype="<f2").astype(np.float32)
        elif self.dtype == "BF16":
            bits = np.frombuffer(self.raw, dtype="<u2").astype(np.uint32) << 16
            arr = bits.view(np.float32)
        else:
            raise FormatError(f"unsupported dtype {self.dtype!r}")
        return arr.reshape(self.shape).copy()

    @staticmethod
    def from_array(arr: np.ndarray, dtype: str | None = None) -> "TensorEntry":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = "F64" if arr.dtype == np.float64 else "F32"
        if dtype == "BF16":
            f32 = np.ascontiguousarray(arr, dtype="<f4")
            raw = (f32.view(np.uint32) >> 16).astype("<u2").tobytes()
        elif dtype in _NP_STORAGE:
            raw = np.ascontiguousarray(arr.astype(_NP_STORAGE[dtype])).astype(
                f"<{np.dtype(_NP_STORAGE[dtype]).str[1:]}"
            ).tobytes()
        else:
            raise FormatError(f"unsupported dtype {dtype!r}")
        return TensorEntry(dtype, tuple(int(s) for s in arr.shape), raw)


class TensorMap:
    """Named tensor collection plus string metadata; the unit of composition.

    Tensors are stored as raw bytes with their declared dtype, so a
    load/save round trip preserves every byte. Instances compare equal when
    all entries and metadata match bit-for-bit.
    """

    def __init__(self, metadata: dict[str, str] | None = None):
        self._entries: dict[str, TensorEntry] = {}
        self.metadata: dict[str, str] = dict(metadata or {})

    def put(self, name: str, arr: np.ndarray, dtype: str | None = None) -> None:
        if not name:
            raise FormatError("tensor name must be non-empty")
        self._entries[name] = TensorEntry.from_array(arr, dtype)

    def put_entry(self, name: str, entry: TensorEntry) -> None:
        if not name:
            raise FormatError("tensor name must be non-empty")
        self._entries[name] = entry

    def array(self, name: str) -> np.ndarray:
        return self._entries[name].to_array()

    def entry(self, name: str) -> TensorEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def drop(self, name: str) -> None:
        del self._entries[name]

    def copy(self) -> "TensorMap":
        out = TensorMap(self.metadata)
        out._entries = dict(self._entries)
        return out

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        return self.metadata == other.metadata and self._entries == other._entries

    def __repr__(self) -> str:
        return f"TensorMap({len(self._entries)} tensors, {len(self.metadata)} metadata keys)"


def _parse_header(blob: bytes, data_size: int) -> tuple[list[TensorSpec], dict[str, str]]:
    def reject_dupes(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise FormatError(f"duplicate tensor name {k!r} in header")
            d[k] = v
        return d

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=reject_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    specs = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise FormatError(f"tensor {name!r}: header entry must be an object")
        try:
            dtype = info["dtype"]
            shape = info["shape"]
            start, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"tensor {name!r}: malformed header entry") from e
        if dtype not in DTYPE_WIDTH:
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise FormatError(f"tensor {name!r}: shape must be non-negative integers")
        spec = TensorSpec(name, dtype, tuple(shape), (int(start), int(end)))
        if start < 0 or end < start or end > data_size:
            raise FormatError(f"tensor {name!r}: byte range out of bounds")
        if end - start != spec.nbytes():
            raise FormatError(
                f"tensor {name!r}: byte range length {end - start} does not match "
                f"shape {shape} x {dtype}"
            )
        specs.append(spec)

    # Non-empty ranges must tile the data region exactly: no overlaps, no gaps.
    cursor = 0
    for spec in sorted((s for s in specs if s.byte_range[0] != s.byte_range[1]),
                       key=lambda s: s.byte_range):
        start, end = spec.byte_range
        if start < cursor:
            raise FormatError(f"tensor {spec.name!r}: byte range overlaps another tensor")
        if start > cursor:
            raise FormatError(f"tensor {spec.name!r}: gap in data region before offset {start}")
        cursor = end
    if cursor != data_size:
        raise FormatError(f"data region has {data_size - cursor} trailing unaddressed bytes")

    return specs, dict(metadata)


def load_checkpoint(path: str) -> TensorMap:
    """Read a checkpoint file into a TensorMap.

    Raises FormatError on any structural defect: truncated or oversized
    header, invalid JSON, unsupported dtype, or tensor byte ranges that
    overlap, leave gaps, or fall outside the data region.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError("truncated header: file shorter than 8 bytes")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > MAX_HEADER_BYTES:
        raise FormatError(f"header length {header_len} exceeds {MAX_HEADER_BYTES} byte cap")
    if 8 + header_len > len(blob):
        raise FormatError("truncated header: declared length exceeds file size")

    data = blob[8 + header_len :]
    specs, metadata = _parse_header(blob[8 : 8 + header_len], len(data))

    out = TensorMap(metadata)
    for spec in specs:
        start, end = spec.byte_range
        out.put_entry(spec.name, TensorEntry(spec.dtype, spec.shape, data[start:end]))
    return out


def save_checkpoint(tmap: TensorMap, path: str) -> None:
    """Write a TensorMap to a checkpoint file with canonical byte layout."""
    names = sorted(tmap.names())
    header: dict[str, object] = {}
    if tmap.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in tmap.metadata.items()}

    cursor = 0
    blobs = []
    for name in names:
        e = tmap.entry(name)
        if len(e.raw) != TensorSpec(name, e.dtype, e.shape, (0, 0)).nbytes():
            raise FormatError(f"tensor {name!r}: raw size does not match shape/dtype")
        header[name] = {
            "dtype": e.dtype,
            "shape": list(e.shape),
            "data_offsets": [cursor, cursor + len(e.raw)],
        }
        blobs.append(e.raw)
        cursor += len(e.raw)

    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for b in blobs:
            f.write(b)
