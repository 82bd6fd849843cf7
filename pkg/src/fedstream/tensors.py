"""Named-tensor containers and their binary serialization.

FTNS format (all integers little-endian):

- Magic ``b"FTNS"`` (4 bytes)
- Version (u16, currently 1)
- Entry count (u32)

per entry:

- name_len (u16), name (UTF-8 bytes)
- dtype (u8): 0=fp32, 1=fp16, 2=bf16, 3=u8
- ndim (u8), then ndim extents (u64 each)
- data_len (u64), raw tensor bytes (little-endian element order)

Tensors are inert byte containers; ``Tensor.to_f32()`` / ``Tensor.from_f32()``
give numpy views for the pieces of the system that need arithmetic.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Iterator, Optional

import numpy as np

FTNS_MAGIC = b"FTNS"
FTNS_VERSION = 1
FTNS_HEADER = struct.Struct("<4sHI")  # magic, version, entry_count

_ENTRY_FIXED = struct.Struct("<H")  # name_len; the rest is variable


class SpecError(ValueError):
    """Invalid model spec (duplicate names, bad counts, unknown dtype)."""


class FormatError(ValueError):
    """Malformed FTNS byte stream."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DType(enum.IntEnum):
    FP32 = 0
    FP16 = 1
    BF16 = 2
    U8 = 3

    @property
    def width(self) -> int:
        return _DTYPE_WIDTH[self]

    @classmethod
    def from_name(cls, name: str) -> "DType":
        try:
            return _DTYPE_NAMES[name.lower()]
        except KeyError:
            raise SpecError(f"unknown dtype {name!r}") from None

    @property
    def name_lower(self) -> str:
        return self.name.lower()


_DTYPE_WIDTH = {DType.FP32: 4, DType.FP16: 2, DType.BF16: 2, DType.U8: 1}
_DTYPE_NAMES = {"fp32": DType.FP32, "fp16": DType.FP16, "bf16": DType.BF16, "u8": DType.U8}


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even truncation of fp32 to bf16, as u16 bit patterns.

    Finite values that would overflow to inf are cropped to the largest
    finite bf16 magnitude (0x7F7F).
    """
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounded = bits + (0x7FFF + ((bits >> 16) & 1))
    out = (rounded >> 16).astype(np.uint16)
    # crop finite inputs that rounded up into the inf encoding
    overflowed = ((out & 0x7FFF) == 0x7F80) & np.isfinite(values)
    out[overflowed] = (out[overflowed] & 0x8000) | 0x7F7F
    return out


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    """Exact widening of bf16 bit patterns to fp32."""
    return (bits.astype(np.uint32) << 16).view(np.float32)


@dataclass(frozen=True)
class Tensor:
    """Contiguous little-endian bytes plus dtype/shape.

    ``data is None`` marks an unmaterialized tensor: shape and dtype are
    known (so size accounting works) but there are no bytes to serialize
    or compute with.
    """

    dtype: DType
    shape: tuple[int, ...]
    data: Optional[bytes] = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative extent in shape {self.shape}")
        if self.data is not None and len(self.data) != self.nbytes:
            raise ValueError(
                f"data length {len(self.data)} != {self.element_count} elements "
                f"x {self.dtype.width} bytes"
            )

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.element_count * self.dtype.width

    @property
    def materialized(self) -> bool:
        return self.data is not None

    def to_f32(self) -> np.ndarray:
        """Decode to a float32 array of ``shape`` (exact for all dtypes but u8)."""
        if self.data is None:
            raise ValueError("unmaterialized tensor has no data")
        buf = np.frombuffer(self.data, dtype=np.uint8)
        if self.dtype == DType.FP32:
            arr = buf.view(np.dtype("<f4")).astype(np.float32, copy=False)
        elif self.dtype == DType.FP16:
            arr = buf.view(np.dtype("<f2")).astype(np.float32)
        elif self.dtype == DType.BF16:
            arr = bf16_bits_to_f32(buf.view(np.dtype("<u2")))
        else:
            arr = buf.astype(np.float32)
        return arr.reshape(self.shape)

    @classmethod
    def from_f32(cls, values: np.ndarray) -> "Tensor":
        arr = np.ascontiguousarray(values, dtype="<f4")
        return cls(DType.FP32, arr.shape, arr.tobytes())

    def bytes_equal(self, other: "Tensor") -> bool:
        if self.dtype != other.dtype or self.shape != other.shape:
            return False
        if self.data is None or other.data is None:
            return self.data is other.data
        return memoryview(self.data) == memoryview(other.data)


class ParameterMap:
    """Ordered, uniquely named tensor collection; the unit of FL communication."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()):
        self._entries: dict[str, Tensor] = {}
        for name, tensor in entries:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if not name:
            raise SpecError("entry name must be non-empty")
        if name in self._entries:
            raise SpecError(f"duplicate entry name {name!r}")
        self._entries[name] = tensor

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def entries(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def names(self) -> list[str]:
        return list(self._entries)

    @property
    def materialized(self) -> bool:
        return all(t.materialized for t in self._entries.values())

    def equals(self, other: "ParameterMap") -> bool:
        if self.names() != other.names():
            return False
        return all(t.bytes_equal(other[n]) for n, t in self.entries())


@dataclass(frozen=True)
class LayerSpec:
    name: str
    elements: int
    dtype: DType = DType.FP32
    repeat: int = 1
    index_placeholder: Optional[str] = None

    def expand(self) -> Iterator[tuple[str, int, DType]]:
        if self.elements <= 0:
            raise SpecError(f"layer {self.name!r}: element count must be positive")
        if self.repeat < 1:
            raise SpecError(f"layer {self.name!r}: repeat must be >= 1")
        if self.repeat == 1 and not self.index_placeholder:
            yield self.name, self.elements, self.dtype
            return
        placeholder = self.index_placeholder or "{i}"
        if placeholder not in self.name:
            raise SpecError(
                f"layer {self.name!r}: repeat {self.repeat} needs placeholder {placeholder!r}"
            )
        for i in range(self.repeat):
            yield self.name.replace(placeholder, str(i)), self.elements, self.dtype


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    name: str = "model"

    def expand(self) -> list[tuple[str, int, DType]]:
        out: list[tuple[str, int, DType]] = []
        seen: set[str] = set()
        for layer in self.layers:
            for name, elements, dtype in layer.expand():
                if name in seen:
                    raise SpecError(f"duplicate expanded name {name!r}")
                seen.add(name)
                out.append((name, elements, dtype))
        return out

    def total_elements(self) -> int:
        return sum(e for _, e, _ in self.expand())

    def scaled(self, divisor: int) -> "ModelSpec":
        """Same layer structure with element counts divided (min 1 per layer)."""
        if divisor < 1:
            raise SpecError("scale divisor must be >= 1")
        layers = tuple(
            LayerSpec(l.name, max(1, l.elements // divisor), l.dtype, l.repeat, l.index_placeholder)
            for l in self.layers
        )
        return ModelSpec(layers, name=f"{self.name}/{divisor}")

    @classmethod
    def from_json(cls, text: str, name: str = "model") -> "ModelSpec":
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise SpecError("model spec must be a JSON array")
        layers = []
        for row in rows:
            layers.append(
                LayerSpec(
                    name=row["name"],
                    elements=int(row["elements"]),
                    dtype=DType.from_name(row.get("dtype", "fp32")),
                    repeat=int(row.get("repeat", 1)),
                    index_placeholder=row.get("index_placeholder"),
                )
            )
        return cls(tuple(layers), name=name)

    def to_json(self) -> str:
        rows = [
            {
                "name": l.name,
                "elements": l.elements,
                "dtype": l.dtype.name_lower,
                "repeat": l.repeat,
                "index_placeholder": l.index_placeholder,
            }
            for l in self.layers
        ]
        return json.dumps(rows, indent=2)


def load_bundled_spec(name: str = "llama3.2-1b") -> ModelSpec:
    text = resources.files("fedstream").joinpath(f"specs/{name}.json").read_text()
    return ModelSpec.from_json(text, name=name)


def load_spec_file(path: str) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelSpec.from_json(fh.read(), name=path)


def _fill_bytes(rng: np.random.Generator, elements: int, dtype: DType) -> bytes:
    """Seeded uniform values in [-1, 1) encoded at the layer dtype."""
    if dtype == DType.U8:
        return rng.integers(0, 256, size=elements, dtype=np.uint8).tobytes()
    values = (rng.random(elements, dtype=np.float32) * np.float32(2.0)) - np.float32(1.0)
    if dtype == DType.FP32:
        return values.astype("<f4").tobytes()
    if dtype == DType.FP16:
        return values.astype("<f2").tobytes()
    return f32_to_bf16_bits(values).astype("<u2").tobytes()


def build_synthetic_model(spec: ModelSpec, seed: int, materialize: bool = True) -> ParameterMap:
    """Expand ``spec`` into a ParameterMap.

    Materialized data comes from a counter-based generator (Philox) keyed by
    (seed, entry index), so equal (spec, seed) pairs are bit-identical and
    entries are independent of each other.  Unmaterialized models carry
    shape/dtype only and serve pure size accounting.
    """
    model = ParameterMap()
    for idx, (name, elements, dtype) in enumerate(spec.expand()):
        if materialize:
            key = np.array([seed, idx], dtype=np.uint64)
            rng = np.random.Generator(np.random.Philox(key=key))
            data = _fill_bytes(rng, elements, dtype)
        else:
            data = None
        model.add(name, Tensor(dtype, (elements,), data))
    return model


def model_size_bytes(model: ParameterMap) -> int:
    """Total tensor payload bytes; works on unmaterialized models."""
    return sum(t.nbytes for _, t in model.entries())


def pack_entry_header(name: str, tensor: Tensor) -> bytes:
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise FormatError("entry name too long", 0)
    parts = [
        struct.pack("<H", len(name_b)),
        name_b,
        struct.pack("<BB", int(tensor.dtype), len(tensor.shape)),
        struct.pack(f"<{len(tensor.shape)}Q", *tensor.shape) if tensor.shape else b"",
        struct.pack("<Q", tensor.nbytes),
    ]
    return b"".join(parts)


def unpack_entry_header(buf: bytes, offset: int = 0) -> tuple[str, DType, tuple[int, ...], int, int]:
    """Parse one entry header; returns (name, dtype, shape, data_len, next_offset)."""
    reader = _Reader(buf, offset)
    name_len = reader.u16("entry name length")
    name = reader.take(name_len, "entry name").decode("utf-8")
    dtype_code = reader.u8("dtype")
    if dtype_code not in DType._value2member_map_:
        raise FormatError(f"unknown dtype code {dtype_code}", reader.offset - 1)
    ndim = reader.u8("ndim")
    shape = tuple(reader.u64(f"extent {i}") for i in range(ndim))
    data_len = reader.u64("data length")
    expected = math.prod(shape) * DType(dtype_code).width
    if data_len != expected:
        raise FormatError(
            f"entry {name!r}: data length {data_len} != shape implies {expected}",
            reader.offset - 8,
        )
    return name, DType(dtype_code), shape, data_len, reader.offset


class _Reader:
    """Offset-tracking byte reader so parse failures report their position."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.buf):
            raise FormatError(f"truncated stream reading {what}", self.offset)
        chunk = self.buf[self.offset:end]
        self.offset = end
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def serialize_model(model: ParameterMap) -> bytes:
    """Whole-map FTNS blob (the one-shot baseline representation)."""
    parts = [FTNS_HEADER.pack(FTNS_MAGIC, FTNS_VERSION, len(model))]
    for name, tensor in model.entries():
        if tensor.data is None:
            raise ValueError(f"cannot serialize unmaterialized entry {name!r}")
        parts.append(pack_entry_header(name, tensor))
        parts.append(bytes(tensor.data))
    return b"".join(parts)


def deserialize_model(blob: bytes) -> ParameterMap:
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != FTNS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version = reader.u16("version")
    if version != FTNS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = reader.u32("entry count")
    model = ParameterMap()
    for _ in range(count):
        name, dtype, shape, data_len, next_off = unpack_entry_header(blob, reader.offset)
        reader.offset = next_off
        data = reader.take(data_len, f"entry {name!r} data")
        model.add(name, Tensor(dtype, shape, bytes(data)))
    if reader.offset != len(blob):
        raise FormatError(f"{len(blob) - reader.offset} trailing bytes", reader.offset)
    return model
