"""Precision-reduction codecs and exact message-size accounting.

Four reductions are supported: fp16 / bf16 cast-and-crop, blockwise 8-bit,
and the two blockwise 4-bit variants (float4 with the E2M1 value set,
normfloat4 with a normal-quantile codebook).  Blockwise codecs split a
tensor into fixed-size blocks, record each block's absolute maximum, and
encode every element as the index of the nearest codebook level after
normalizing by that absmax.

FTQB wire layout (little-endian):

- Magic ``b"FTQB"`` (4), version u16, precision u8
- fp16/bf16: an FTNS blob of the cast tensors follows directly.
- blockwise: entry_count u32, then per entry:
  name_len u16 + name, original dtype u8, ndim u8 + extents u64,
  codebook_id u8 (0xFF marks a pass-through tensor),
  [quantized only] codebook_len u16 + fp32 codebook values,
  block_size u32, pad_count u8, absmax_len u32 + fp32 absmax array,
  packed_len u64 + packed code bytes (two 4-bit codes per byte, low
  nibble first; pass-through entries carry their raw tensor bytes).

Sizes in this module are binary megabytes (MiB) throughout.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.stats import norm

from .tensors import (
    DType,
    FormatError,
    ModelSpec,
    ParameterMap,
    Tensor,
    _Reader,
    deserialize_model,
    f32_to_bf16_bits,
    pack_entry_header,
    serialize_model,
    unpack_entry_header,
)

log = logging.getLogger(__name__)

MIB = 1 << 20

FTQB_MAGIC = b"FTQB"
FTQB_VERSION = 1
PASSTHROUGH_CODEBOOK = 0xFF

FP16_MAX = 65504.0
FP32_MAX = float(np.finfo(np.float32).max)

# elements per vectorized pass when quantizing very large tensors
_CHUNK_ELEMS = 1 << 22


class CodecError(ValueError):
    """Codec contract violation (wrong dtype, non-finite payload, bad codes)."""


class Precision(enum.Enum):
    FP16 = "fp16"
    BF16 = "bf16"
    BLOCKWISE8 = "blockwise8"
    FLOAT4 = "float4"
    NORMFLOAT4 = "normfloat4"

    @property
    def bits(self) -> int:
        return _PRECISION_BITS[self]

    @property
    def blockwise(self) -> bool:
        return self in (Precision.BLOCKWISE8, Precision.FLOAT4, Precision.NORMFLOAT4)

    @property
    def codebook_id(self) -> "CodebookId":
        return _PRECISION_CODEBOOK[self]

    @property
    def default_block_size(self) -> int:
        # 4096 for 8-bit and 64 for 4-bit reproduce the reference meta sizes
        return 4096 if self is Precision.BLOCKWISE8 else 64

    @classmethod
    def parse(cls, name: str) -> "Precision":
        key = name.strip().lower()
        aliases = {"fp4": "float4", "nf4": "normfloat4", "int8": "blockwise8"}
        key = aliases.get(key, key)
        for p in cls:
            if p.value == key:
                return p
        raise ValueError(f"unknown precision {name!r}")


_PRECISION_BITS = {
    Precision.FP16: 16,
    Precision.BF16: 16,
    Precision.BLOCKWISE8: 8,
    Precision.FLOAT4: 4,
    Precision.NORMFLOAT4: 4,
}

_PRECISION_CODES = {p: i for i, p in enumerate(Precision)}
_PRECISION_FROM_CODE = {i: p for p, i in _PRECISION_CODES.items()}


class CodebookId(enum.IntEnum):
    LINEAR256 = 0
    FP4_E2M1 = 1
    NF4 = 2


_PRECISION_CODEBOOK = {
    Precision.BLOCKWISE8: CodebookId.LINEAR256,
    Precision.FLOAT4: CodebookId.FP4_E2M1,
    Precision.NORMFLOAT4: CodebookId.NF4,
}


@dataclass(frozen=True)
class Codebook:
    """Sorted fp32 levels in [-1, 1]; codes are indices into ``values``."""

    id: CodebookId
    values: np.ndarray  # float32, ascending

    def __len__(self) -> int:
        return len(self.values)

    @property
    def max_gap(self) -> float:
        """Largest adjacent level gap, computed exactly in float64."""
        v = self.values.astype(np.float64)
        return float(np.max(np.diff(v)))

    @property
    def zero_code(self) -> int:
        """Index of the smallest-magnitude level, preferring the non-negative one."""
        v = self.values.astype(np.float64)
        order = np.lexsort((np.signbit(v), np.abs(v)))
        return int(order[0])


def _nf4_levels() -> np.ndarray:
    # Two-range normal-quantile construction: 8 quantile points for the
    # negative half, 9 for the non-negative half, sharing the median so the
    # unified 16-level set has an exact zero.  The end-bin half-width delta
    # makes the outermost levels land exactly on the normalizer.
    delta = (1 / 32 + 1 / 30) / 2
    neg = norm.ppf(np.linspace(delta, 0.5, 8))
    pos = norm.ppf(np.linspace(0.5, 1 - delta, 9))[1:]
    levels = np.concatenate([neg, pos]) / norm.ppf(1 - delta)
    levels[0], levels[7], levels[15] = -1.0, 0.0, 1.0
    return levels.astype(np.float32)


@functools.lru_cache(maxsize=None)
def build_codebook(codebook_id: CodebookId) -> Codebook:
    if codebook_id == CodebookId.LINEAR256:
        k = np.arange(256, dtype=np.float64)
        values = (-1.0 + 2.0 * k / 255.0).astype(np.float32)
    elif codebook_id == CodebookId.FP4_E2M1:
        # E2M1 magnitudes {0, .5, 1, 1.5, 2, 3, 4, 6} normalized by the max;
        # both signed zeros are kept so there is one level per 4-bit code.
        mags = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]) / 6.0
        values = np.concatenate([-mags[::-1], mags]).astype(np.float32)
    elif codebook_id == CodebookId.NF4:
        values = _nf4_levels()
    else:
        raise CodecError(f"unknown codebook id {codebook_id}")
    values.setflags(write=False)
    return Codebook(codebook_id, values)


@dataclass(frozen=True)
class QuantizedTensor:
    original_dtype: DType
    original_shape: tuple[int, ...]
    codebook_id: CodebookId
    block_size: int
    packed: bytes
    absmax: np.ndarray  # float32, one per block
    pad_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "original_shape", tuple(int(d) for d in self.original_shape))
        n = self.element_count
        bits = 4 if len(build_codebook(self.codebook_id)) <= 16 else 8
        expected_packed = (n * bits + 7) // 8
        if len(self.packed) != expected_packed:
            raise CodecError(
                f"packed length {len(self.packed)} != expected {expected_packed}"
            )
        if len(self.absmax) != (n + self.block_size - 1) // self.block_size:
            raise CodecError("absmax length does not match block count")
        if np.any(self.absmax < 0):
            raise CodecError("negative absmax")

    @property
    def element_count(self) -> int:
        return math.prod(self.original_shape)

    @property
    def bits(self) -> int:
        return 4 if len(build_codebook(self.codebook_id)) <= 16 else 8

    @property
    def meta_bytes(self) -> int:
        return 4 * len(self.absmax) + 4 * len(build_codebook(self.codebook_id))


BundleEntry = Union[QuantizedTensor, Tensor]


@dataclass
class QuantizedBundle:
    """Compressed message payload: entry order mirrors the source map."""

    precision: Precision
    entries: list[tuple[str, BundleEntry]]
    passthrough: frozenset = frozenset()

    @property
    def payload_bytes(self) -> int:
        total = 0
        for _, e in self.entries:
            total += len(e.packed) if isinstance(e, QuantizedTensor) else e.nbytes
        return total

    @property
    def meta_bytes(self) -> int:
        return sum(e.meta_bytes for _, e in self.entries if isinstance(e, QuantizedTensor))

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise CodecError(f"{what}: payload contains NaN or infinity")


def _block_absmax(x: np.ndarray, block_size: int) -> np.ndarray:
    n = x.size
    nblocks = (n + block_size - 1) // block_size
    absmax = np.zeros(nblocks, dtype=np.float32)
    full = n // block_size
    if full:
        absmax[:full] = np.abs(x[: full * block_size]).reshape(full, block_size).max(axis=1)
    if full < nblocks:
        absmax[full] = np.abs(x[full * block_size :]).max() if n > full * block_size else 0.0
    return absmax


def _nearest_codes(x: np.ndarray, scale: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Exact nearest-level indices with ties broken toward smaller magnitude.

    Distances are compared as float64 |x - level*absmax|; fp32 inputs and
    their pairwise products are exactly representable there, so the argmin
    (and the half-gap error bound it implies) holds without fp slack.
    """
    lev = codebook.values.astype(np.float64)
    x64 = x.astype(np.float64)
    a64 = scale.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(a64 > 0, x64 / a64, 0.0)
    pos = np.searchsorted(lev, v)
    lo = np.clip(pos - 1, 0, len(lev) - 1)
    hi = np.clip(pos, 0, len(lev) - 1)
    d_lo = np.abs(x64 - lev[lo] * a64)
    d_hi = np.abs(x64 - lev[hi] * a64)
    tie = d_hi == d_lo
    take_hi = (d_hi < d_lo) | (tie & (np.abs(lev[hi]) < np.abs(lev[lo])))
    codes = np.where(take_hi, hi, lo).astype(np.uint8)
    # duplicated zero levels (fp4's +-0) all encode as the canonical zero code
    codes[lev[codes] == 0.0] = codebook.zero_code
    codes[a64 <= 0] = codebook.zero_code
    return codes


def _pack_codes(codes: np.ndarray, bits: int, zero_code: int) -> tuple[bytes, int]:
    if bits == 8:
        return codes.tobytes(), 0
    pad = codes.size & 1
    if pad:
        codes = np.concatenate([codes, np.array([zero_code], dtype=np.uint8)])
    packed = (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)
    return packed.tobytes(), pad


def _unpack_codes(packed: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(packed, dtype=np.uint8)
    if bits == 8:
        return raw[:count]
    codes = np.empty(raw.size * 2, dtype=np.uint8)
    codes[0::2] = raw & 0x0F
    codes[1::2] = raw >> 4
    return codes[:count]


def quantize_tensor_blockwise(
    t: Tensor, codebook: Codebook, block_size: int
) -> QuantizedTensor:
    if t.dtype != DType.FP32:
        raise CodecError(f"blockwise codecs take fp32 input, got {t.dtype.name_lower}")
    if block_size < 1:
        raise CodecError("block_size must be >= 1")
    x = t.to_f32().reshape(-1)
    _check_finite(x, "quantize")
    absmax = _block_absmax(x, block_size)
    bits = 4 if len(codebook) <= 16 else 8
    n = x.size

    codes = np.empty(n, dtype=np.uint8)
    step = max(block_size, (_CHUNK_ELEMS // block_size) * block_size)
    for start in range(0, n, step):
        end = min(n, start + step)
        first_block = start // block_size
        nblk = (end - start + block_size - 1) // block_size
        scale = np.repeat(absmax[first_block : first_block + nblk], block_size)[: end - start]
        codes[start:end] = _nearest_codes(x[start:end], scale, codebook)

    packed, pad = _pack_codes(codes, bits, codebook.zero_code)
    return QuantizedTensor(
        original_dtype=t.dtype,
        original_shape=t.shape,
        codebook_id=codebook.id,
        block_size=block_size,
        packed=packed,
        absmax=absmax,
        pad_count=pad,
    )


def dequantize_tensor(q: QuantizedTensor, codebook: Optional[Codebook] = None) -> Tensor:
    if codebook is None:
        codebook = build_codebook(q.codebook_id)
    elif codebook.id != q.codebook_id:
        raise CodecError(f"codebook mismatch: {codebook.id} vs tensor's {q.codebook_id}")
    n = q.element_count
    codes = _unpack_codes(q.packed, q.bits, n)
    if codes.size and int(codes.max()) >= len(codebook):
        raise CodecError(f"code index {int(codes.max())} out of range for {codebook.id.name}")
    out = np.empty(n, dtype=np.float32)
    step = max(q.block_size, (_CHUNK_ELEMS // q.block_size) * q.block_size)
    absmax = q.absmax.astype(np.float32, copy=False)
    for start in range(0, n, step):
        end = min(n, start + step)
        first_block = start // q.block_size
        nblk = (end - start + q.block_size - 1) // q.block_size
        scale = np.repeat(absmax[first_block : first_block + nblk], q.block_size)[: end - start]
        out[start:end] = codebook.values[codes[start:end]] * scale
    return Tensor(DType.FP32, q.original_shape, out.tobytes())


def cast_16(t: Tensor, variant: Precision) -> Tensor:
    """Round-to-nearest-even cast of fp32 to fp16/bf16 with range cropping."""
    if variant not in (Precision.FP16, Precision.BF16):
        raise CodecError(f"cast_16 takes fp16 or bf16, got {variant.value}")
    if t.dtype != DType.FP32:
        raise CodecError(f"cast_16 takes fp32 input, got {t.dtype.name_lower}")
    x = t.to_f32().reshape(-1)
    if np.isnan(x).any():
        raise CodecError("cast: payload contains NaN")
    if variant == Precision.FP16:
        clipped = np.clip(x, -FP16_MAX, FP16_MAX)
        return Tensor(DType.FP16, t.shape, clipped.astype("<f2").tobytes())
    clipped = np.clip(x, -FP32_MAX, FP32_MAX)  # maps +-inf into the croppable range
    bits = f32_to_bf16_bits(clipped)
    return Tensor(DType.BF16, t.shape, bits.astype("<u2").tobytes())


def uncast_16(t: Tensor) -> Tensor:
    if t.dtype not in (DType.FP16, DType.BF16):
        raise CodecError(f"uncast_16 takes fp16/bf16 input, got {t.dtype.name_lower}")
    return Tensor.from_f32(t.to_f32())


def quantize_message(
    model: ParameterMap,
    precision: Precision,
    block_size: Optional[int] = None,
) -> QuantizedBundle:
    """Compress every fp32 entry; anything already reduced passes through."""
    entries: list[tuple[str, BundleEntry]] = []
    passthrough = set()
    codebook = build_codebook(precision.codebook_id) if precision.blockwise else None
    bs = block_size or precision.default_block_size
    for name, tensor in model.entries():
        if tensor.dtype != DType.FP32:
            log.debug("pass-through for non-fp32 entry %s (%s)", name, tensor.dtype.name_lower)
            entries.append((name, tensor))
            passthrough.add(name)
            continue
        try:
            if precision.blockwise:
                entries.append((name, quantize_tensor_blockwise(tensor, codebook, bs)))
            else:
                entries.append((name, cast_16(tensor, precision)))
        except CodecError as exc:
            raise CodecError(f"entry {name!r}: {exc}") from exc
    return QuantizedBundle(precision, entries, frozenset(passthrough))


def dequantize_message(bundle: QuantizedBundle) -> ParameterMap:
    """Restore original-precision tensors; pass-through entries are untouched."""
    model = ParameterMap()
    cast_dtype = {Precision.FP16: DType.FP16, Precision.BF16: DType.BF16}.get(bundle.precision)
    for name, entry in bundle.entries:
        try:
            if isinstance(entry, QuantizedTensor):
                model.add(name, dequantize_tensor(entry))
            elif name not in bundle.passthrough and entry.dtype == cast_dtype:
                model.add(name, uncast_16(entry))
            else:
                model.add(name, entry)
        except CodecError as exc:
            raise CodecError(f"entry {name!r}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# FTQB wire format
# ---------------------------------------------------------------------------

def serialize_bundle(bundle: QuantizedBundle) -> bytes:
    head = FTQB_MAGIC + struct.pack("<HB", FTQB_VERSION, _PRECISION_CODES[bundle.precision])
    if not bundle.precision.blockwise:
        model = ParameterMap(bundle.entries)
        return head + serialize_model(model)
    parts = [head, struct.pack("<I", len(bundle.entries))]
    for name, entry in bundle.entries:
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        if isinstance(entry, QuantizedTensor):
            codebook = build_codebook(entry.codebook_id)
            parts.append(struct.pack("<BB", int(entry.original_dtype), len(entry.original_shape)))
            if entry.original_shape:
                parts.append(struct.pack(f"<{len(entry.original_shape)}Q", *entry.original_shape))
            parts.append(struct.pack("<BH", int(entry.codebook_id), len(codebook)))
            parts.append(codebook.values.astype("<f4").tobytes())
            parts.append(struct.pack("<IBI", entry.block_size, entry.pad_count, len(entry.absmax)))
            parts.append(entry.absmax.astype("<f4").tobytes())
            parts.append(struct.pack("<Q", len(entry.packed)))
            parts.append(entry.packed)
        else:
            parts.append(struct.pack("<BB", int(entry.dtype), len(entry.shape)))
            if entry.shape:
                parts.append(struct.pack(f"<{len(entry.shape)}Q", *entry.shape))
            parts.append(struct.pack("<B", PASSTHROUGH_CODEBOOK))
            parts.append(struct.pack("<IBI", 0, 0, 0))
            parts.append(struct.pack("<Q", entry.nbytes))
            parts.append(bytes(entry.data))
    return b"".join(parts)


def deserialize_bundle(blob: bytes) -> QuantizedBundle:
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != FTQB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    version = reader.u16("version")
    if version != FTQB_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    code = reader.u8("precision")
    if code not in _PRECISION_FROM_CODE:
        raise FormatError(f"unknown precision code {code}", 6)
    precision = _PRECISION_FROM_CODE[code]
    if not precision.blockwise:
        model = deserialize_model(blob[reader.offset :])
        return QuantizedBundle(precision, list(model.entries()))
    count = reader.u32("entry count")
    entries: list[tuple[str, BundleEntry]] = []
    passthrough = set()
    for _ in range(count):
        name_len = reader.u16("name length")
        name = reader.take(name_len, "name").decode("utf-8")
        dtype = DType(reader.u8("dtype"))
        ndim = reader.u8("ndim")
        shape = tuple(reader.u64(f"extent {i}") for i in range(ndim))
        cb_code = reader.u8("codebook id")
        if cb_code == PASSTHROUGH_CODEBOOK:
            reader.u32("block size")
            reader.u8("pad count")
            reader.u32("absmax length")
            data_len = reader.u64("data length")
            data = reader.take(data_len, f"entry {name!r} data")
            entries.append((name, Tensor(dtype, shape, bytes(data))))
            passthrough.add(name)
            continue
        codebook_id = CodebookId(cb_code)
        cb_len = reader.u16("codebook length")
        cb_bytes = reader.take(4 * cb_len, "codebook values")
        expected = build_codebook(codebook_id).values.astype("<f4").tobytes()
        if bytes(cb_bytes) != expected:
            raise FormatError(f"entry {name!r}: codebook values disagree with id", reader.offset)
        block_size = reader.u32("block size")
        pad_count = reader.u8("pad count")
        absmax_len = reader.u32("absmax length")
        absmax = np.frombuffer(reader.take(4 * absmax_len, "absmax"), dtype="<f4").copy()
        packed_len = reader.u64("packed length")
        packed = bytes(reader.take(packed_len, f"entry {name!r} codes"))
        entries.append(
            (
                name,
                QuantizedTensor(dtype, shape, codebook_id, block_size, packed, absmax, pad_count),
            )
        )
    if reader.offset != len(blob):
        raise FormatError(f"{len(blob) - reader.offset} trailing bytes", reader.offset)
    return QuantizedBundle(precision, entries, frozenset(passthrough))


# ---------------------------------------------------------------------------
# Analytic size accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeReport:
    """Exact byte accounting for one precision; MiB views are derived."""

    label: str
    payload_bytes: int
    meta_bytes: int
    fp32_bytes: int

    @property
    def payload_mb(self) -> float:
        return self.payload_bytes / MIB

    @property
    def meta_mb(self) -> float:
        return self.meta_bytes / MIB

    @property
    def fp32_mb(self) -> float:
        return self.fp32_bytes / MIB

    @property
    def percent_of_fp32(self) -> float:
        return round((self.payload_bytes + self.meta_bytes) / self.fp32_bytes * 100.0, 2)


def _entry_counts(source: Union[ModelSpec, ParameterMap]) -> list[int]:
    if isinstance(source, ModelSpec):
        return [elements for _, elements, _ in source.expand()]
    return [t.element_count for _, t in source.entries()]


def size_report(
    source: Union[ModelSpec, ParameterMap],
    precision: Optional[Precision],
    block_size: Optional[int] = None,
) -> SizeReport:
    """Analytic sizes from element counts alone; no materialization needed.

    ``precision=None`` is the fp32 baseline row.  Payload is bits/8 per
    element (4-bit entries rounded up per tensor); meta is one fp32 absmax
    per block plus one fp32 codebook per quantized tensor.
    """
    counts = _entry_counts(source)
    fp32_bytes = 4 * sum(counts)
    if precision is None:
        return SizeReport("fp32", fp32_bytes, 0, fp32_bytes)
    if not precision.blockwise:
        return SizeReport(precision.value, 2 * sum(counts), 0, fp32_bytes)
    bs = block_size or precision.default_block_size
    codebook_len = len(build_codebook(precision.codebook_id))
    if precision.bits == 4:
        payload = sum((n + 1) // 2 for n in counts)
    else:
        payload = sum(counts)
    meta = sum(4 * ((n + bs - 1) // bs) for n in counts) + 4 * codebook_len * len(counts)
    return SizeReport(precision.value, payload, meta, fp32_bytes)
