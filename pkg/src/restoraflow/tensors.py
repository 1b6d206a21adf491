"""Dense image tensors, seeded randomness, and bit-exact file I/O.

Conventions shared by the whole package:

- images are rank-3 ``(channels, height, width)`` float64 arrays, row-major,
  with model-space values nominally in ``[-1, 1]``;
- masks are ``(height, width)`` maps of {0, 1} where 1 marks a known pixel;
- every random draw goes through an explicitly threaded :class:`SeededRng`,
  never through ambient global state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FormatError",
    "ImageTensor",
    "BinaryMask",
    "SeededRng",
    "randn",
    "clamp",
    "save_raw",
    "load_raw",
    "save_pnm",
    "load_pnm",
]

RAW_MAGIC = b"RFT1"

# Hard ceiling on element count for decoded files; keeps a hostile header from
# requesting multi-GB allocations.
_MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """A file did not conform to one of the on-disk formats."""


def _as_image_array(data, *, what: str = "tensor") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{what} must be rank-3 (channels, height, width), got shape {arr.shape}")
    if min(arr.shape) <= 0:
        raise ValueError(f"{what} dimensions must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Immutable rank-3 image: ``(channels, height, width)`` float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_image_array(self.data).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def full(cls, shape: tuple[int, int, int], value: float) -> "ImageTensor":
        return cls(np.full(shape, value, dtype=np.float64))

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "ImageTensor":
        return cls.full(shape, 0.0)

    def allclose(self, other: "ImageTensor", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(self.data, other.data, atol=atol, rtol=rtol)

    def equal(self, other: "ImageTensor") -> bool:
        """Bitwise equality of shape and values."""
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Spatial ``(height, width)`` map of {0, 1}; 1 = known/observed pixel."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"mask must be rank-2 (height, width), got shape {arr.shape}")
        if min(arr.shape) <= 0:
            raise ValueError(f"mask dimensions must be positive, got shape {arr.shape}")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask values must be exactly 0 or 1")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def known_count(self) -> int:
        return int(self.data.sum())

    def broadcast(self, channels: int) -> np.ndarray:
        """View of the mask broadcastable over a (channels, h, w) image."""
        return np.broadcast_to(self.data[None, :, :], (channels,) + self.data.shape)


class SeededRng:
    """Deterministic random stream (PCG64 behind numpy's Generator).

    The same seed always reproduces the same draw sequence within one build.
    Instances are single-owner: parallel work derives fresh streams via
    :meth:`derive` instead of sharing one.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, p=None, shape=None):
        return self._gen.choice(n, size=shape, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def derive(self, offset: int) -> "SeededRng":
        """Independent stream for parallel run ``offset`` (seed + offset mod 2^64)."""
        return SeededRng((self.seed + int(offset)) % 2**64)


def randn(rng: SeededRng, shape: tuple[int, int, int]) -> ImageTensor:
    """Draw an image of i.i.d. standard-normal entries, advancing ``rng``."""
    if len(shape) != 3 or min(shape) <= 0:
        raise ValueError(f"shape must be three positive integers, got {shape}")
    return ImageTensor(rng.normal(shape))


def clamp(t: ImageTensor, lo: float = -1.0, hi: float = 1.0) -> ImageTensor:
    return ImageTensor(np.clip(t.data, lo, hi))


# ---------------------------------------------------------------------------
# Raw tensor format: b"RFT1" | u32 rank | u32 dims[rank] | f32 values (all LE)
# ---------------------------------------------------------------------------


def write_array_raw(arr: np.ndarray, path) -> None:
    """Write any-rank float array in the raw tensor format (f32 payload)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_array_raw(path) -> np.ndarray:
    """Read a raw tensor file back as a float64 array (exact f32 -> f64)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {RAW_MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= rank <= 8:
        raise FormatError(f"unsupported rank {rank}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    if min(dims) == 0:
        raise FormatError(f"zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError(f"dimension overflow: {dims}")
    payload = blob[header_end:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload holds {len(payload) // 4} values, header declares {count}")
    values = np.frombuffer(payload, dtype="<f4", count=count)
    if not np.all(np.isfinite(values)):
        raise FormatError("payload contains non-finite values")
    return values.astype(np.float64).reshape(dims)


def save_raw(t: ImageTensor, path) -> None:
    """Serialize an image tensor; values are stored as little-endian f32."""
    write_array_raw(t.data, path)


def load_raw(path) -> ImageTensor:
    arr = read_array_raw(path)
    if arr.ndim != 3:
        raise FormatError(f"expected a rank-3 image tensor, file holds rank {arr.ndim}")
    return ImageTensor(arr)


# ---------------------------------------------------------------------------
# Binary netpbm (P5/P6, maxval 255).  Pixel u maps to 2u/255 - 1.
# ---------------------------------------------------------------------------


def _pnm_tokens(blob: bytes, n: int, start: int) -> tuple[list[bytes], int]:
    """Read ``n`` whitespace-separated header tokens; '#' starts a comment."""
    tokens = []
    i = start
    while len(tokens) < n:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i >= len(blob):
            raise FormatError("truncated header")
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    return tokens, i


def load_pnm(path) -> ImageTensor:
    with open(path, "rb") as f:
        blob = f.read()
    magic = blob[:2]
    if magic in (b"P2", b"P3"):
        raise FormatError("ASCII PNM (P2/P3) is not supported; use binary P5/P6")
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r}, expected P5 or P6")
    channels = 1 if magic == b"P5" else 3
    try:
        (w_tok, h_tok, max_tok), pos = _pnm_tokens(blob, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"malformed PNM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte separates header from payload
    payload = blob[pos:]
    expected = width * height * channels
    if len(payload) != expected:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {expected}")
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    pixels = raw.reshape(height, width, channels).transpose(2, 0, 1)
    return ImageTensor(2.0 * pixels / 255.0 - 1.0)


def save_pnm(t: ImageTensor, path) -> None:
    """Clamp to [-1, 1] and quantize to 8-bit with round-half-up."""
    if t.channels == 1:
        magic = b"P5"
    elif t.channels == 3:
        magic = b"P6"
    else:
        raise ValueError(f"PNM supports 1 or 3 channels, tensor has {t.channels}")
    v = np.clip(t.data, -1.0, 1.0)
    u = np.floor((v + 1.0) * (255.0 / 2.0) + 0.5)
    u = np.clip(u, 0, 255).astype(np.uint8)
    payload = u.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{t.width} {t.height}\n255\n".encode("ascii"))
        f.write(payload)
