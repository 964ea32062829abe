"""Picture storage, raw I420 file I/O and PSNR."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from uvc.errors import InvalidArgumentError, MalformedInputError

PSNR_SENTINEL = 100.0


@dataclass(frozen=True, eq=False)
class PlaneBuffer:
    """One 8-bit sample plane, stored row-major as a read-only uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise InvalidArgumentError("plane data must be two-dimensional")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise InvalidArgumentError("plane samples must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, value: int = 128) -> PlaneBuffer:
        return cls(np.full((height, width), value, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, PlaneBuffer):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class FrameBuffer:
    """A 4:2:0 picture: full-resolution luma plus two half-resolution chroma planes."""

    y: PlaneBuffer
    u: PlaneBuffer
    v: PlaneBuffer
    poc: int = 0

    def __post_init__(self):
        if self.y.width % 2 or self.y.height % 2:
            raise InvalidArgumentError("luma dimensions must be even")
        for name, plane in (("u", self.u), ("v", self.v)):
            if plane.width != self.y.width // 2 or plane.height != self.y.height // 2:
                raise InvalidArgumentError(f"{name} plane is not 4:2:0 sized")
        if self.poc < 0:
            raise InvalidArgumentError("poc must be non-negative")

    @property
    def width(self) -> int:
        return self.y.width

    @property
    def height(self) -> int:
        return self.y.height

    @property
    def planes(self) -> tuple[PlaneBuffer, PlaneBuffer, PlaneBuffer]:
        return (self.y, self.u, self.v)

    @classmethod
    def from_arrays(cls, y, u, v, poc: int = 0) -> FrameBuffer:
        return cls(PlaneBuffer(y), PlaneBuffer(u), PlaneBuffer(v), poc)

    def with_poc(self, poc: int) -> FrameBuffer:
        return FrameBuffer(self.y, self.u, self.v, poc)

    def to_bytes(self) -> bytes:
        return self.y.data.tobytes() + self.u.data.tobytes() + self.v.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, FrameBuffer):
            return NotImplemented
        return self.poc == other.poc and all(a == b for a, b in zip(self.planes, other.planes))


def frame_size(width: int, height: int) -> int:
    return width * height * 3 // 2


def _check_dims(width, height):
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise InvalidArgumentError(f"dimensions must be positive and even, got {width}x{height}")


def frames_from_bytes(raw: bytes, width: int, height: int) -> list[FrameBuffer]:
    _check_dims(width, height)
    size = frame_size(width, height)
    if len(raw) == 0 or len(raw) % size:
        raise MalformedInputError(
            f"{len(raw)} bytes is not a positive multiple of the {width}x{height} frame size {size}"
        )
    buf = np.frombuffer(raw, dtype=np.uint8)
    luma = width * height
    chroma = luma // 4
    frames = []
    for poc in range(len(raw) // size):
        base = poc * size
        y = buf[base:base + luma].reshape(height, width)
        u = buf[base + luma:base + luma + chroma].reshape(height // 2, width // 2)
        v = buf[base + luma + chroma:base + size].reshape(height // 2, width // 2)
        frames.append(FrameBuffer.from_arrays(y, u, v, poc))
    return frames


def load_yuv420(path, width: int, height: int) -> list[FrameBuffer]:
    """Read every frame of a headerless I420 file."""
    _check_dims(width, height)
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    return frames_from_bytes(raw, width, height)


def save_yuv420(frames, path) -> None:
    frames = list(frames)
    if frames:
        w, h = frames[0].width, frames[0].height
        for f in frames[1:]:
            if (f.width, f.height) != (w, h):
                raise InvalidArgumentError("all frames must share dimensions")
    with open(os.fspath(path), "wb") as fh:
        for f in frames:
            fh.write(f.to_bytes())


def sse(a, b) -> int:
    a = a.data if isinstance(a, PlaneBuffer) else np.asarray(a)
    b = b.data if isinstance(b, PlaneBuffer) else np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.int64) - b.astype(np.int64)
    return int(np.sum(d * d))


def psnr_from_sse(total_sse: int, count: int) -> float:
    if total_sse == 0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(255.0 * 255.0 * count / total_sse)


def psnr(reference: PlaneBuffer, test: PlaneBuffer) -> float:
    """PSNR in dB for 8-bit planes; identical planes give the 100 dB sentinel."""
    if (reference.width, reference.height) != (test.width, test.height):
        raise InvalidArgumentError("psnr needs planes of identical dimensions")
    return psnr_from_sse(sse(reference, test), reference.width * reference.height)


def frame_psnr(reference: FrameBuffer, test: FrameBuffer) -> tuple[float, float, float]:
    return tuple(psnr(a, b) for a, b in zip(reference.planes, test.planes))
