"""Byte-exact file formats: tensors, weight bundles, and PPM video frames.

All multi-byte header fields are little-endian and payloads are raw
float32, so a write/read round trip reproduces the input bit for bit.
See FORMATS.md for the full layouts with hex dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .transformer import ModelConfig, validate_weights

TENSOR_MAGIC = b"VTEN"
WEIGHTS_MAGIC = b"VWTS"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_MAX_U32 = 2**32 - 1


class FormatError(ValueError):
    """A file does not follow its declared format."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """The file ends before its declared payload does."""


class TooFewFramesError(FormatError):
    """A video directory holds fewer frames than the model consumes."""


class _Reader:
    """Sequential byte reader that raises TruncatedError on short reads."""

    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"{self.name}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} remain")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _pack_tensor(arr: np.ndarray) -> bytes:
    if arr.dtype != np.float32:
        raise FormatError(f"only float32 tensors are stored, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("tensor rank exceeds 255")
    if any(d > _MAX_U32 for d in arr.shape):
        raise FormatError(f"tensor dim overflows u32: {arr.shape}")
    head = TENSOR_MAGIC + struct.pack("<BBB", FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr).tobytes()


def _read_tensor_record(r: _Reader) -> np.ndarray:
    magic = r.take(4)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{r.name}: bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, dtype, ndim = struct.unpack("<BBB", r.take(3))
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.name}: unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{r.name}: unsupported dtype code {dtype}")
    dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
    count = 1
    for d in dims:
        count *= d
    payload = r.take(4 * count)
    # astype copies, so the result is fresh, writable, and contiguous even
    # for rank-0 records (ascontiguousarray would pad those to rank 1).
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(path, arr: np.ndarray) -> None:
    """Write one float32 tensor to a tensor file."""
    Path(path).write_bytes(_pack_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    """Read one tensor file; trailing bytes beyond the payload are an error."""
    r = _Reader(Path(path).read_bytes(), str(path))
    arr = _read_tensor_record(r)
    if r.remaining():
        raise FormatError(f"{path}: {r.remaining()} trailing bytes after payload")
    return arr


def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a named tensor map as a weights bundle."""
    if len(tensors) > _MAX_U32:
        raise FormatError("too many tensors")
    parts = [WEIGHTS_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_pack_tensor(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def read_weights(path, cfg: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Read a weights bundle.

    With a config the loaded names and shapes are checked against the
    model's schema; any missing or extra tensor is an error.
    """
    r = _Reader(Path(path).read_bytes(), str(path))
    magic = r.take(4)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: bad weights magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    version, count = struct.unpack("<BI", r.take(5))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = _read_tensor_record(r)
    if r.remaining():
        raise FormatError(f"{path}: {r.remaining()} trailing bytes after last tensor")
    if cfg is not None:
        validate_weights(tensors, cfg)
    return tensors


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image as binary P6 PPM, maxval 255."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM image must be (H, W, 3) uint8, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def _ppm_token(r: _Reader) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        c = r.take(1)
        if c == b"#":
            while r.take(1) not in b"\r\n":
                pass
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into an (H, W, 3) uint8 array."""
    r = _Reader(Path(path).read_bytes(), str(path))
    magic = r.take(2)
    if magic != b"P6":
        raise FormatError(f"{path}: unsupported PPM variant {magic!r}, only binary P6 is read")
    try:
        w, h, maxval = (int(_ppm_token(r)) for _ in range(3))
    except ValueError as e:
        raise FormatError(f"{path}: bad PPM header: {e}") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}, expected 255")
    # The maxval token consumed exactly one trailing whitespace byte;
    # everything after it is pixel data.
    payload = r.take(3 * w * h)
    if r.remaining():
        raise FormatError(f"{path}: {r.remaining()} trailing bytes after pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample: source index = floor(dst * src / out)."""
    h, w = img.shape[:2]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[rows][:, cols]


def load_video_ppm(dir_path, cfg: ModelConfig) -> np.ndarray:
    """Load the first ``cfg.frames`` PPM frames from a directory.

    Files are taken in lexicographic name order.  Pixels scale to [0, 1]
    float32, RGB order.  Frames whose dims differ from the configured
    image size are center-cropped square and nearest-neighbor resized.
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"video directory not found: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix == ".ppm")
    if len(paths) < cfg.frames:
        raise TooFewFramesError(
            f"{d}: found {len(paths)} PPM frames, model consumes {cfg.frames}")
    frames = []
    dims = None
    for p in paths[:cfg.frames]:
        img = read_ppm(p)
        if dims is None:
            dims = img.shape
        elif img.shape != dims:
            raise FormatError(f"{p}: frame dims {img.shape[:2]} differ from first frame {dims[:2]}")
        h, w = img.shape[:2]
        if (h, w) != (cfg.image_size, cfg.image_size):
            side = min(h, w)
            top, left = (h - side) // 2, (w - side) // 2
            img = img[top:top + side, left:left + side]
            img = _nearest_resize(img, cfg.image_size, cfg.image_size)
        frames.append(img)
    video = np.stack(frames).astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(video)
