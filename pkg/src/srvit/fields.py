"""Gridded fields: normalization, quality control, synthetic scenes and file I/O.

The on-disk container ("GFD1") is a small little-endian binary format::

    0-3    magic b"GFD1"
    4      version (1)
    5      flags (bit0 = normalized)
    6-7    reserved, zero
    8-19   c, h, w as uint32
    ...    c channel names, each 1 length byte + ASCII
    ...    c*h*w float32 values, channel-major then row-major

Several records may be concatenated in one file (model checkpoints do this);
:func:`iter_gfd` walks such a stream.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError, FormatError

INPUT_CHANNELS = ("C07", "C09", "C13", "GLM")
TARGET_CHANNELS = ("REFC",)
REFC_RANGE = (0.0, 60.0)

GFD_MAGIC = b"GFD1"
GFD_VERSION = 1
_FIXED_HEADER = struct.Struct("<4sBBH3I")


@dataclass(frozen=True)
class GridField:
    """A ``c x h x w`` stack of named 2D fields stored as binary32."""

    values: np.ndarray
    channel_names: tuple[str, ...]
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ConfigurationError(f"field values must be rank 3, got shape {values.shape}")
        names = tuple(self.channel_names)
        if len(names) != values.shape[0]:
            raise ConfigurationError(
                f"{len(names)} channel names for {values.shape[0]} channels")
        for name in names:
            if not name.isascii() or not 0 < len(name) < 256:
                raise ConfigurationError(f"invalid channel name {name!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.channel_names.index(name)]


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-channel linear bounds ``name -> (lo, hi)`` in physical units."""

    bounds: dict[str, tuple[float, float]]

    def __post_init__(self):
        for name, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise ConfigurationError(f"channel {name}: hi ({hi}) must exceed lo ({lo})")

    def _arrays(self, field: GridField):
        missing = [n for n in field.channel_names if n not in self.bounds]
        if missing:
            raise ConfigurationError(f"no normalization bounds for channels {missing}")
        lo = np.array([self.bounds[n][0] for n in field.channel_names], dtype=np.float64)
        hi = np.array([self.bounds[n][1] for n in field.channel_names], dtype=np.float64)
        return lo[:, None, None], hi[:, None, None]


# Synthetic inputs are generated directly on the unit interval.
DEFAULT_NORMALIZATION = NormalizationSpec(
    {"REFC": REFC_RANGE, **{name: (0.0, 1.0) for name in INPUT_CHANNELS}})


def normalize(field: GridField, spec: NormalizationSpec = DEFAULT_NORMALIZATION) -> GridField:
    if field.normalized:
        raise ConfigurationError("field is already normalized")
    lo, hi = spec._arrays(field)
    x = field.values.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot normalize a field with non-finite values")
    scaled = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return replace(field, values=scaled, normalized=True)


def denormalize(field: GridField, spec: NormalizationSpec = DEFAULT_NORMALIZATION) -> GridField:
    if not field.normalized:
        raise ConfigurationError("field is not normalized")
    lo, hi = spec._arrays(field)
    x = field.values.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot denormalize a field with non-finite values")
    return replace(field, values=lo + x * (hi - lo), normalized=False)


@dataclass(frozen=True)
class QualityReport:
    nonzero_fraction: float
    value_range_ok: bool
    artifact_flag: bool

    @property
    def accepted(self) -> bool:
        return self.value_range_ok and not self.artifact_flag


def quality_check(target: GridField, min_cov: float = 0.01, max_cov: float = 0.5) -> QualityReport:
    """Coverage and value-range screening of a single-channel reflectivity field.

    Samples whose fraction of nonzero pixels falls outside ``[min_cov, max_cov]``
    are flagged as artifacts.
    """
    x = target.values[0]
    nonzero = float(np.count_nonzero(x > 0)) / x.size
    hi = 1.0 if target.normalized else REFC_RANGE[1]
    value_range_ok = bool(np.all(np.isfinite(x)) and x.min() >= 0.0 and x.max() <= hi)
    artifact = not (min_cov <= nonzero <= max_cov)
    return QualityReport(nonzero, value_range_ok, artifact)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parameters of the seeded storm-cell generator.

    Cell widths are fractions of the shorter scene side, so coverage statistics
    do not depend on the scene size. The defaults give a mean nonzero fraction
    close to 9%.
    """

    seed: int = 0
    n_cells: int = 4
    size: tuple[int, int] = (64, 64)
    intensity: tuple[float, float] = (0.3, 1.0)
    scale: tuple[float, float] = (0.025, 0.065)
    anisotropy: tuple[float, float] = (1.0, 2.5)
    patch_size: int = 4
    noise: float = 0.02
    lightning_rate: float = 0.15


# Gaussian cells are truncated at two standard deviations so that scenes have
# exact zeros outside storms.
_CELL_FLOOR = float(np.exp(-2.0))


def generate_scene(spec: SyntheticSceneSpec) -> tuple[GridField, GridField]:
    """Return normalized ``(inputs, target)`` fields for one synthetic scene."""
    h, w = spec.size
    p = spec.patch_size
    if h <= 0 or w <= 0 or p <= 0 or h % p or w % p:
        raise ConfigurationError(f"scene size {spec.size} not divisible by patch size {p}")
    if spec.n_cells < 0:
        raise ConfigurationError("n_cells must be non-negative")

    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    target = np.zeros((h, w))
    side = min(h, w)
    for _ in range(spec.n_cells):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        amp = rng.uniform(*spec.intensity)
        sigma = rng.uniform(*spec.scale) * side
        ratio = rng.uniform(*spec.anisotropy)
        theta = rng.uniform(0, np.pi)
        s_major, s_minor = sigma * np.sqrt(ratio), sigma / np.sqrt(ratio)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        bump = np.exp(-0.5 * ((u / s_major) ** 2 + (v / s_minor) ** 2))
        target += amp * np.maximum(bump - _CELL_FLOOR, 0.0) / (1.0 - _CELL_FLOOR)
    target = np.clip(target, 0.0, 1.0)

    # Cold cloud tops sit over strong echoes, so the IR channels are inverted.
    def noisy(x):
        return np.clip(x + spec.noise * rng.standard_normal((h, w)), 0.0, 1.0)

    c07 = noisy(1.0 - ndimage.gaussian_filter(target, 1.0, mode="nearest"))
    c13 = noisy(1.0 - ndimage.gaussian_filter(target, 1.5, mode="nearest"))
    c09 = noisy(1.0 - ndimage.gaussian_filter(target, 4.0, mode="nearest"))
    flashes = rng.random((h, w)) < spec.lightning_rate
    glm = ((target > 0.5) & flashes).astype(np.float64)

    inputs = GridField(np.stack([c07, c09, c13, glm]), INPUT_CHANNELS, normalized=True)
    return inputs, GridField(target[None], TARGET_CHANNELS, normalized=True)


# --------------------------------------------------------------------------- GFD

@dataclass(frozen=True)
class GFDHeader:
    version: int
    normalized: bool
    channels: int
    height: int
    width: int
    channel_names: tuple[str, ...]
    header_bytes: int = field(default=0, compare=False)

    @property
    def payload_bytes(self) -> int:
        return 4 * self.channels * self.height * self.width


def _encode_header(gf: GridField) -> bytes:
    c, h, w = gf.values.shape
    parts = [_FIXED_HEADER.pack(GFD_MAGIC, GFD_VERSION, int(gf.normalized), 0, c, h, w)]
    for name in gf.channel_names:
        raw = name.encode("ascii")
        parts.append(bytes([len(raw)]) + raw)
    return b"".join(parts)


def encode_gfd(gf: GridField) -> bytes:
    return _encode_header(gf) + gf.values.astype("<f4").tobytes(order="C")


def write_gfd(gf: GridField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_gfd(gf))


def _read_exact(fh: BinaryIO, n: int, offset: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}", offset + len(data))
    return data


def read_gfd_header(fh: BinaryIO, offset: int = 0) -> GFDHeader:
    """Decode one record header starting at ``offset`` (the current position)."""
    fixed = _read_exact(fh, _FIXED_HEADER.size, offset, "header")
    magic, version, flags, reserved, c, h, w = _FIXED_HEADER.unpack(fixed)
    if magic != GFD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset)
    if version != GFD_VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if flags & ~1:
        raise FormatError(f"unknown flag bits {flags:#04x}", offset + 5)
    if reserved:
        raise FormatError("reserved bytes are not zero", offset + 6)
    pos = offset + _FIXED_HEADER.size
    names = []
    for _ in range(c):
        (n,) = _read_exact(fh, 1, pos, "channel name length")
        raw = _read_exact(fh, n, pos + 1, "channel name")
        try:
            names.append(raw.decode("ascii"))
        except UnicodeDecodeError:
            raise FormatError("channel name is not ASCII", pos + 1) from None
        pos += 1 + n
    return GFDHeader(version, bool(flags & 1), c, h, w, tuple(names), pos - offset)


def _read_record(fh: BinaryIO, offset: int) -> tuple[GridField, int]:
    hdr = read_gfd_header(fh, offset)
    start = offset + hdr.header_bytes
    payload = _read_exact(fh, hdr.payload_bytes, start, "payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(hdr.channels, hdr.height, hdr.width)
    gf = GridField(values.astype(np.float32), hdr.channel_names, hdr.normalized)
    return gf, start + hdr.payload_bytes


def read_gfd(path) -> GridField:
    """Read a single-record GFD file."""
    with open(path, "rb") as fh:
        gf, end = _read_record(fh, 0)
        if fh.read(1):
            raise FormatError("trailing bytes after record", end)
    return gf


def iter_gfd(path) -> Iterator[GridField]:
    """Yield every record of a concatenated GFD stream."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        offset = 0
        while offset < size:
            gf, offset = _read_record(fh, offset)
            yield gf


def iter_gfd_headers(path) -> Iterator[tuple[int, GFDHeader]]:
    """Yield ``(offset, header)`` pairs without reading payloads.

    The file size is used to detect truncated payloads.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        offset = 0
        while offset < size:
            hdr = read_gfd_header(fh, offset)
            end = offset + hdr.header_bytes + hdr.payload_bytes
            if end > size:
                raise FormatError("truncated file while reading payload", size)
            yield offset, hdr
            fh.seek(end)
            offset = end
        if offset == 0:
            raise FormatError("empty file", 0)


def write_gfd_stream(fields: Sequence[GridField], path) -> None:
    with open(path, "wb") as fh:
        for gf in fields:
            fh.write(encode_gfd(gf))


# --------------------------------------------------------------------------- PGM

def to_pgm_bytes(channel: np.ndarray) -> bytes:
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"PGM export needs a 2D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise DataError("PGM export needs finite values in [0, 1]")
    # round half up, not numpy's half-to-even
    pixels = np.floor(x * 65535.0 + 0.5).astype(">u2")
    h, w = x.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + pixels.tobytes()


def write_pgm(channel: np.ndarray, path) -> None:
    data = to_pgm_bytes(channel)
    with open(path, "wb") as fh:
        fh.write(data)


def read_pgm(path) -> np.ndarray:
    """Read back a 16-bit binary graymap as integer samples."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise FormatError("not a 16-bit P5 graymap", 0)
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(np.int64)
