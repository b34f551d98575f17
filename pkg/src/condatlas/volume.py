"""Core grid types, the .vvol binary format, and CSV emission.

Conventions fixed package-wide: grids are indexed [x, y, z] with dims
(nx, ny, nz), spacing in millimeters per voxel, and flat/file ordering
x-fastest. In-memory data is float64; on disk values are little-endian
float32.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VVOL0001"

KIND_SCALAR = 0
KIND_ONEHOT = 1
KIND_VECTOR = 2

# Fixed label channel order: background first, then the six tissues.
LABEL_CHANNELS = ("background", "eCSF", "cGM", "tWM", "Ven", "dGM", "BS")
N_CHANNELS = len(LABEL_CHANNELS)

ONEHOT_SUM_TOL = 1e-5


class VvolError(Exception):
    """Base class for .vvol format failures."""


class BadMagicError(VvolError):
    """File does not start with the VVOL0001 magic."""


class TruncatedPayloadError(VvolError):
    """Payload size does not match the header."""


class VolumeInvariantError(VvolError):
    """Volume values violate a type invariant."""


def _check_geometry(dims, spacing, data, channels):
    nx, ny, nz = dims
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise VolumeInvariantError(f"dims must be positive, got {dims}")
    if any(s <= 0 for s in spacing):
        raise VolumeInvariantError(f"spacing must be positive, got {spacing}")
    expect = (channels, nx, ny, nz) if channels > 1 else (nx, ny, nz)
    if data.shape != expect:
        raise VolumeInvariantError(f"data shape {data.shape} != expected {expect}")


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3-D grid (images, templates, metric maps)."""

    dims: tuple
    spacing: tuple
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        _check_geometry(self.dims, self.spacing, self.data, 1)


@dataclass(frozen=True)
class OneHotLabelMap:
    """Per-voxel 7-vector over (background + 6 tissues), soft or hard."""

    dims: tuple
    spacing: tuple
    data: np.ndarray  # shape (7, nx, ny, nz)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        _check_geometry(self.dims, self.spacing, self.data, N_CHANNELS)

    def channel_sums(self):
        return self.data.sum(axis=0)

    def is_hard(self):
        d = self.data
        return bool(np.all((d == 0.0) | (d == 1.0)) and np.all(d.sum(axis=0) == 1.0))


@dataclass(frozen=True)
class VectorField3D:
    """Per-voxel 3-vector grid in voxel units (velocity v or displacement u)."""

    dims: tuple
    spacing: tuple
    data: np.ndarray  # shape (3, nx, ny, nz)
    vkind: str = field(default="displacement", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        _check_geometry(self.dims, self.spacing, self.data, 3)
        if self.vkind not in ("velocity", "displacement"):
            raise VolumeInvariantError(f"unknown vector field kind {self.vkind!r}")


@dataclass(frozen=True)
class Condition:
    """Scalar covariate (gestational-age-like) with its [0, 1] normalization."""

    raw: float
    normalized: float

    def __post_init__(self):
        if not (0.0 <= self.normalized <= 1.0):
            raise VolumeInvariantError(
                f"normalized condition {self.normalized} outside [0, 1]"
            )

    @classmethod
    def from_raw(cls, raw, raw_min, raw_max):
        if raw_max <= raw_min:
            raise ValueError("raw_max must exceed raw_min")
        return cls(raw=float(raw), normalized=(float(raw) - raw_min) / (raw_max - raw_min))


def _validate_values(kind, data):
    if kind == KIND_SCALAR:
        if data.min() < 0.0 or data.max() > 1.0:
            raise VolumeInvariantError(
                f"scalar image values outside [0, 1]: min={data.min()}, max={data.max()}"
            )
    elif kind == KIND_ONEHOT:
        if data.min() < 0.0:
            raise VolumeInvariantError(f"one-hot values must be nonnegative, min={data.min()}")
        sums = data.sum(axis=0)
        err = np.abs(sums - 1.0).max()
        if err > ONEHOT_SUM_TOL:
            raise VolumeInvariantError(f"one-hot channel sums deviate from 1 by {err}")


def _kind_of(vol):
    if isinstance(vol, Volume3D):
        return KIND_SCALAR, vol.data[np.newaxis]
    if isinstance(vol, OneHotLabelMap):
        return KIND_ONEHOT, vol.data
    if isinstance(vol, VectorField3D):
        return KIND_VECTOR, vol.data
    raise TypeError(f"unsupported volume type {type(vol).__name__}")


def write_vvol(path, vol):
    """Write a volume to the .vvol binary format (little-endian, f32)."""
    kind, data = _kind_of(vol)
    _validate_values(kind, data)
    channels = data.shape[0]
    nx, ny, nz = vol.dims
    header = MAGIC + struct.pack("<IIIII", kind, channels, nx, ny, nz)
    header += struct.pack("<fff", *vol.spacing)
    # channel-major, x-fastest
    payload = np.concatenate([data[c].ravel(order="F") for c in range(channels)])
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.astype("<f4").tobytes())


def read_vvol(path):
    """Read a .vvol file; inverse of write_vvol."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    header_size = len(MAGIC) + 5 * 4 + 3 * 4
    if len(raw) < header_size:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(raw)} bytes")
    kind, channels, nx, ny, nz = struct.unpack_from("<IIIII", raw, len(MAGIC))
    spacing = struct.unpack_from("<fff", raw, len(MAGIC) + 20)
    if kind not in (KIND_SCALAR, KIND_ONEHOT, KIND_VECTOR):
        raise VolumeInvariantError(f"{path}: unknown kind {kind}")
    expected_channels = {KIND_SCALAR: 1, KIND_ONEHOT: N_CHANNELS, KIND_VECTOR: 3}[kind]
    if channels != expected_channels:
        raise VolumeInvariantError(
            f"{path}: kind {kind} expects {expected_channels} channels, header says {channels}"
        )
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise VolumeInvariantError(f"{path}: non-positive dims ({nx}, {ny}, {nz})")
    n_values = channels * nx * ny * nz
    expected_size = header_size + 4 * n_values
    if len(raw) != expected_size:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw) - header_size} bytes, expected {4 * n_values}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=header_size).astype(np.float64)
    data = np.empty((channels, nx, ny, nz))
    per = nx * ny * nz
    for c in range(channels):
        data[c] = flat[c * per : (c + 1) * per].reshape((nx, ny, nz), order="F")
    _validate_values(kind, data)
    dims = (nx, ny, nz)
    if kind == KIND_SCALAR:
        return Volume3D(dims, spacing, data[0])
    if kind == KIND_ONEHOT:
        return OneHotLabelMap(dims, spacing, data)
    return VectorField3D(dims, spacing, data)


def argmax_labels(m):
    """Harden a soft label map: exactly one channel 1 per voxel, ties to the lowest index."""
    _validate_values(KIND_ONEHOT, m.data)
    winners = np.argmax(m.data, axis=0)  # first max wins ties
    hard = np.zeros_like(m.data)
    xs, ys, zs = np.indices(m.dims)
    hard[winners, xs, ys, zs] = 1.0
    return OneHotLabelMap(m.dims, m.spacing, hard)


def write_csv(path, header, rows):
    """Emit CSV with RFC-4180-style quoting, '.' decimals, and \\n line endings."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else str(v) for v in row])


def read_csv(path):
    """Read a CSV written by write_csv; returns (header, list of row dicts)."""
    with open(path, "r", newline="") as f:
        r = csv.reader(f)
        try:
            header = next(r)
        except StopIteration:
            raise VvolError(f"{path}: empty CSV") from None
        rows = []
        for line in r:
            if len(line) != len(header):
                raise VvolError(f"{path}: ragged CSV row {line!r}")
            rows.append(dict(zip(header, line)))
    return header, rows
