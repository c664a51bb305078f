"""LIPX binary field files.

Layout (little-endian): magic ``LIPX``, u32 version (1), u32 d, u32 D,
u32 counts[d], f64 origin[d], f64 spacing[d], then D * prod(counts) f64
samples, component-major and C order within a component.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LIPX"
VERSION = 1


class FieldFormatError(ValueError):
    pass


@dataclass
class LatticeField:
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray  # shape (D, *counts)

    @property
    def counts(self):
        return tuple(self.values.shape[1:])

    def points(self):
        axes = [self.origin[k] + self.spacing[k] * np.arange(n) for k, n in enumerate(self.counts)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(self.counts))


def write_lipx(path, values, origin, spacing):
    values = np.asarray(values, dtype="<f8")
    origin = np.asarray(origin, dtype="<f8").ravel()
    d = len(origin)
    if values.ndim == d:
        values = values[None]
    if values.ndim != d + 1:
        raise ValueError(f"values must have shape (D, n_1..n_{d})")
    spacing = np.broadcast_to(np.asarray(spacing, dtype="<f8"), (d,))
    head = MAGIC + struct.pack("<III", VERSION, d, values.shape[0])
    head += struct.pack(f"<{d}I", *values.shape[1:])
    with open(path, "wb") as fh:
        fh.write(head + origin.tobytes() + np.ascontiguousarray(spacing).tobytes())
        fh.write(np.ascontiguousarray(values).tobytes())


def read_lipx(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FieldFormatError("not a LIPX file (bad magic)")
    if len(data) < 16:
        raise FieldFormatError("truncated header")
    version, d, D = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise FieldFormatError(f"unsupported LIPX version {version}")
    off = 16
    need = off + 4 * d + 16 * d
    if len(data) < need:
        raise FieldFormatError("truncated header")
    counts = struct.unpack_from(f"<{d}I", data, off)
    off += 4 * d
    origin = np.frombuffer(data, "<f8", d, off).astype(float)
    off += 8 * d
    spacing = np.frombuffer(data, "<f8", d, off).astype(float)
    off += 8 * d
    n = D * int(np.prod(counts, dtype=np.int64))
    if len(data) - off != 8 * n:
        raise FieldFormatError(f"truncated payload: header promises {8 * n} bytes, found {len(data) - off}")
    values = np.frombuffer(data, "<f8", n, off).astype(float).reshape((D,) + tuple(counts))
    return LatticeField(origin, spacing, values)


def sample_lattice(u, lo, hi, counts):
    """Evaluate a map on a closed lattice with ``counts`` nodes per axis."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    counts = tuple(int(c) for c in counts)
    spacing = (hi - lo) / np.maximum(np.array(counts) - 1, 1)
    axes = [lo[k] + spacing[k] * np.arange(n) for k, n in enumerate(counts)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(counts))
    V = np.atleast_2d(u(P)).reshape(len(P), -1)
    return LatticeField(lo, spacing, V.T.reshape((V.shape[1],) + counts))


def export_field(field, path):
    """Write a :class:`LatticeField` or a baseline grid field to ``path``."""
    if isinstance(field, LatticeField):
        write_lipx(path, field.values, field.origin, field.spacing)
    else:
        write_lipx(path, field.values[None], field.origin, np.full(field.d, field.spacing))
