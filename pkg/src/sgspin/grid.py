"""Precomputed field grid with trilinear sampling and a binary cache format.

Cache layout (little-endian): magic "SGFG", version byte 0x01, 3x u32 dims,
3x f64 origin, 3x f64 spacing, then per node (x fastest) 3x f64 B followed
by the 9-entry row-major jacobian.
"""

import struct

import numpy as np

from . import _kernels as k
from .errors import OutOfBounds, QuadratureFailure
from .field import DEFAULT_MAX_DEPTH, DEFAULT_REL_TOL, FieldSample

MAGIC = b"SGFG"
VERSION = 1

#: per-axis fractions of one spacing by which the node lattice is shifted
#: off the round device coordinates, so no node lands exactly on a panel
#: surface (the Biot-Savart integrand is singular on the current sheets);
#: distinct y/z fractions keep nodes off the 45-degree wedge slants too
LATTICE_SHIFT = (0.37, 0.61, 0.17)


class FieldGrid:
    """Immutable node data (B + jacobian) on a regular lattice."""

    def __init__(self, origin, spacing, dims, data):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.dims = np.asarray(dims, dtype=np.int64)
        n = int(np.prod(self.dims))
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (n, 12):
            raise ValueError(f"node data must have shape ({n}, 12), got {data.shape}")
        self.data = np.ascontiguousarray(data)

    @property
    def n_nodes(self):
        return int(np.prod(self.dims))

    @property
    def bbox(self):
        return self.origin.copy(), self.origin + (self.dims - 1) * self.spacing

    def node_index(self, ix, iy, iz):
        nx, ny = int(self.dims[0]), int(self.dims[1])
        return (iz * ny + iy) * nx + ix

    def node_position(self, ix, iy, iz):
        return self.origin + np.array([ix, iy, iz]) * self.spacing

    def sample(self, point):
        p = np.asarray(point, dtype=np.float64)
        out = np.empty(12)
        ok = k.grid_sample(self.data, self.origin, self.spacing, self.dims,
                           p[0], p[1], p[2], out)
        if not ok:
            lo, hi = self.bbox
            raise OutOfBounds(f"point {p} outside grid bbox [{lo}, {hi}]")
        return FieldSample(B=out[:3].copy(), jacobian=out[3:].reshape(3, 3).copy(),
                           position=p.copy(), mode="grid")

    def kernel_args(self):
        return (k.FIELD_GRID,
                self.data, self.origin, self.spacing, self.dims,
                np.zeros((1, 3, 3)), np.zeros((1, 3)), np.zeros((1, 3, 3)),
                np.zeros(3), DEFAULT_REL_TOL, DEFAULT_MAX_DEPTH)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(bytes([VERSION]))
            fh.write(struct.pack("<3I", *(int(d) for d in self.dims)))
            fh.write(struct.pack("<3d", *self.origin))
            fh.write(struct.pack("<3d", *self.spacing))
            fh.write(self.data.astype("<f8", copy=False).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a field-grid cache (bad magic)")
        if raw[4] != VERSION:
            raise ValueError(f"{path}: unsupported cache version {raw[4]}")
        off = 5
        dims = struct.unpack_from("<3I", raw, off)
        off += 12
        origin = struct.unpack_from("<3d", raw, off)
        off += 24
        spacing = struct.unpack_from("<3d", raw, off)
        off += 24
        n = dims[0] * dims[1] * dims[2]
        expected = off + n * 12 * 8
        if len(raw) != expected:
            raise ValueError(f"{path}: truncated cache ({len(raw)} vs {expected} bytes)")
        data = np.frombuffer(raw, dtype="<f8", offset=off).reshape(n, 12).copy()
        return cls(origin, spacing, dims, data)


def default_corridor(params, pad_xy=(1.0e-3, 2.0e-3, 2.0e-3), spacing=2.0e-4):
    """Flight-corridor bbox for a device: x from the simulation start to the
    exit, y/z the gap padded outward, with the lattice shifted off round
    surface coordinates. `spacing` may be a scalar or per-axis triple."""
    pad_x, pad_y, pad_z = pad_xy
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    sx, sy, sz = (f * s for f, s in zip(LATTICE_SHIFT, spacing))
    lo = np.array([-params.standoff - pad_x - sx,
                   -params.gap_height / 2.0 - pad_y - sy,
                   -params.b_t - pad_z - sz])
    hi = np.array([params.L + pad_x,
                   params.gap_height / 2.0 + pad_y,
                   params.T + pad_z])
    return lo, hi


def build_field_grid(geometry, bbox, spacing, rel_tol=DEFAULT_REL_TOL,
                     max_depth=DEFAULT_MAX_DEPTH):
    """Fill a grid covering `bbox` at `spacing` with B + jacobian at every
    node. Raises QuadratureFailure naming the first offending node if any
    node's quadrature misses tolerance."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    if np.any(spacing <= 0.0):
        raise ValueError("grid spacing must be positive")
    dims = np.maximum(np.ceil((hi - lo) / spacing - 1e-12).astype(np.int64) + 1, 2)
    tris, currents, tris_all = geometry.triangle_arrays()
    data, status = k.fill_grid(tris, currents, tris_all, lo, spacing, dims,
                               rel_tol, max_depth)
    if np.any(status != k.QUAD_OK):
        bad = int(np.argmax(status != k.QUAD_OK))
        nx, ny = int(dims[0]), int(dims[1])
        ix, iy, iz = bad % nx, (bad // nx) % ny, bad // (nx * ny)
        raise QuadratureFailure(
            f"grid fill failed quadrature tolerance at node {(ix, iy, iz)} "
            f"(position {lo + np.array([ix, iy, iz]) * spacing})",
            estimate=data[bad, :3])
    return FieldGrid(lo, spacing, dims, data)
