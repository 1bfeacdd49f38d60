"""Magnetic field evaluation by adaptive Biot-Savart panel quadrature.

B(r) = (mu0 / 4 pi) * sum over panels of  K x (r - r') / |r - r'|^3 dA'

evaluated per panel by adaptive quadtree subdivision to a configured
relative tolerance; the spatial jacobian comes from central differences
with a distance-aware step. Divergence and curl derive from the jacobian.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels as k
from .errors import QuadratureFailure

#: default per-panel relative quadrature tolerance
DEFAULT_REL_TOL = 1.0e-6
#: default maximum quadtree depth per panel
DEFAULT_MAX_DEPTH = 20


@dataclass
class FieldSample:
    """B plus its spatial jacobian at a point.

    jacobian[i][j] = dB_i / dx_j (tesla/m). `mode` records the provenance
    ("direct" quadrature, "grid" interpolation, or "uniform");
    `inside_material` is flagged for direct evaluation inside a body.
    """

    B: np.ndarray
    jacobian: np.ndarray
    position: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    mode: str = "direct"
    inside_material: bool = False

    @property
    def divergence(self):
        return float(np.trace(self.jacobian))

    @property
    def curl(self):
        j = self.jacobian
        return np.array([j[2, 1] - j[1, 2],
                         j[0, 2] - j[2, 0],
                         j[1, 0] - j[0, 1]])


class DirectField:
    """Quadrature-backed field evaluator bound to one geometry.

    Immutable and safe for concurrent use; per-point evaluation is pure.
    """

    def __init__(self, geometry, rel_tol=DEFAULT_REL_TOL, max_depth=DEFAULT_MAX_DEPTH):
        self.geometry = geometry
        self.rel_tol = float(rel_tol)
        self.max_depth = int(max_depth)
        self._tris, self._currents, self._tris_all = geometry.triangle_arrays()

    def surface_distance(self, point):
        p = np.asarray(point, dtype=np.float64)
        return float(k.surface_distance(self._tris_all, p[0], p[1], p[2]))

    def field(self, point):
        p = np.asarray(point, dtype=np.float64)
        b, err, status = k.bs_field(self._tris, self._currents,
                                    p[0], p[1], p[2], self.rel_tol, self.max_depth)
        if status != k.QUAD_OK:
            raise QuadratureFailure(
                f"panel quadrature did not reach rel_tol={self.rel_tol} at {p}; "
                f"achieved error bound {err:.3e} T",
                estimate=b, error_bound=err)
        return b

    def jacobian(self, point):
        p = np.asarray(point, dtype=np.float64)
        delta = k.fd_step(self.surface_distance(p))
        # stencil fields two decades tighter than the field tolerance, so
        # the differencing does not amplify quadrature noise
        jac, err, status = k.bs_jacobian(self._tris, self._currents,
                                         p[0], p[1], p[2], delta,
                                         0.01 * self.rel_tol, self.max_depth)
        if status != k.QUAD_OK:
            raise QuadratureFailure(
                f"jacobian quadrature did not reach rel_tol={self.rel_tol} at {p}",
                estimate=jac, error_bound=err)
        return jac

    def sample(self, point):
        p = np.asarray(point, dtype=np.float64)
        return FieldSample(
            B=self.field(p),
            jacobian=self.jacobian(p),
            position=p.copy(),
            mode="direct",
            inside_material=self.geometry.inside_material(p),
        )

    def kernel_args(self):
        """(mode, grid dummies..., tri arrays, uniform dummy) for run kernels."""
        return (k.FIELD_DIRECT,
                np.zeros((1, 12)), np.zeros(3), np.ones(3), np.ones(3, np.int64),
                self._tris, self._currents, self._tris_all, np.zeros(3),
                self.rel_tol, self.max_depth)


class UniformField:
    """Constant field everywhere (jacobian zero). Supports B = 0, which the
    ensemble uses for no-device baseline runs."""

    def __init__(self, B=(0.0, 0.0, 0.0)):
        self.B0 = np.asarray(B, dtype=np.float64)

    def sample(self, point):
        p = np.asarray(point, dtype=np.float64)
        return FieldSample(B=self.B0.copy(), jacobian=np.zeros((3, 3)),
                           position=p.copy(), mode="uniform")

    def kernel_args(self):
        return (k.FIELD_UNIFORM,
                np.zeros((1, 12)), np.zeros(3), np.ones(3), np.ones(3, np.int64),
                np.zeros((1, 3, 3)), np.zeros((1, 3)), np.zeros((1, 3, 3)),
                self.B0, DEFAULT_REL_TOL, DEFAULT_MAX_DEPTH)


def _direct_for(geometry, rel_tol, max_depth):
    cache = getattr(geometry, "_direct_cache", None)
    if cache is None or cache.rel_tol != rel_tol or cache.max_depth != max_depth:
        cache = DirectField(geometry, rel_tol, max_depth)
        geometry._direct_cache = cache
    return cache


def biot_savart_field(geometry, point, rel_tol=DEFAULT_REL_TOL, max_depth=DEFAULT_MAX_DEPTH):
    """B at a point (tesla) from a geometry's bound surface currents."""
    return _direct_for(geometry, rel_tol, max_depth).field(point)


def field_jacobian(geometry, point, rel_tol=DEFAULT_REL_TOL, max_depth=DEFAULT_MAX_DEPTH):
    """dB_i/dx_j at a point by central differences over biot_savart_field."""
    return _direct_for(geometry, rel_tol, max_depth).jacobian(point)


def sample(source, point):
    """Uniform access: FieldSample from a FieldGrid, DirectField,
    UniformField, or a bare geometry (direct quadrature)."""
    if hasattr(source, "sample"):
        return source.sample(point)
    # assume a geometry
    return _direct_for(source, DEFAULT_REL_TOL, DEFAULT_MAX_DEPTH).sample(point)
