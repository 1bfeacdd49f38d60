"""Stern-Gerlach device geometry.

The device is modeled as uniformly magnetized convex bodies whose boundary
is tiled by planar panels. With uniform magnetization the bound volume
current J_b = curl(M) vanishes, so the bound surface current K = M x n on
the panels is the only field source.

Coordinates: the beam travels +x, the entrance plane is x = 0 and the exit
x = L. The gap spans z in [-b_t, T]; the tip wedge and top prism sit above,
the bottom prism below. Everything is strict SI (meters, A/m).

The top piece is built as two closed convex bodies (tip wedge + top prism)
that share a horizontal interface. Coincident interface panels carry equal
and opposite surface currents, so the split leaves the field unchanged for
any magnetization while keeping every body convex and closed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGeometry

CM = 1.0e-2

#: saturation magnetization of iron, A/m (mu0 * M_s ~ 2.15 T)
IRON_SATURATION = 1.71e6


def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero vector has no direction")
    return v / n


@dataclass
class SGDParams:
    """Device dimensions, tip opening and magnetization.

    Defaults reproduce the original-experiment-scale device: all lengths in
    meters (drawn values are centimeters), tip_half_angle in radians,
    magnetization in A/m. `standoff` is how far before the entrance the
    simulation starts.
    """

    w: float = 1.0 * CM
    h_t: float = 1.75 * CM
    b_height: float = 1.5 * CM
    h: float = 0.75 * CM
    T: float = 0.05 * CM
    b_t: float = 0.05 * CM
    L: float = 3.5 * CM
    tip_half_angle: float = math.pi / 4
    magnetization: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, -IRON_SATURATION])
    )
    standoff: float = 1.0 * CM

    def __post_init__(self):
        self.magnetization = np.asarray(self.magnetization, dtype=np.float64)
        self.validate()

    def validate(self):
        lengths = {
            "w": self.w, "h_t": self.h_t, "b_height": self.b_height,
            "h": self.h, "T": self.T, "b_t": self.b_t, "L": self.L,
            "standoff": self.standoff,
        }
        for name, val in lengths.items():
            if not (val > 0.0 and math.isfinite(val)):
                raise InvalidGeometry(f"{name} must be a positive finite length, got {val}")
        if not (self.T < self.h < self.h_t):
            raise InvalidGeometry(
                f"need T < h < h_t, got T={self.T}, h={self.h}, h_t={self.h_t}")
        if not (self.b_t < self.b_height):
            raise InvalidGeometry(
                f"need b_t < b_height, got b_t={self.b_t}, b_height={self.b_height}")
        if not (0.0 < self.tip_half_angle < math.pi / 2):
            raise InvalidGeometry(
                f"tip_half_angle must lie in (0, pi/2), got {self.tip_half_angle}")
        if self.T <= -self.b_t:
            raise InvalidGeometry("wedge apex would penetrate the bottom piece")
        if self.magnetization.shape != (3,) or not np.all(np.isfinite(self.magnetization)):
            raise InvalidGeometry("magnetization must be a finite 3-vector")
        if np.linalg.norm(self.magnetization) == 0.0:
            raise InvalidGeometry("zero magnetization: device would produce no field")

    @property
    def gap_height(self):
        return self.T + self.b_t


@dataclass
class Panel:
    """One planar boundary face: 3 or 4 vertices, outward unit normal, and
    the bound surface current K = M x n it carries (A/m)."""

    vertices: np.ndarray  # (n, 3), n in {3, 4}
    normal: np.ndarray  # unit
    surface_current: np.ndarray
    body: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.surface_current = np.asarray(self.surface_current, dtype=np.float64)
        n = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or n not in (3, 4):
            raise InvalidGeometry(f"panel needs 3 or 4 vertices, got shape {self.vertices.shape}")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-12:
            raise InvalidGeometry("panel normal is not unit length")
        if n == 4:
            # planarity: 4th vertex must sit in the plane of the first three
            span = max(np.linalg.norm(self.vertices[i] - self.vertices[0]) for i in range(1, n))
            off = abs(np.dot(self.vertices[3] - self.vertices[0], self.normal))
            if off > 1e-9 * max(span, 1e-30):
                raise InvalidGeometry("quad panel is not planar")
        kmag = np.linalg.norm(self.surface_current)
        if abs(np.dot(self.surface_current, self.normal)) > 1e-12 * max(kmag, 1e-30):
            raise InvalidGeometry("surface current must be tangential to the panel")

    @property
    def area(self):
        v = self.vertices
        a = 0.5 * np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0]))
        if v.shape[0] == 4:
            a += 0.5 * np.linalg.norm(np.cross(v[2] - v[0], v[3] - v[0]))
        return a

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    def triangles(self):
        """Decompose into triangles (fan from vertex 0)."""
        v = self.vertices
        tris = [(v[0], v[1], v[2])]
        if v.shape[0] == 4:
            tris.append((v[0], v[2], v[3]))
        return tris


class SGDGeometry:
    """Panel soup plus per-body bookkeeping.

    Immutable after construction; compiled triangle arrays for the
    quadrature kernels are built lazily and cached.
    """

    def __init__(self, panels, bodies):
        self.panels = list(panels)
        #: body name -> list of panel indices
        self.bodies = dict(bodies)
        #: body name -> list of (point_on_plane, outward_normal); valid because
        #: every body is convex
        self._planes = {
            name: [(self.panels[i].vertices[0], self.panels[i].normal) for i in idx]
            for name, idx in self.bodies.items()
        }
        allv = np.vstack([p.vertices for p in self.panels])
        self.bounding_box = (allv.min(axis=0), allv.max(axis=0))
        self._tri_cache = None

    def __repr__(self):
        return (f"SGDGeometry({len(self.panels)} panels, "
                f"bodies={list(self.bodies)})")

    def body_panels(self, name):
        return [self.panels[i] for i in self.bodies[name]]

    def inside_material(self, point):
        """True if the point is inside (or on the boundary of) any body."""
        p = np.asarray(point, dtype=np.float64)
        for planes in self._planes.values():
            if all(np.dot(n, p - v0) <= 1e-15 for v0, n in planes):
                return True
        return False

    def triangle_arrays(self):
        """(tri_verts, tri_currents, tri_verts_all) for the kernels.

        The first two hold only current-carrying triangles (zero-current
        faces contribute nothing to the field); the third holds every
        triangle and is used for surface-distance queries.
        """
        if self._tri_cache is None:
            verts, currents, verts_all = [], [], []
            for panel in self.panels:
                kmag = np.linalg.norm(panel.surface_current)
                for a, b, c in panel.triangles():
                    verts_all.append((a, b, c))
                    if kmag > 0.0:
                        verts.append((a, b, c))
                        currents.append(panel.surface_current)
            if not verts:
                # keep kernel shapes valid; a zero current contributes nothing
                verts = [verts_all[0]]
                currents = [np.zeros(3)]
            self._tri_cache = (
                np.ascontiguousarray(np.array(verts, dtype=np.float64)),
                np.ascontiguousarray(np.array(currents, dtype=np.float64)),
                np.ascontiguousarray(np.array(verts_all, dtype=np.float64)),
            )
        return self._tri_cache


def _polygon_area_yz(poly):
    """Signed shoelace area of a polygon given as (n, 2) [y, z] rows."""
    y, z = poly[:, 0], poly[:, 1]
    return 0.5 * np.sum(y * np.roll(z, -1) - np.roll(y, -1) * z)


def _panel_from_loop(loop, magnetization, body):
    """Panel from a vertex loop whose winding encodes the outward normal."""
    v = np.asarray(loop, dtype=np.float64)
    # Newell normal
    n = np.zeros(3)
    for i in range(v.shape[0]):
        a, b = v[i], v[(i + 1) % v.shape[0]]
        n[0] += (a[1] - b[1]) * (a[2] + b[2])
        n[1] += (a[2] - b[2]) * (a[0] + b[0])
        n[2] += (a[0] - b[0]) * (a[1] + b[1])
    n = _unit(n)
    k = np.cross(magnetization, n)
    # kill cross-product roundoff so K is exactly tangential
    k = k - np.dot(k, n) * n
    return Panel(vertices=v, normal=n, surface_current=k, body=body)


def _cap_loops(poly, x, forward):
    """Split a convex cap polygon into <=4-vertex loops.

    `forward` caps (normal +x) keep the CCW order of `poly`; rear caps are
    reversed so the winding points -x.
    """
    pts = [np.array([x, y, z]) for y, z in poly]
    if not forward:
        pts = pts[::-1]
    loops = []
    i = 1
    while i + 1 < len(pts):
        take = pts[0:1] + pts[i:i + 3] if i + 3 <= len(pts) else pts[0:1] + pts[i:]
        # take is [p0, p_i, p_i+1(, p_i+2)]
        loops.append(take)
        i += 2
    return loops


def _extrude_polygon(poly, x0, x1, magnetization, body):
    """Closed prism panels from a convex CCW (viewed from +x) cross-section.

    poly: (n, 2) array of [y, z] vertices. Returns side quads plus both caps.
    """
    poly = np.asarray(poly, dtype=np.float64)
    if _polygon_area_yz(poly) <= 0.0:
        raise InvalidGeometry("cross-section polygon must be CCW with positive area")
    panels = []
    n = poly.shape[0]
    for i in range(n):
        y0, z0 = poly[i]
        y1, z1 = poly[(i + 1) % n]
        # winding chosen so the Newell normal points outward (away from the
        # interior, which lies to the left of each CCW edge)
        loop = [
            np.array([x0, y0, z0]),
            np.array([x0, y1, z1]),
            np.array([x1, y1, z1]),
            np.array([x1, y0, z0]),
        ]
        panels.append(_panel_from_loop(loop, magnetization, body))
    for forward, x in ((False, x0), (True, x1)):
        for loop in _cap_loops(poly, x, forward):
            panels.append(_panel_from_loop(loop, magnetization, body))
    return panels


def _box_panels(lo, hi, magnetization, body):
    """Six outward-facing quads for an axis-aligned box."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    poly = np.array([[y0, z0], [y1, z0], [y1, z1], [y0, z1]])
    return _extrude_polygon(poly, x0, x1, magnetization, body)


def _tip_cross_section(params):
    """Convex CCW cross-section of the tip wedge in the (y, z) plane.

    The wedge opens upward from the apex edge at z = T with the configured
    half-angle, clamped to the prism width w, and is capped at z = h where
    the top prism begins.
    """
    w2 = params.w / 2.0
    tan_a = math.tan(params.tip_half_angle)
    z_shoulder = params.T + w2 / tan_a
    if z_shoulder < params.h - 1e-15:
        return np.array([
            [0.0, params.T],
            [w2, z_shoulder],
            [w2, params.h],
            [-w2, params.h],
            [-w2, z_shoulder],
        ])
    # shallow wedge: never reaches full width below h
    y_top = (params.h - params.T) * tan_a
    return np.array([
        [0.0, params.T],
        [y_top, params.h],
        [-y_top, params.h],
    ])


def build_geometry(params, include_top=True, include_bottom=True):
    """Assemble the device bodies into an SGDGeometry.

    Bodies: `tip_wedge` and `top_prism` above the gap, `bottom_prism`
    below, each magnetized uniformly with params.magnetization. `include_*`
    flags suppress pieces (used for diagnostics and tests).
    """
    params.validate()
    if not (include_top or include_bottom):
        raise InvalidGeometry("geometry needs at least one body")
    w2 = params.w / 2.0
    panels = []
    bodies = {}

    def add(name, new_panels):
        start = len(panels)
        panels.extend(new_panels)
        bodies[name] = list(range(start, len(panels)))

    if include_top:
        add("tip_wedge",
            _extrude_polygon(_tip_cross_section(params), 0.0, params.L,
                             params.magnetization, "tip_wedge"))
        add("top_prism",
            _box_panels((0.0, -w2, params.h), (params.L, w2, params.h_t),
                        params.magnetization, "top_prism"))
    if include_bottom:
        add("bottom_prism",
            _box_panels((0.0, -w2, -params.b_height), (params.L, w2, -params.b_t),
                        params.magnetization, "bottom_prism"))
    return SGDGeometry(panels, bodies)


def magnetized_box(center, size, magnetization):
    """Standalone uniformly magnetized box (test/oracle body)."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    magnetization = np.asarray(magnetization, dtype=np.float64)
    if np.any(size <= 0):
        raise InvalidGeometry("box size must be positive")
    if np.linalg.norm(magnetization) == 0.0:
        raise InvalidGeometry("zero magnetization: body would produce no field")
    lo, hi = center - size / 2.0, center + size / 2.0
    panels = _box_panels(lo, hi, magnetization, "box")
    return SGDGeometry(panels, {"box": list(range(len(panels)))})
