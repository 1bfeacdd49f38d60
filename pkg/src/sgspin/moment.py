"""Rotational dynamics of the spin moment.

The moment is a unit rod at spherical angles (phi off +z, theta off +x)
with transverse inertia I and none about its own axis. It obeys

    I * d(omega)/dt = mu*B * TMM(beta) * n_hat  -  b * omega

where beta is the angle to the local field, n_hat = (mu x B)/|mu x B| and
TMM is a pluggable torque magnitude model. TMM carries the sign: positive
rotates the moment toward the field, so the semi-classical tanh model is
stable at both beta = 0 and beta = pi while the classical sin(beta) is
stable only at 0.

theta'' has sin(phi) in its denominator; near the poles the state is
transformed into a frame rotated pi/2 about x (which maps the polar region
onto the equator) and integrated there.
"""

import math
from dataclasses import dataclass, field as dc_field, replace
from enum import Enum

import numpy as np

from . import _kernels as k
from .errors import DegenerateAxis, SingularOrientation, StepRejected, ZeroField

#: |sin phi| below this raises SingularOrientation
EPS_SING = k.EPS_SING

TO_ROTATED = "to_rotated"
TO_LAB = "to_lab"


class Frame(Enum):
    LAB = 0
    ROTATED_X90 = 1


@dataclass
class TorqueModel:
    """Pluggable TMM(beta).

    kinds: "classical" (sin beta), "semiclassical_tanh"
    (-sin(beta) * tanh(c*(beta - pi/2))), or "table" (monotone-cubic
    interpolation of (beta, tmm) knots covering [0, pi])."""

    kind: str = "semiclassical_tanh"
    c: float = 2.0
    table_beta: np.ndarray | None = None
    table_tmm: np.ndarray | None = None

    _KINDS = {"classical": k.TMM_CLASSICAL,
              "semiclassical_tanh": k.TMM_SEMICLASSICAL_TANH,
              "table": k.TMM_TABLE}

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown torque model kind {self.kind!r}")
        if self.kind == "semiclassical_tanh" and not self.c > 0.0:
            raise ValueError("tanh sharpness c must be positive")
        self._coef = None
        if self.kind == "table":
            b = np.asarray(self.table_beta, dtype=np.float64)
            v = np.asarray(self.table_tmm, dtype=np.float64)
            if b.ndim != 1 or b.shape != v.shape or b.size < 2:
                raise ValueError("table needs matching 1-d beta/tmm arrays")
            if np.any(np.diff(b) <= 0.0):
                raise ValueError("table beta knots must be strictly increasing")
            if b[0] > 1e-9 or b[-1] < math.pi - 1e-9:
                raise ValueError("table must cover [0, pi]")
            self.table_beta = b
            self.table_tmm = v
            from scipy.interpolate import PchipInterpolator
            self._coef = np.ascontiguousarray(PchipInterpolator(b, v).c)

    @classmethod
    def classical(cls):
        return cls(kind="classical")

    @classmethod
    def semiclassical_tanh(cls, c=2.0):
        return cls(kind="semiclassical_tanh", c=c)

    @classmethod
    def from_table(cls, beta_knots, tmm_values):
        return cls(kind="table", table_beta=beta_knots, table_tmm=tmm_values)

    @classmethod
    def from_csv(cls, path):
        """Load a `beta,tmm` table file."""
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls.from_table(arr[:, 0], arr[:, 1])

    def kernel_args(self):
        kind = self._KINDS[self.kind]
        if kind == k.TMM_TABLE:
            return kind, 0.0, self.table_beta, self._coef
        return kind, float(self.c), np.zeros(2), np.zeros((4, 1))


@dataclass
class MomentParams:
    """Moment magnitude, rod inertia, dissipation and the torque model.

    Defaults are the desk-scale calibration: at the device's gap field
    (|B| ~ 2.15 T) the libration period 2*pi*sqrt(I/(mu*B)) ~ 1.1e-7 s is
    resolved by >= 100 steps of the default fast dt (1e-9 s), and b gives a
    damping time 2I/b = 4e-6 s, a few percent of the device transit."""

    mu: float = 9.274e-24
    inertia_scalar: float = 6.0e-39
    damping: float = 3.0e-33
    torque_model: TorqueModel = dc_field(default_factory=TorqueModel)

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError("mu must be positive")
        if not self.inertia_scalar > 0.0:
            raise ValueError("inertia_scalar must be positive")
        if self.damping < 0.0:
            raise ValueError("damping must be non-negative")


@dataclass
class SpinState:
    """Orientation (phi, theta) plus rates, tagged with its working frame."""

    phi: float
    theta: float
    phi_dot: float = 0.0
    theta_dot: float = 0.0
    frame: Frame = Frame.LAB

    def __post_init__(self):
        vals = (self.phi, self.theta, self.phi_dot, self.theta_dot)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite spin state {vals}")

    def direction(self):
        """Unit moment direction in this state's own frame."""
        sp = math.sin(self.phi)
        return np.array([sp * math.cos(self.theta),
                         sp * math.sin(self.theta),
                         math.cos(self.phi)])

    def lab_direction(self):
        d = self.direction()
        if self.frame is Frame.ROTATED_X90:
            return np.array([d[0], d[2], -d[1]])
        return d


def beta(spin, B):
    """Angle between the moment direction and B, in [0, pi].

    B must be expressed in the spin state's own frame."""
    B = np.asarray(B, dtype=np.float64)
    bmag = np.linalg.norm(B)
    if bmag == 0.0:
        raise ZeroField("beta undefined for |B| = 0")
    u = float(np.dot(spin.direction(), B) / bmag)
    return math.acos(min(1.0, max(-1.0, u)))


def torque_magnitude(model, beta_angle):
    """TMM(beta), dimensionless; sign included (positive = toward B)."""
    if not 0.0 <= beta_angle <= math.pi:
        raise ValueError(f"beta must lie in [0, pi], got {beta_angle}")
    kind, c, tx, tc = model.kernel_args()
    return float(k.tmm_eval(kind, c, tx, tc, beta_angle))


def torque_axis(spin_dir, B):
    """Unit torque rotation axis n = (mu x B)/|mu x B|."""
    spin_dir = np.asarray(spin_dir, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.linalg.norm(spin_dir) == 0.0 or np.linalg.norm(B) == 0.0:
        raise ZeroField("torque axis needs nonzero moment and field")
    n = np.cross(spin_dir, B)
    nmag = np.linalg.norm(n)
    if nmag < k.EPS_AXIS * np.linalg.norm(spin_dir) * np.linalg.norm(B):
        raise DegenerateAxis("moment is (anti)parallel to the field")
    return n / nmag


def angular_velocity(spin):
    """omega = r x dr/dt of the unit rod, Cartesian components in the
    state's frame. Always perpendicular to the rod."""
    sp, cp = math.sin(spin.phi), math.cos(spin.phi)
    st, ct = math.sin(spin.theta), math.cos(spin.theta)
    pd, td = spin.phi_dot, spin.theta_dot
    return np.array([
        -pd * st - td * sp * cp * ct,
        pd * ct - td * sp * cp * st,
        td * sp * sp,
    ])


def angular_acceleration(spin, phi_ddot, theta_ddot):
    """d(omega)/dt for given angular accelerations, Cartesian components."""
    sp, cp = math.sin(spin.phi), math.cos(spin.phi)
    st, ct = math.sin(spin.theta), math.cos(spin.theta)
    pd, td = spin.phi_dot, spin.theta_dot
    return np.array([
        -phi_ddot * st + td * td * st * sp * cp - 2.0 * td * pd * ct * cp * cp
        - theta_ddot * ct * sp * cp,
        phi_ddot * ct - td * td * ct * sp * cp - 2.0 * td * pd * st * cp * cp
        - theta_ddot * st * sp * cp,
        2.0 * td * pd * cp * sp + theta_ddot * sp * sp,
    ])


def torque_vector(spin, B, params):
    """Total torque mu*B*TMM(beta)*n_hat - b*omega (zero field torque at the
    degenerate axis, where TMM vanishes anyway)."""
    B = np.asarray(B, dtype=np.float64)
    tau = -params.damping * angular_velocity(spin)
    bmag = np.linalg.norm(B)
    if bmag > 0.0:
        try:
            n = torque_axis(spin.direction(), B)
        except DegenerateAxis:
            return tau
        tmm = torque_magnitude(params.torque_model, beta(spin, B))
        tau = tau + params.mu * bmag * tmm * n
    return tau


def eom_rhs(spin, B, params):
    """(phi_ddot, theta_ddot) solving I*alpha = tau in the spin's frame.

    Raises SingularOrientation when |sin phi| < EPS_SING; callers must then
    work in the rotated frame."""
    B = np.asarray(B, dtype=np.float64)
    kind, c, tx, tc = params.torque_model.kernel_args()
    phidd, thetadd, singular = k.eom_rhs_core(
        spin.phi, spin.theta, spin.phi_dot, spin.theta_dot,
        B[0], B[1], B[2],
        params.mu, params.inertia_scalar, params.damping, kind, c, tx, tc)
    if singular:
        raise SingularOrientation(
            f"|sin phi| < {EPS_SING} at phi={spin.phi}; use the rotated frame")
    return float(phidd), float(thetadd)


def rotate_frame(spin, direction):
    """Exact state transform under the pi/2 rotation about x.

    direction: TO_ROTATED or TO_LAB. Orientation and rates are converted
    through Cartesian vectors, so the round trip is exact to rounding."""
    if direction == TO_ROTATED:
        if spin.frame is Frame.ROTATED_X90:
            raise ValueError("state is already in the rotated frame")
        new_frame = Frame.ROTATED_X90
        to_rot = True
    elif direction == TO_LAB:
        if spin.frame is Frame.LAB:
            raise ValueError("state is already in the lab frame")
        new_frame = Frame.LAB
        to_rot = False
    else:
        raise ValueError(f"direction must be TO_ROTATED or TO_LAB, got {direction!r}")
    phi, theta, pd, td = k.rotate_state_core(
        spin.phi, spin.theta, spin.phi_dot, spin.theta_dot, to_rot)
    return SpinState(phi, theta, pd, td, new_frame)


def rotate_vector(v, direction):
    """Apply the same pi/2-about-x transform to a plain vector (e.g. B)."""
    v = np.asarray(v, dtype=np.float64)
    if direction == TO_ROTATED:
        return np.array([v[0], -v[2], v[1]])
    if direction == TO_LAB:
        return np.array([v[0], v[2], -v[1]])
    raise ValueError(f"direction must be TO_ROTATED or TO_LAB, got {direction!r}")


def _resolve_b(B_provider):
    if callable(B_provider):
        return np.asarray(B_provider(), dtype=np.float64)
    return np.asarray(B_provider, dtype=np.float64)


def rk4_step(spin, B_provider, params, dt, rhs=None):
    """One classical RK4 step of (phi, theta, phi_dot, theta_dot).

    B_provider is a vector or a callable returning one; it is evaluated
    once and held fixed across the step. `rhs` may inject a test
    right-hand side (state -> (phi_dd, theta_dd)) in place of the moment
    equations of motion."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if rhs is None:
        B = _resolve_b(B_provider)
        kind, c, tx, tc = params.torque_model.kernel_args()
        phi, theta, pd, td, status = k.rk4_fast_step(
            spin.phi, spin.theta, spin.phi_dot, spin.theta_dot,
            B[0], B[1], B[2], params.mu, params.inertia_scalar, params.damping,
            kind, c, tx, tc, dt)
        if status == 1:
            raise SingularOrientation(
                f"trajectory entered |sin phi| < {EPS_SING}; use the rotated frame")
        if status == 2:
            raise StepRejected("state left the finite/coordinate range")
        return replace(spin, phi=phi, theta=theta, phi_dot=pd, theta_dot=td)

    def f(y):
        s = replace(spin, phi=y[0], theta=y[1], phi_dot=y[2], theta_dot=y[3])
        a, b = rhs(s)
        return np.array([y[2], y[3], a, b])

    y0 = np.array([spin.phi, spin.theta, spin.phi_dot, spin.theta_dot])
    k1 = f(y0)
    k2 = f(y0 + 0.5 * dt * k1)
    k3 = f(y0 + 0.5 * dt * k2)
    k4 = f(y0 + dt * k3)
    y1 = y0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y1)):
        raise StepRejected("state left the finite range")
    return replace(spin, phi=y1[0], theta=y1[1], phi_dot=y1[2], theta_dot=y1[3])


def integrate_moment(spin, B_lab, params, dt, n_steps, frame_policy="auto",
                     record_every=0):
    """Integrate the moment in a static lab-frame field.

    frame_policy: "auto" switches the working frame whenever
    sin^2(phi) < 0.4 (the other frame is then guaranteed safe), "lab" or
    "rotated" force a fixed frame. Returns (final SpinState in the lab
    frame, beta history array [(t, beta), ...] recorded every
    `record_every` steps when nonzero)."""
    B_lab = np.asarray(B_lab, dtype=np.float64)
    kind, c, tx, tc = params.torque_model.kernel_args()

    if frame_policy == "rotated" and spin.frame is Frame.LAB:
        spin = rotate_frame(spin, TO_ROTATED)
    if frame_policy in ("auto", "lab") and spin.frame is Frame.ROTATED_X90:
        spin = rotate_frame(spin, TO_LAB)

    phi, theta, pd, td = spin.phi, spin.theta, spin.phi_dot, spin.theta_dot
    frame = 1 if (frame_policy == "rotated" or spin.frame is Frame.ROTATED_X90) else 0
    rec = []
    for step in range(n_steps):
        if frame_policy == "auto":
            sp = math.sin(phi)
            if sp * sp < k.FRAME_SWITCH_SIN2:
                phi, theta, pd, td = k.rotate_state_core(phi, theta, pd, td, frame == 0)
                frame = 1 - frame
        bw = rotate_vector(B_lab, TO_ROTATED) if frame == 1 else B_lab
        phi, theta, pd, td, status = k.rk4_fast_step(
            phi, theta, pd, td, bw[0], bw[1], bw[2],
            params.mu, params.inertia_scalar, params.damping, kind, c, tx, tc, dt)
        if status == 1:
            raise SingularOrientation(
                f"trajectory entered |sin phi| < {EPS_SING} in frame_policy={frame_policy!r}")
        if status == 2:
            raise StepRejected("state left the finite/coordinate range")
        if record_every and (step + 1) % record_every == 0:
            s = SpinState(phi, theta, pd, td,
                          Frame.ROTATED_X90 if frame else Frame.LAB)
            bw_now = rotate_vector(B_lab, TO_ROTATED) if frame else B_lab
            rec.append(((step + 1) * dt, beta(s, bw_now)))
    out = SpinState(phi, theta, pd, td, Frame.ROTATED_X90 if frame else Frame.LAB)
    if out.frame is Frame.ROTATED_X90:
        out = rotate_frame(out, TO_LAB)
    return out, np.array(rec) if rec else np.empty((0, 2))
