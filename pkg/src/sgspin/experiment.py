"""Ensemble orchestration: initial-condition protocol, nested fast/slow
runs, flip statistics against the quantum reference, and diagnostics.

Initial spin polar angles phi_i are stepped uniformly over [0, pi) and
measured from the gap-field axis (-z), so phi_i = 0 starts aligned with
the field deep in the device and phi_i is directly comparable to beta.
Each run gets its own counter-based RNG stream keyed by (seed, run_index),
so sampling is independent of execution order and worker count.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels as k
from .carrier import CarrierState, ForceModel, measure_sigma_y
from .errors import InvalidGeometry
from .field import DirectField, UniformField, sample as field_sample
from .geometry import SGDParams, build_geometry
from .moment import Frame, MomentParams, SpinState

MU0 = k.MU0

_FLAG_NAMES = (
    (k.FLAG_OUT_OF_BOUNDS, "OutOfBounds"),
    (k.FLAG_STEP_REJECTED, "StepRejected"),
    (k.FLAG_NON_FORWARD, "NonForwardMotion"),
    (k.FLAG_QUADRATURE, "QuadratureTolerance"),
    (k.FLAG_STEP_CAP, "StepCap"),
    (k.FLAG_ZERO_FIELD, "ZeroFieldFallback"),
    (k.FLAG_SINGULAR, "SingularOrientation"),
)

_CLASS_NAMES = {k.CLASS_UP: "Up", k.CLASS_DOWN: "Down", k.CLASS_UNRESOLVED: "Unresolved"}


def decode_flags(bits):
    return {name for bit, name in _FLAG_NAMES if int(bits) & bit}


@dataclass
class SimConfig:
    """Full ensemble configuration.

    dt_slow is always substeps * dt_fast exactly; substeps >= 100 keeps the
    fast moment dynamics at least two orders of magnitude finer than the
    carrier stepping."""

    phi_steps: int = 101
    reps_per_phi: int = 100
    vx_mean: float = 550.0
    vx_sigma: float = 27.5
    beam_half_width: float = 1.0e-6
    dt_fast: float = 1.0e-9
    substeps: int = 100
    seed: int = 12345
    force_model: ForceModel = dc_field(default_factory=ForceModel)
    moment: MomentParams = dc_field(default_factory=MomentParams)
    geometry: SGDParams = dc_field(default_factory=SGDParams)
    carrier_mass: float = 1.79e-25
    detector_d: float = 0.1
    eps_class: float = 1.0e-3
    theta_bands: int = 8

    def __post_init__(self):
        if self.phi_steps < 2:
            raise ValueError("phi_steps must be >= 2")
        if self.reps_per_phi < 1:
            raise ValueError("reps_per_phi must be >= 1")
        if self.substeps < 100:
            raise ValueError("substeps must be >= 100 (fast/slow separation)")
        if not self.dt_fast > 0.0:
            raise ValueError("dt_fast must be positive")
        if not self.vx_mean > 0.0:
            raise ValueError("vx_mean must be positive")
        if self.vx_sigma < 0.0:
            raise ValueError("vx_sigma must be non-negative")
        if not self.beam_half_width > 0.0:
            raise ValueError("beam_half_width must be positive")
        if not self.carrier_mass > 0.0:
            raise ValueError("carrier_mass must be positive")
        if not self.detector_d > 0.0:
            raise ValueError("detector_d must be positive")
        if self.theta_bands < 1:
            raise ValueError("theta_bands must be >= 1")

    @property
    def dt_slow(self):
        return self.substeps * self.dt_fast

    @property
    def n_runs(self):
        return self.phi_steps * self.reps_per_phi


@dataclass
class RunResult:
    run_index: int
    phi_i: float
    theta_i: float
    initial_beta: float
    final_beta: float
    classification: str
    exit_state: CarrierState
    detector_hit: tuple
    max_drive_ratio: float
    flags: set


@dataclass
class EnsembleResult:
    runs: list
    flip_curve: np.ndarray  # columns: phi_i, p_flip, p_quantum, n_runs, n_unresolved
    azimuthal_slices: np.ndarray  # columns: theta_lo, theta_hi, phi_i, p_flip
    detector_histogram: tuple  # (counts, y_edges, z_edges)

    @property
    def n_unresolved(self):
        return int(self.flip_curve[:, 4].sum())


@dataclass
class FluxCheckInput:
    """Inputs for the flux-dominance order-of-magnitude check."""

    B_SG_f: float = 1.0
    mu: float = 1.0e-24
    mu0: float = MU0
    radius: float = 1.0e-15
    A: float = 1.0e-30
    t_enter: float = 1.8e-5
    B_r: float = 0.0  # derived from mu when zero

    def __post_init__(self):
        for name in ("B_SG_f", "mu", "mu0", "radius", "A", "t_enter"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def volume(self):
        return 4.0 / 3.0 * math.pi * self.radius ** 3


def quantum_flip_probability(phi_i):
    """Eq.-(1) reference: a spin starting in the upper hemisphere flips with
    probability sin^2(phi/2) (the down-collapse branch), one starting in the
    lower with cos^2(phi/2)."""
    if phi_i < math.pi / 2.0:
        return math.sin(phi_i / 2.0) ** 2
    return math.cos(phi_i / 2.0) ** 2


def initial_hemisphere(phi_i):
    """Hemisphere label implied by the initial protocol angle."""
    return "Up" if phi_i < math.pi / 2.0 else "Down"


def _rng_for(seed, run_index):
    key = np.array([seed, run_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_initial_conditions(config, run_index):
    """(SpinState, CarrierState) for one run.

    phi_i = (run_index // reps) * pi / phi_steps; theta_i uniform on
    [0, 2 pi); start at x = -standoff with (y, z) uniform in the beam
    square and v = (N(vx_mean, vx_sigma), 0, 0). The spin state's polar
    angle is pi - phi_i because phi_i is measured from -z (the gap-field
    axis) while SpinState measures from +z."""
    if not 0 <= run_index < config.n_runs:
        raise ValueError(f"run_index {run_index} outside [0, {config.n_runs})")
    phi_i = (run_index // config.reps_per_phi) * math.pi / config.phi_steps
    rng = _rng_for(config.seed, run_index)
    theta_i = rng.uniform(0.0, 2.0 * math.pi)
    y0 = rng.uniform(-config.beam_half_width, config.beam_half_width)
    z0 = rng.uniform(-config.beam_half_width, config.beam_half_width)
    vx = rng.normal(config.vx_mean, config.vx_sigma)
    spin = SpinState(phi=math.pi - phi_i, theta=theta_i, frame=Frame.LAB)
    car = CarrierState(position=np.array([-config.geometry.standoff, y0, z0]),
                       velocity=np.array([vx, 0.0, 0.0]),
                       mass=config.carrier_mass)
    return spin, car


def resolve_field(config, field=None):
    """Field source for a config: an explicit one wins; zero magnetization
    falls back to a null uniform field; otherwise direct quadrature."""
    if field is not None:
        return field
    if np.linalg.norm(config.geometry.magnetization) == 0.0:
        return UniformField((0.0, 0.0, 0.0))
    return DirectField(build_geometry(config.geometry))


def resolve_sigma_y(config, field):
    """Fill in the measured sigma_y if suppression needs it."""
    fm = config.force_model
    if fm.kind == "zonly" and fm.suppression and fm.sigma_y is None:
        if isinstance(field, UniformField):
            fm.sigma_y = config.geometry.gap_height  # no structure to measure
        else:
            fm.sigma_y = measure_sigma_y(field, config.geometry)
    return fm.sigma_y


def _kernel_params(config, field):
    resolve_sigma_y(config, field)
    kind, c, tx, tc = config.moment.torque_model.kernel_args()
    fmodel, suppress, sigma = config.force_model.kernel_args()
    x_exit = config.geometry.L
    return dict(
        field_args=field.kernel_args(),
        moment_args=(config.moment.mu, config.moment.inertia_scalar,
                     config.moment.damping, kind, c, tx, tc),
        carrier_args=(config.carrier_mass, fmodel, suppress, sigma),
        step_args=(config.dt_fast, config.substeps, 0.0, x_exit,
                   config.detector_d, config.eps_class),
    )


def _max_slow_steps(config, vx):
    span = config.geometry.L + config.geometry.standoff
    vx = max(vx, 1.0)
    return int(20.0 * span / (vx * config.dt_slow)) + 1000


def run_single(ic, config, field, record_every=0):
    """One full trajectory; returns (RunResult, trajectory rows or None).

    Trajectory rows (when record_every > 0): t, x, y, z, vx, vy, vz, phi,
    theta, beta, Fy, Fz, drive_ratio at every record_every-th slow step."""
    spin, car = ic
    p = _kernel_params(config, field)
    max_slow = _max_slow_steps(config, car.velocity[0])
    if record_every > 0:
        cap = max_slow // record_every + 2
        rec = np.empty((cap, 13))
    else:
        rec = np.empty((0, 13))
    out = k.run_single_core(
        spin.phi, spin.theta,
        car.position[0], car.position[1], car.position[2], car.velocity[0],
        *p["field_args"], *p["moment_args"], *p["carrier_args"], *p["step_args"],
        max_slow, record_every, rec)
    (beta_i, beta_f, cls, px, py, pz, vx, vy, vz,
     det_y, det_z, max_drive, flags, n_rec) = out
    result = _make_result(0, config, spin, car, beta_i, beta_f, cls,
                          px, py, pz, vx, vy, vz, det_y, det_z, max_drive, flags)
    return result, (rec[:n_rec] if record_every > 0 else None)


def _make_result(idx, config, spin, car, beta_i, beta_f, cls, px, py, pz,
                 vx, vy, vz, det_y, det_z, max_drive, flags):
    phi_i = math.pi - spin.phi
    return RunResult(
        run_index=idx,
        phi_i=phi_i,
        theta_i=spin.theta,
        initial_beta=float(beta_i),
        final_beta=float(beta_f),
        classification=_CLASS_NAMES[int(cls)],
        exit_state=CarrierState(position=np.array([px, py, pz]),
                                velocity=np.array([vx, vy, vz]),
                                mass=car.mass),
        detector_hit=(float(det_y), float(det_z)),
        max_drive_ratio=float(max_drive),
        flags=decode_flags(flags),
    )


def run_ensemble(config, field=None, threads=None, hist_bins=61):
    """Execute every run of the configured ensemble.

    Runs are independent and distributed over numba threads; outputs are
    indexed by run_index, so results are bitwise identical for any thread
    count. Per-run failures set flags, never abort the ensemble."""
    import numba

    field = resolve_field(config, field)
    p = _kernel_params(config, field)

    n = config.n_runs
    ics = np.empty((n, 6))
    phi_is = np.empty(n)
    theta_is = np.empty(n)
    for i in range(n):
        spin, car = sample_initial_conditions(config, i)
        ics[i, 0] = spin.phi
        ics[i, 1] = spin.theta
        ics[i, 2:5] = car.position
        ics[i, 5] = car.velocity[0]
        phi_is[i] = math.pi - spin.phi
        theta_is[i] = spin.theta

    if threads is not None:
        numba.set_num_threads(int(threads))
    max_slow = _max_slow_steps(config, float(np.min(ics[:, 5])))
    out = k.ensemble_core(ics, *p["field_args"], *p["moment_args"],
                          *p["carrier_args"], *p["step_args"], max_slow)

    runs = []
    for i in range(n):
        spin = SpinState(phi=ics[i, 0], theta=ics[i, 1])
        car = CarrierState(position=ics[i, 2:5].copy(),
                           velocity=np.array([ics[i, 5], 0.0, 0.0]),
                           mass=config.carrier_mass)
        r = _make_result(i, config, spin, car, *out[i, :13])
        runs.append(r)

    flip_curve, slices = flip_statistics(runs, theta_bands=config.theta_bands)
    det = np.array([r.detector_hit for r in runs
                    if np.isfinite(r.detector_hit[0]) and np.isfinite(r.detector_hit[1])])
    if det.size:
        hist = np.histogram2d(det[:, 0], det[:, 1], bins=hist_bins)
    else:
        hist = (np.zeros((hist_bins, hist_bins)), np.zeros(hist_bins + 1),
                np.zeros(hist_bins + 1))
    return EnsembleResult(runs=runs, flip_curve=flip_curve,
                          azimuthal_slices=slices, detector_histogram=hist)


def flip_statistics(runs, theta_bands=8):
    """Measured flip curve plus per-azimuth-band flip rates.

    A run counts as flipped when its final hemisphere differs from the one
    implied by phi_i; Unresolved runs are excluded from the rate and
    reported in their own column."""
    if not runs:
        raise ValueError("no runs to aggregate")
    phis = sorted({round(r.phi_i, 12) for r in runs})
    curve = np.empty((len(phis), 5))
    by_phi = {p: [] for p in phis}
    for r in runs:
        by_phi[round(r.phi_i, 12)].append(r)
    for i, p in enumerate(phis):
        grp = by_phi[p]
        unresolved = sum(1 for r in grp if r.classification == "Unresolved")
        resolved = [r for r in grp if r.classification != "Unresolved"]
        flips = sum(1 for r in resolved
                    if r.classification != initial_hemisphere(r.phi_i))
        p_meas = flips / len(resolved) if resolved else np.nan
        curve[i] = (p, p_meas, quantum_flip_probability(p), len(grp), unresolved)

    edges = np.linspace(0.0, 2.0 * math.pi, theta_bands + 1)
    rows = []
    for bi in range(theta_bands):
        lo, hi = edges[bi], edges[bi + 1]
        for p in phis:
            grp = [r for r in by_phi[round(p, 12)]
                   if lo <= r.theta_i < hi and r.classification != "Unresolved"]
            if grp:
                flips = sum(1 for r in grp
                            if r.classification != initial_hemisphere(r.phi_i))
                rows.append((lo, hi, p, flips / len(grp)))
            else:
                rows.append((lo, hi, p, np.nan))
    return curve, np.array(rows)


def drive_ratio(sample):
    """|B_x| / |B_z| with infinity encoded when B_z = 0."""
    bx, bz = abs(float(sample.B[0])), abs(float(sample.B[2]))
    if bz == 0.0:
        return math.inf if bx > 0.0 else 0.0
    return bx / bz


def drive_ratio_profile(field, params, n=200, x_stop=-1.0e-4):
    """(x, ratio) rows along the approach line y = z = 0, x < 0."""
    xs = np.linspace(-params.standoff, x_stop, n)
    rows = np.empty((n, 2))
    for i, x in enumerate(xs):
        s = field_sample(field, np.array([x, 0.0, 0.0]))
        rows[i] = (x, drive_ratio(s))
    return rows


def flux_dominance_check(inp, threshold=1.0e3):
    """Compare the spin's own residual field against the device field.

    The spin's field is B_QS = mu * mu0 / V (inverting mu = B_r V / mu0);
    when the ratio B_QS / B_SG dwarfs unity, back-reaction dynamics from
    flux opposition can be ignored."""
    v = inp.volume
    b_qs = inp.mu * inp.mu0 / v
    ratio = b_qs / inp.B_SG_f
    dphi_sg = inp.A * inp.B_SG_f / inp.t_enter
    dphi_qs = inp.A * b_qs / inp.t_enter
    return {
        "B_SG_f": inp.B_SG_f,
        "mu": inp.mu,
        "mu0": inp.mu0,
        "radius": inp.radius,
        "volume": v,
        "A": inp.A,
        "t_enter": inp.t_enter,
        "B_QS": b_qs,
        "dphi_sg_dt": dphi_sg,
        "dphi_qs_dt": dphi_qs,
        "ratio": ratio,
        "verdict": ("IgnoreBackReaction" if ratio >= threshold
                    else "ConsiderBackReaction"),
    }
