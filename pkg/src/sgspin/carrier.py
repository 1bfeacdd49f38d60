"""Translational dynamics of the moment-carrying particle.

Three force models act on the carrier:
  full         F = (mu . grad)B + mu x (curl B)   (= grad(mu . B) for
               constant mu)
  drift_aware  F = mu_z dBz/dz zhat + mu_z (dBz/dy - dBy/dz) yhat
  zonly        F = mu_z dBz/dz zhat, optionally with the divergence
               suppression factor exp(-(y/sigma_y)^2) modeling the field
               threshold below which no collapse occurs

The carrier advances with midpoint RK2; after the device exit the split is
projected ballistically onto a detector plane a distance d downstream.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as k
from .errors import NonForwardMotion
from .field import sample as field_sample


@dataclass
class CarrierState:
    """Particle position/velocity in the lab frame."""

    position: np.ndarray
    velocity: np.ndarray
    mass: float = 1.79e-25  # silver atom

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if not self.mass > 0.0:
            raise ValueError("mass must be positive")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("non-finite carrier state")


@dataclass
class ForceModel:
    kind: str = "zonly"
    suppression: bool = True
    sigma_y: float | None = None

    _KINDS = {"full": k.FORCE_FULL, "drift_aware": k.FORCE_DRIFT_AWARE,
              "zonly": k.FORCE_Z_ONLY}

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown force model kind {self.kind!r}")
        if self.kind != "zonly":
            self.suppression = False
        if self.suppression and self.sigma_y is not None and not self.sigma_y > 0.0:
            raise ValueError("sigma_y must be positive when suppression is enabled")

    @classmethod
    def full(cls):
        return cls(kind="full")

    @classmethod
    def drift_aware(cls):
        return cls(kind="drift_aware")

    @classmethod
    def z_only(cls, suppression=True, sigma_y=None):
        return cls(kind="zonly", suppression=suppression, sigma_y=sigma_y)

    def kernel_args(self):
        sig = self.sigma_y if self.sigma_y is not None else 1.0
        return self._KINDS[self.kind], bool(self.suppression), float(sig)


def force(mu_vec, sample, model):
    """Force on a carrier with moment mu_vec at a FieldSample."""
    mu_vec = np.asarray(mu_vec, dtype=np.float64)
    model_id, suppress, sigma = model.kernel_args()
    if model.suppression and model.sigma_y is None:
        raise ValueError("suppression enabled but sigma_y unresolved; "
                         "measure it first (see measure_sigma_y)")
    s12 = np.empty(12)
    s12[:3] = sample.B
    s12[3:] = sample.jacobian.reshape(9)
    fx, fy, fz = k.force_from_sample(model_id, suppress, sigma,
                                     mu_vec[0], mu_vec[1], mu_vec[2],
                                     s12, float(sample.position[1]))
    return np.array([fx, fy, fz])


def rk2_step(carrier, force_provider, dt):
    """One midpoint step: force_provider(position) -> force vector.

    Gating (zero force outside the device) and out-of-bounds flagging are
    the provider's concern; OutOfBounds raised by it propagates."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    inv_m = 1.0 / carrier.mass
    f1 = np.asarray(force_provider(carrier.position), dtype=np.float64)
    mid_pos = carrier.position + 0.5 * dt * carrier.velocity
    mid_vel = carrier.velocity + 0.5 * dt * inv_m * f1
    f2 = np.asarray(force_provider(mid_pos), dtype=np.float64)
    return replace(
        carrier,
        position=carrier.position + dt * mid_vel,
        velocity=carrier.velocity + dt * inv_m * f2,
    )


def project_to_detector(carrier, d):
    """Ballistic deflections (delta_y, delta_z) over a drift distance d."""
    vx = carrier.velocity[0]
    if vx <= 0.0:
        raise NonForwardMotion(f"detector projection needs v_x > 0, got {vx}")
    scale = d / vx
    return carrier.velocity[1] * scale, carrier.velocity[2] * scale


def measure_sigma_y(field_source, params, n=401, span=None):
    """Half-width of the central lobe of dBz/dz along y at (L/2, y, 0).

    Scans the gradient's sign and returns the first zero-crossing distance
    (averaged over both sides when both flip). Falls back to the scan span
    when no sign change is found."""
    if span is None:
        span = params.gap_height / 2.0 + 1.8e-3
    x_mid = params.L / 2.0
    ys = np.linspace(0.0, span, n)
    sign0 = 0.0
    crossing = None
    prev = None
    for y in ys:
        g = field_sample(field_source, np.array([x_mid, y, 0.0])).jacobian[2, 2]
        if sign0 == 0.0:
            sign0 = math.copysign(1.0, g)
            prev = g
            continue
        if g * sign0 < 0.0:
            crossing = y
            break
        prev = g
    if crossing is None:
        return float(span)
    return float(crossing)
