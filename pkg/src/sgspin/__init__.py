"""Semi-classical 3D quantum-spin simulation in a Stern-Gerlach device.

Subpackages:
    geometry    magnetized device bodies decomposed into surface-current panels
    field       adaptive Biot-Savart evaluation (field, jacobian, div, curl)
    grid        precomputed trilinear field cache with binary serialization
    moment      fast rotational dynamics of the spin moment (RK4)
    carrier     translational force models and kinematics (RK2)
    experiment  ensemble orchestration, flip statistics, diagnostics
    cli         the `sgspin` command line front end
"""

import os

# Must happen before any numba import: allows `--threads N` up to 8 even on
# boxes with fewer cores (thread count never changes results, only speed).
if "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(8, os.cpu_count() or 1))

from .errors import (  # noqa: E402
    DegenerateAxis,
    InvalidGeometry,
    NonForwardMotion,
    OutOfBounds,
    ParseError,
    QuadratureFailure,
    SingularOrientation,
    StepRejected,
    ValidationError,
    ZeroField,
)
from .geometry import SGDParams, SGDGeometry, Panel, build_geometry, magnetized_box  # noqa: E402
from .field import DirectField, FieldSample, UniformField, biot_savart_field, field_jacobian, sample  # noqa: E402
from .grid import FieldGrid, build_field_grid, default_corridor  # noqa: E402
from .moment import (  # noqa: E402
    Frame,
    MomentParams,
    SpinState,
    TorqueModel,
    beta,
    torque_magnitude,
    torque_axis,
    angular_velocity,
    angular_acceleration,
    eom_rhs,
    rotate_frame,
    rk4_step,
    integrate_moment,
)
from .carrier import CarrierState, ForceModel, force, rk2_step, project_to_detector, measure_sigma_y  # noqa: E402
from .experiment import (  # noqa: E402
    EnsembleResult,
    FluxCheckInput,
    RunResult,
    SimConfig,
    drive_ratio,
    drive_ratio_profile,
    flip_statistics,
    flux_dominance_check,
    run_ensemble,
    run_single,
    sample_initial_conditions,
)

__version__ = "0.1.0"
