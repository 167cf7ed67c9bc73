"""Cascaded quadrotor flight-control payload.

Position PD loop -> attitude PD loop -> X-configuration mixer -> 6-DOF
rigid-body model integrated with fixed-step RK4.  Everything here is plain
float arithmetic on tuples so that one attitude tick always executes the
same instruction sequence; the benchmark measures the OS, not this code.

Frames: world is z-up, body is x-forward / y-left / z-up.  Attitude uses
ZYX Euler angles (roll, pitch, yaw).

Rotor layout (arm at 45 degrees, d = l / sqrt(2))::

    3 (front-left, CW)    1 (front-right, CCW)
    2 (rear-left, CCW)    4 (rear-right, CW)

Spin direction alternates around the ring 1-3-2-4, so the yaw-drag row of
the mixing matrix is ``k_m * (+1, +1, -1, -1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

Vec3 = Tuple[float, float, float]
Vec4 = Tuple[float, float, float, float]

# keeps roll/pitch strictly inside (-pi/2, pi/2), away from the Euler singularity
_TILT_LIMIT = math.pi / 2 - 1e-3
_FORCE_EPS = 1e-9
# minimum vertical force emitted by the position loop, as a fraction of weight
_MIN_LIFT_FRACTION = 1e-3

# column signs of the mixing matrix: thrust, roll, pitch, yaw rows
_ROLL_SIGN = (-1.0, 1.0, 1.0, -1.0)
_PITCH_SIGN = (-1.0, 1.0, -1.0, 1.0)
_YAW_SIGN = (1.0, 1.0, -1.0, -1.0)


class ControlError(ValueError):
    """Base class for payload errors."""


class DegenerateForceError(ControlError):
    """Commanded force too small to extract a thrust direction."""


class InfeasibleCommandError(ControlError):
    """Commanded thrust outside the actuator envelope."""


def _finite(*vecs) -> bool:
    return all(math.isfinite(x) for v in vecs for x in v)


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class VehicleState:
    r: Vec3 = (0.0, 0.0, 0.0)
    v: Vec3 = (0.0, 0.0, 0.0)
    alpha: Vec3 = (0.0, 0.0, 0.0)
    omega_b: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("r", "v", "alpha", "omega_b"):
            vec = tuple(float(x) for x in getattr(self, name))
            if len(vec) != 3:
                raise ValueError(f"{name} must have 3 components")
            object.__setattr__(self, name, vec)
        if not _finite(self.r, self.v, self.alpha, self.omega_b):
            raise ValueError("vehicle state must be finite")

    def as_tuple(self) -> tuple:
        return self.r + self.v + self.alpha + self.omega_b

    @classmethod
    def from_tuple(cls, x) -> "VehicleState":
        x = tuple(x)
        return cls(x[0:3], x[3:6], x[6:9], x[9:12])


@dataclass(frozen=True)
class ControlReference:
    r_r: Vec3 = (0.0, 0.0, 0.0)
    psi_r: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "r_r", tuple(float(x) for x in self.r_r))
        if not _finite(self.r_r, (self.psi_r,)):
            raise ValueError("reference must be finite")


@dataclass(frozen=True)
class ForceCommand:
    F: Vec3

    @property
    def norm(self) -> float:
        fx, fy, fz = self.F
        return math.sqrt(fx * fx + fy * fy + fz * fz)


@dataclass(frozen=True)
class TorqueCommand:
    tau_r: Vec3


@dataclass(frozen=True)
class RotorSpeeds:
    omega: Vec4


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the simulated X-frame quadrotor (SI units).

    ``tau_max`` bounds the attitude controller output per body axis.
    """

    m: float = 1.0
    g: float = 9.81
    J: Vec3 = (0.01, 0.01, 0.02)
    l: float = 0.25
    k_f: float = 1e-5
    k_m: float = 2e-7
    omega_max: float = 1000.0
    tau_max: Vec3 = (1.0, 1.0, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "J", tuple(float(x) for x in self.J))
        object.__setattr__(self, "tau_max", tuple(float(x) for x in self.tau_max))
        scalars = (self.m, self.g, self.l, self.k_f, self.k_m, self.omega_max)
        if not all(math.isfinite(x) and x > 0 for x in scalars + self.J + self.tau_max):
            raise ValueError("vehicle parameters must be finite and strictly positive")
        if 4.0 * self.k_f * self.omega_max**2 <= self.m * self.g:
            raise ValueError("hover infeasible: 4*k_f*omega_max^2 must exceed m*g")

    @property
    def max_thrust(self) -> float:
        return 4.0 * self.k_f * self.omega_max**2

    @property
    def hover_speed(self) -> float:
        return math.sqrt(self.m * self.g / (4.0 * self.k_f))

    @property
    def arm_offset(self) -> float:
        return self.l / math.sqrt(2.0)

    def mixing_matrix(self) -> list[list[float]]:
        """Rows map squared rotor speeds to (thrust, tau_x, tau_y, tau_z)."""
        kfd = self.k_f * self.arm_offset
        return [
            [self.k_f] * 4,
            [kfd * s for s in _ROLL_SIGN],
            [kfd * s for s in _PITCH_SIGN],
            [self.k_m * s for s in _YAW_SIGN],
        ]


@dataclass(frozen=True)
class ControllerGains:
    kp: Vec3 = (2.0, 2.0, 4.0)
    kd: Vec3 = (2.5, 2.5, 4.0)
    kp_att: Vec3 = (100.0, 100.0, 20.0)
    kd_att: Vec3 = (20.0, 20.0, 10.0)

    def __post_init__(self):
        for name in ("kp", "kd", "kp_att", "kd_att"):
            vec = tuple(float(x) for x in getattr(self, name))
            if len(vec) != 3 or not all(math.isfinite(x) and x >= 0 for x in vec):
                raise ValueError(f"gain {name} must be 3 finite non-negative values")
            object.__setattr__(self, name, vec)


def position_controller(
    ref: ControlReference,
    state: VehicleState,
    gains: ControllerGains,
    params: VehicleParams,
) -> ForceCommand:
    """PD position law with gravity feed-forward; velocity reference is zero."""
    m = params.m
    kp, kd = gains.kp, gains.kd
    rr, r, v = ref.r_r, state.r, state.v
    fx = m * (kp[0] * (rr[0] - r[0]) - kd[0] * v[0])
    fy = m * (kp[1] * (rr[1] - r[1]) - kd[1] * v[1])
    fz = m * (params.g + kp[2] * (rr[2] - r[2]) - kd[2] * v[2])
    fz = min(max(fz, _MIN_LIFT_FRACTION * m * params.g), params.max_thrust)
    return ForceCommand((fx, fy, fz))


def attitude_controller(
    psi_r: float,
    F: ForceCommand,
    state: VehicleState,
    gains: ControllerGains,
    params: VehicleParams,
) -> TorqueCommand:
    fx, fy, fz = F.F
    norm = math.sqrt(fx * fx + fy * fy + fz * fz)
    if not norm > _FORCE_EPS:
        raise DegenerateForceError(f"|F| = {norm!r} is below {_FORCE_EPS}")
    s, c = math.sin(psi_r), math.cos(psi_r)
    roll_d = (fx * s - fy * c) / norm
    pitch_d = (fx * c + fy * s) / norm

    roll, pitch, yaw = state.alpha
    p, q, r = state.omega_b
    e0 = roll_d - roll
    e1 = pitch_d - pitch
    e2 = _wrap_angle(psi_r - yaw)

    J, kp, kd, lim = params.J, gains.kp_att, gains.kd_att, params.tau_max
    t0 = J[0] * (kp[0] * e0 - kd[0] * p)
    t1 = J[1] * (kp[1] * e1 - kd[1] * q)
    t2 = J[2] * (kp[2] * e2 - kd[2] * r)
    return TorqueCommand(
        (
            min(max(t0, -lim[0]), lim[0]),
            min(max(t1, -lim[1]), lim[1]),
            min(max(t2, -lim[2]), lim[2]),
        )
    )


def allocate_squared(thrust: float, tau: Vec3, params: VehicleParams) -> Vec4:
    """Exact solution of the mixing system, before any actuator clamp.

    The mixing matrix is a diagonal scaling of a 4x4 orthogonal sign matrix,
    so its inverse is the transposed sign matrix divided by 4.
    """
    kfd = params.k_f * params.arm_offset
    a = thrust / params.k_f
    b = tau[0] / kfd
    c = tau[1] / kfd
    d = tau[2] / params.k_m
    return tuple(
        0.25 * (a + _ROLL_SIGN[i] * b + _PITCH_SIGN[i] * c + _YAW_SIGN[i] * d)
        for i in range(4)
    )


def control_allocator(thrust: float, tau: TorqueCommand, params: VehicleParams) -> RotorSpeeds:
    if not thrust > 0.0:
        raise InfeasibleCommandError(f"thrust must be positive, got {thrust!r}")
    if thrust > params.max_thrust:
        raise InfeasibleCommandError(
            f"thrust {thrust:.6g} N exceeds envelope {params.max_thrust:.6g} N"
        )
    w_max = params.omega_max
    squared = allocate_squared(thrust, tau.tau_r, params)
    return RotorSpeeds(tuple(min(math.sqrt(max(s, 0.0)), w_max) for s in squared))


def _derivative(x: tuple, thrust: float, tau: Vec3, params: VehicleParams) -> tuple:
    _, _, _, vx, vy, vz, roll, pitch, yaw, p, q, r = x
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    a = thrust / params.m
    # third column of Rz(yaw) Ry(pitch) Rx(roll)
    ax = a * (cr * sp * cy + sr * sy)
    ay = a * (cr * sp * sy - sr * cy)
    az = a * (cr * cp) - params.g

    tp = sp / cp
    droll = p + (sr * q + cr * r) * tp
    dpitch = cr * q - sr * r
    dyaw = (sr * q + cr * r) / cp

    jx, jy, jz = params.J
    dp = (tau[0] - (q * jz * r - r * jy * q)) / jx
    dq = (tau[1] - (r * jx * p - p * jz * r)) / jy
    dr = (tau[2] - (p * jy * q - q * jx * p)) / jz
    return (vx, vy, vz, ax, ay, az, droll, dpitch, dyaw, dp, dq, dr)


def rotor_wrench(rotors: RotorSpeeds, params: VehicleParams) -> tuple[float, Vec3]:
    """Total thrust and body torque produced by the given rotor speeds."""
    w2 = [w * w for w in rotors.omega]
    kfd = params.k_f * params.arm_offset
    thrust = params.k_f * (w2[0] + w2[1] + w2[2] + w2[3])
    tx = kfd * sum(_ROLL_SIGN[i] * w2[i] for i in range(4))
    ty = kfd * sum(_PITCH_SIGN[i] * w2[i] for i in range(4))
    tz = params.k_m * sum(_YAW_SIGN[i] * w2[i] for i in range(4))
    return thrust, (tx, ty, tz)


def dynamics_step(
    state: VehicleState, rotors: RotorSpeeds, params: VehicleParams, dt: float
) -> VehicleState:
    """Advance the rigid body by ``dt`` seconds with classic RK4 (rotor speeds held)."""
    if not 0.0 < dt <= 0.01:
        raise ValueError(f"dt must be in (0, 0.01] s, got {dt!r}")
    thrust, tau = rotor_wrench(rotors, params)
    x = state.as_tuple()
    k1 = _derivative(x, thrust, tau, params)
    h = 0.5 * dt
    k2 = _derivative(tuple(x[i] + h * k1[i] for i in range(12)), thrust, tau, params)
    k3 = _derivative(tuple(x[i] + h * k2[i] for i in range(12)), thrust, tau, params)
    k4 = _derivative(tuple(x[i] + dt * k3[i] for i in range(12)), thrust, tau, params)
    w = dt / 6.0
    nx = [x[i] + w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(12)]
    nx[6] = min(max(nx[6], -_TILT_LIMIT), _TILT_LIMIT)
    nx[7] = min(max(nx[7], -_TILT_LIMIT), _TILT_LIMIT)
    nx[8] = _wrap_angle(nx[8])
    return VehicleState.from_tuple(nx)


def fcs_attitude_tick(
    state: VehicleState,
    ref: ControlReference,
    force: ForceCommand,
    gains: ControllerGains,
    params: VehicleParams,
    dt: float,
) -> tuple[RotorSpeeds, VehicleState]:
    """One inner-loop period: attitude law, mixer, plant update."""
    tau = attitude_controller(ref.psi_r, force, state, gains, params)
    rotors = control_allocator(force.norm, tau, params)
    return rotors, dynamics_step(state, rotors, params, dt)


def hover_state(ref: ControlReference | None = None) -> VehicleState:
    ref = ref or ControlReference()
    return VehicleState(r=ref.r_r, alpha=(0.0, 0.0, ref.psi_r))


@dataclass
class ClosedLoop:
    """Runs the full cascade: outer loop every ``decimation`` inner ticks.

    Defaults give a 250 Hz attitude loop and a 50 Hz position loop.
    """

    ref: ControlReference = field(default_factory=ControlReference)
    state: VehicleState = field(default_factory=VehicleState)
    gains: ControllerGains = field(default_factory=ControllerGains)
    params: VehicleParams = field(default_factory=VehicleParams)
    dt: float = 0.004
    decimation: int = 5
    ticks: int = 0
    force: ForceCommand | None = None

    def step(self) -> RotorSpeeds:
        if self.force is None or self.ticks % self.decimation == 0:
            self.force = position_controller(self.ref, self.state, self.gains, self.params)
        rotors, self.state = fcs_attitude_tick(
            self.state, self.ref, self.force, self.gains, self.params, self.dt
        )
        self.ticks += 1
        return rotors

    def run(self, n_ticks: int) -> list[VehicleState]:
        out = []
        for _ in range(n_ticks):
            self.step()
            out.append(self.state)
        return out

    def position_error(self) -> float:
        return math.dist(self.state.r, self.ref.r_r)


class FlightControlPayload:
    """The measured periodic workload: one attitude tick per call.

    The force command is computed once at construction.  ``update_force`` is
    the position-loop entry point, meant for a separate lower-rate thread so
    that each measured call runs the identical code path.
    """

    def __init__(
        self,
        ref: ControlReference | None = None,
        state: VehicleState | None = None,
        gains: ControllerGains | None = None,
        params: VehicleParams | None = None,
        dt: float = 0.004,
    ):
        self.ref = ref or ControlReference()
        self.state = state or hover_state(self.ref)
        self.gains = gains or ControllerGains()
        self.params = params or VehicleParams()
        self.dt = dt
        self.rotors = RotorSpeeds((self.params.hover_speed,) * 4)
        self.force = position_controller(self.ref, self.state, self.gains, self.params)

    def update_force(self) -> None:
        self.force = position_controller(self.ref, self.state, self.gains, self.params)

    def __call__(self) -> None:
        self.rotors, self.state = fcs_attitude_tick(
            self.state, self.ref, self.force, self.gains, self.params, self.dt
        )
