"""Benchmark plants and reference trajectories.

Three systems: a 1-D double integrator with friction, a differential-drive
unicycle with wheel-speed constraints, and a quadrotor with full quaternion
rigid-body dynamics. Both the plant and the MPC internal model integrate
with forward Euler at the same sample time, so there is no model-plant
mismatch; the quadrotor plant additionally renormalizes its quaternion each
step (the renormalization is part of the discrete step map and of its
Jacobian). All objects are immutable descriptors with pure step functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class NonFiniteState(Exception):
    """A step produced NaN or infinity."""


class UnknownKind(ValueError):
    """Unrecognized reference-trajectory name."""


def _finite(x):
    if not np.isfinite(x).all():
        raise NonFiniteState("state left the finite range")
    return x


@dataclass(frozen=True)
class LinearSystem:
    """Continuous-time x' = Ax + Bu, stepped as x+ = (I + dt A)x + dt B u."""

    A: np.ndarray
    B: np.ndarray
    dt: float
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def discrete(self):
        """Forward-Euler pair (Ad, Bd) shared by plant and MPC model."""
        return np.eye(self.n) + self.dt * self.A, self.dt * self.B

    def step(self, x, u, rng=None):
        Ad, Bd = self.discrete()
        x_next = Ad @ np.asarray(x, dtype=float) + Bd @ np.atleast_1d(np.asarray(u, dtype=float))
        if rng is not None and self.noise_std > 0:
            x_next = x_next + self.noise_std * rng.standard_normal(self.n)
        return _finite(x_next)

    def jacobians(self, x, u):
        return self.discrete()


def double_integrator(dt=0.01, noise_std=0.0) -> LinearSystem:
    """1-D double integrator with viscous friction -0.05 on velocity."""
    return LinearSystem(A=[[0.0, 1.0], [0.0, -0.05]], B=[[0.0], [1.0]],
                        dt=dt, noise_std=noise_std)


def box_control_constraints(n, m, u_bd):
    """Rows enforcing |u_i| <= u_bd on the composite (x, u) stage variable."""
    G = np.zeros((2 * m, n + m))
    G[:m, n:] = np.eye(m)
    G[m:, n:] = -np.eye(m)
    l = np.full(2 * m, float(u_bd))
    return G, l


@dataclass(frozen=True)
class UnicycleSystem:
    """Differential-drive unicycle: state (px, py, heading), control (speed, turn rate).

    Wheel radius r, wheel separation d, per-wheel speed limit omega_max give
    four linear control constraints: |2 u_s + d u_w| and |2 u_s - d u_w|
    both bounded by 2 r omega_max.
    """

    r: float = 0.1
    d: float = 0.5
    omega_max: float = TWO_PI
    dt: float = 0.05
    noise_std: float = 0.0

    n: int = field(default=3, init=False)
    m: int = field(default=2, init=False)

    def continuous(self, x, u):
        th, us, uw = x[2], u[0], u[1]
        return np.array([np.cos(th) * us, np.sin(th) * us, uw])

    def step(self, x, u, rng=None):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x_next = x + self.dt * self.continuous(x, u)
        if rng is not None and self.noise_std > 0:
            x_next = x_next + self.noise_std * rng.standard_normal(self.n)
        return _finite(x_next)

    def jacobians(self, x, u):
        th, us = x[2], u[0]
        Jx = np.eye(3)
        Jx[0, 2] = -self.dt * np.sin(th) * us
        Jx[1, 2] = self.dt * np.cos(th) * us
        Ju = self.dt * np.array([[np.cos(th), 0.0], [np.sin(th), 0.0], [0.0, 1.0]])
        return Jx, Ju

    def constraints(self):
        """Four wheel-limit rows on the composite stage variable, rhs 2 r omega_max."""
        bound = 2.0 * self.omega_max * self.r
        G = np.zeros((4, 5))
        G[0, 3:] = [2.0, self.d]
        G[1, 3:] = [-2.0, -self.d]
        G[2, 3:] = [2.0, -self.d]
        G[3, 3:] = [-2.0, self.d]
        l = np.full(4, bound)
        return G, l

    def model_dynamics(self):
        """(dynamics, jacobian) callbacks over the composite tau = (x, u)."""
        def dyn(tau):
            return self.step(tau[:3], tau[3:])

        def jac(tau):
            Jx, Ju = self.jacobians(tau[:3], tau[3:])
            return np.hstack([Jx, Ju])

        return dyn, jac


def _skew(a):
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


@dataclass(frozen=True)
class QuadrotorSystem:
    """Quadrotor rigid body: state (p, v, quaternion wxyz, body rates), 4 rotor thrusts.

    X-configuration mixer with arm length ``arm`` and yaw torque coefficient
    ``k_yaw`` maps rotor thrusts to total thrust and body moments. The plant
    step renormalizes the quaternion; the smooth model used inside the MPC
    does not (renormalization happens outside the solver).
    """

    mass: float = 0.03
    inertia_diag: tuple = (1.43e-5, 1.43e-5, 2.89e-5)
    gravity: float = 9.81
    arm: float = 0.046
    k_yaw: float = 0.005944
    dt: float = 0.05
    noise_std: float = 0.0

    n: int = field(default=13, init=False)
    m: int = field(default=4, init=False)

    @property
    def J(self):
        return np.diag(self.inertia_diag)

    @property
    def mixer(self):
        a = self.arm / np.sqrt(2.0)
        k = self.k_yaw
        return np.array([[1.0, 1.0, 1.0, 1.0],
                         [-a, -a, a, a],
                         [-a, a, a, -a],
                         [-k, k, -k, k]])

    @property
    def hover_thrust(self):
        """Per-rotor thrust balancing gravity."""
        return np.full(4, self.mass * self.gravity / 4.0)

    def continuous(self, x, u):
        v, q, w = x[3:6], x[6:10], x[10:13]
        wrench = self.mixer @ np.asarray(u, dtype=float)
        fT, M = wrench[0], wrench[1:]
        qw, qx, qy, qz = q
        z_body = np.array([2.0 * (qx * qz + qw * qy),
                           2.0 * (qy * qz - qw * qx),
                           qw * qw - qx * qx - qy * qy + qz * qz])
        vdot = (fT / self.mass) * z_body + np.array([0.0, 0.0, -self.gravity])
        qdot = 0.5 * np.concatenate([[-q[1:] @ w], qw * w + np.cross(q[1:], w)])
        Jd = np.asarray(self.inertia_diag)
        wdot = (M - np.cross(w, Jd * w)) / Jd
        return np.concatenate([v, vdot, qdot, wdot])

    def continuous_jacobians(self, x, u):
        q, w = x[6:10], x[10:13]
        qw = q[0]
        qv = q[1:]
        wrench = self.mixer @ np.asarray(u, dtype=float)
        fT = wrench[0]
        qw_, qx, qy, qz = q
        z_body = np.array([2.0 * (qx * qz + qw_ * qy),
                           2.0 * (qy * qz - qw_ * qx),
                           qw_ * qw_ - qx * qx - qy * qy + qz * qz])
        dz_dq = 2.0 * np.array([[qy, qz, qw_, qx],
                                [-qx, -qw_, qz, qy],
                                [qw_, -qx, -qy, qz]])
        A = np.zeros((13, 13))
        A[0:3, 3:6] = np.eye(3)
        A[3:6, 6:10] = (fT / self.mass) * dz_dq
        A[6:10, 6:10] = 0.5 * np.block([[np.zeros((1, 1)), -w[None, :]],
                                        [w[:, None], -_skew(w)]])
        A[6:10, 10:13] = 0.5 * np.vstack([-qv[None, :], qw * np.eye(3) + _skew(qv)])
        Jd = np.asarray(self.inertia_diag)
        A[10:13, 10:13] = (-_skew(w) @ np.diag(Jd) + _skew(Jd * w)) / Jd[:, None]
        B = np.zeros((13, 4))
        B[3:6, :] = np.outer(z_body / self.mass, self.mixer[0])
        B[10:13, :] = self.mixer[1:] / Jd[:, None]
        return A, B

    def model_step(self, x, u):
        """Euler step without renormalization (smooth model for the MPC)."""
        return np.asarray(x, dtype=float) + self.dt * self.continuous(x, u)

    def step(self, x, u, rng=None):
        x_next = self.model_step(x, u)
        x_next[6:10] /= np.linalg.norm(x_next[6:10])
        if rng is not None and self.noise_std > 0:
            x_next = x_next + self.noise_std * rng.standard_normal(self.n)
            x_next[6:10] /= np.linalg.norm(x_next[6:10])
        return _finite(x_next)

    def jacobians(self, x, u):
        """Jacobians of the renormalized discrete step."""
        A, B = self.continuous_jacobians(x, u)
        Jx = np.eye(13) + self.dt * A
        Ju = self.dt * B
        q_pre = np.asarray(x, dtype=float)[6:10] + self.dt * self.continuous(x, u)[6:10]
        nrm = np.linalg.norm(q_pre)
        qh = q_pre / nrm
        D = (np.eye(4) - np.outer(qh, qh)) / nrm
        Jx[6:10] = D @ Jx[6:10]
        Ju[6:10] = D @ Ju[6:10]
        return Jx, Ju

    def model_dynamics(self):
        """(dynamics, jacobian) callbacks over tau = (x, u), no renormalization."""
        def dyn(tau):
            return self.model_step(tau[:13], tau[13:])

        def jac(tau):
            A, B = self.continuous_jacobians(tau[:13], tau[13:])
            return np.hstack([np.eye(13) + self.dt * A, self.dt * B])

        return dyn, jac


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Analytic reference sampled at t = k dt, defined for every k >= 0."""

    kind: str
    dt: float
    state_fn: callable
    control_fn: callable

    def state(self, k):
        return self.state_fn(k * self.dt)

    def control(self, k):
        return self.control_fn(k * self.dt)


def make_reference(kind, dt, system=None) -> ReferenceTrajectory:
    """Named analytic references for the three benchmark systems.

    di_sine:          [1 + t - cos t, 1 + sin t], zero control reference.
    unicycle_circle:  [1 - cos(t/2), t/2, atan2(1, sin(t/2))]; the heading
                      uses the two-argument arctangent, which is smooth and
                      matches the velocity direction (the naive one-argument
                      form is singular at t = 0).
    figure8_3d:       3-D Lissajous figure eight (0.5 m wide, 0.2 m of
                      vertical motion, 10 s period), hover attitude, and the
                      hover-thrust control reference.
    """
    if kind == "di_sine":
        def state(t):
            return np.array([1.0 + t - np.cos(t), 1.0 + np.sin(t)])

        def control(t):
            return np.zeros(1)

        return ReferenceTrajectory(kind, dt, state, control)
    if kind == "unicycle_circle":
        def state(t):
            return np.array([1.0 - np.cos(0.5 * t), 0.5 * t,
                             np.arctan2(1.0, np.sin(0.5 * t))])

        def control(t):
            return np.zeros(2)

        return ReferenceTrajectory(kind, dt, state, control)
    if kind == "figure8_3d":
        amp, zamp, om = 0.5, 0.2, TWO_PI / 10.0
        if system is None:
            system = QuadrotorSystem(dt=dt)
        hover = system.hover_thrust

        def state(t):
            s, c = np.sin(om * t), np.cos(om * t)
            pos = np.array([amp * s, amp * s * c, zamp * s])
            vel = np.array([amp * om * c, amp * om * np.cos(2 * om * t), zamp * om * c])
            return np.concatenate([pos, vel, [1.0, 0.0, 0.0, 0.0], np.zeros(3)])

        def control(t):
            return hover.copy()

        return ReferenceTrajectory(kind, dt, state, control)
    raise UnknownKind(f"unknown reference kind {kind!r}")


def reference(kind, k, dt, system=None):
    """State reference x_bar_k of the named trajectory at t = k dt."""
    return make_reference(kind, dt, system=system).state(k)
