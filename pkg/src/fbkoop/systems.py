"""Ground-truth continuous dynamics and a fixed-step RK4 integrator.

Benchmark systems: a controlled Van der Pol oscillator, a planar n-link
manipulator with closed-form Lagrangian dynamics, and a plain linear system
used as an oracle fixture in tests and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STATE_NORM_LIMIT = 1e6


class Diverged(Exception):
    """State norm exceeded the divergence limit during simulation."""


@dataclass(frozen=True)
class VdpParams:
    mu: float = 1.0


@dataclass(frozen=True)
class ArmParams:
    """Per-link parameters of a planar serial manipulator.

    Joints are revolute, angles measured relative to the previous link with
    the first from the +x axis; gravity acts along -y.
    """

    masses: tuple
    lengths: tuple
    com_offsets: tuple
    inertias: tuple
    gravity: float = 9.81

    def __post_init__(self):
        k = len(self.masses)
        if not (len(self.lengths) == len(self.com_offsets) == len(self.inertias) == k):
            raise ValueError("per-link parameter tuples must share a length")
        if any(v <= 0 for v in self.masses + self.lengths + self.com_offsets + self.inertias):
            raise ValueError("masses, lengths, com offsets and inertias must be positive")
        if self.gravity < 0:
            raise ValueError("gravity must be >= 0")

    @property
    def n_links(self) -> int:
        return len(self.masses)

    @staticmethod
    def uniform(n_links: int = 2, mass: float = 0.1, length: float = 0.33,
                inertia: float = 1.5, gravity: float = 9.81) -> "ArmParams":
        """Identical links, center of mass at mid-length."""
        return ArmParams(
            masses=(mass,) * n_links,
            lengths=(length,) * n_links,
            com_offsets=(length / 2,) * n_links,
            inertias=(inertia,) * n_links,
            gravity=gravity,
        )


@dataclass(frozen=True)
class LinearParams:
    """Continuous-time x' = A x + B u, stored as nested tuples."""

    a: tuple
    b: tuple


@dataclass(frozen=True)
class SystemSpec:
    kind: str  # "vdp" | "arm" | "linear"
    params: object = field(default_factory=VdpParams)

    def __post_init__(self):
        expected = {"vdp": VdpParams, "arm": ArmParams, "linear": LinearParams}
        if self.kind not in expected:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if not isinstance(self.params, expected[self.kind]):
            raise TypeError(f"{self.kind} system needs {expected[self.kind].__name__}")

    @property
    def state_dim(self) -> int:
        if self.kind == "vdp":
            return 2
        if self.kind == "arm":
            return 2 * self.params.n_links
        return len(self.params.a)

    @property
    def input_dim(self) -> int:
        if self.kind == "vdp":
            return 1
        if self.kind == "arm":
            return self.params.n_links
        return len(self.params.b[0])

    def deriv(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.kind == "vdp":
            return vdp_deriv(x, float(u[0]), self.params.mu)
        if self.kind == "arm":
            k = self.params.n_links
            return arm_deriv(x[:k], x[k:], u, self.params)
        A = np.asarray(self.params.a, dtype=float)
        B = np.asarray(self.params.b, dtype=float)
        return A @ x + B @ u


@dataclass
class Trajectory:
    """Sampled states (T, n) with the zero-order-hold inputs (T-1, m) between them."""

    dt: float
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-D arrays")
        if len(self.inputs) != len(self.states) - 1:
            raise ValueError("need exactly one input per state transition")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.inputs))):
            raise ValueError("trajectory contains non-finite entries")

    def __len__(self) -> int:
        return len(self.states)


def vdp_deriv(x: np.ndarray, u: float, mu: float = 1.0) -> np.ndarray:
    """Controlled Van der Pol oscillator: x1' = -x2, x2' = mu(-1+x1^2)x2 + x1 + u."""
    return np.array([-x[1], mu * (-1.0 + x[0] ** 2) * x[1] + x[0] + u])


def _link_reach(p: ArmParams) -> np.ndarray:
    """c[i, j]: velocity contribution of absolute angle j to the COM of link i."""
    k = p.n_links
    c = np.zeros((k, k))
    for i in range(k):
        for j in range(i):
            c[i, j] = p.lengths[j]
        c[i, i] = p.com_offsets[i]
    return c


def _arm_terms(q: np.ndarray, qd: np.ndarray, p: ArmParams):
    """Mass matrix, velocity bias and gravity bias in relative joint coordinates."""
    k = p.n_links
    c = _link_reach(p)
    m = np.asarray(p.masses)
    rho = (c * m[:, None]).T @ c                      # rho[j,l] = sum_i m_i c_ij c_il
    T = np.tril(np.ones((k, k)))                      # absolute = T @ relative
    th = T @ q
    thd = T @ qd
    dth = th[:, None] - th[None, :]
    M_abs = rho * np.cos(dth) + np.diag(p.inertias)
    h_abs = (rho * np.sin(dth)) @ (thd ** 2)
    mu_g = m @ c                                      # mu_g[j] = sum_i m_i c_ij
    g_abs = p.gravity * np.cos(th) * mu_g
    M = T.T @ M_abs @ T
    bias = T.T @ (h_abs + g_abs)
    return M, bias, M_abs, thd


def arm_deriv(q: np.ndarray, qd: np.ndarray, tau: np.ndarray, p: ArmParams) -> np.ndarray:
    """Joint accelerations of the planar arm: (qd, M(q)^-1 (tau - C qd - g))."""
    M, bias, _, _ = _arm_terms(np.asarray(q, float), np.asarray(qd, float), p)
    qdd = np.linalg.solve(M, np.asarray(tau, float) - bias)
    return np.concatenate([qd, qdd])


def arm_gravity_torque(q: np.ndarray, p: ArmParams) -> np.ndarray:
    """Joint torques balancing gravity at configuration q with zero velocity."""
    _, bias, _, _ = _arm_terms(np.asarray(q, float), np.zeros(p.n_links), p)
    return bias


def arm_energy(q: np.ndarray, qd: np.ndarray, p: ArmParams) -> float:
    """Total mechanical energy (kinetic plus gravitational potential)."""
    q = np.asarray(q, float)
    qd = np.asarray(qd, float)
    _, _, M_abs, thd = _arm_terms(q, qd, p)
    kinetic = 0.5 * thd @ M_abs @ thd
    c = _link_reach(p)
    th = np.tril(np.ones((p.n_links, p.n_links))) @ q
    heights = c @ np.sin(th)
    potential = p.gravity * np.asarray(p.masses) @ heights
    return float(kinetic + potential)


def rk4_step(deriv: Callable[[np.ndarray, np.ndarray], np.ndarray],
             x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta step with the input held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(spec: SystemSpec, x0: np.ndarray, inputs: Sequence[np.ndarray],
             dt: float) -> Trajectory:
    """Roll the system forward under the given input sequence."""
    x0 = np.asarray(x0, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] == 0:
        raise ValueError("need at least one input")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state contains non-finite entries")
    states = np.empty((len(inputs) + 1, x0.size))
    states[0] = x0
    x = x0
    for k, u in enumerate(inputs):
        x = rk4_step(spec.deriv, x, u, dt)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > STATE_NORM_LIMIT:
            raise Diverged(f"state norm exceeded {STATE_NORM_LIMIT:.0e} at step {k + 1}")
        states[k + 1] = x
    return Trajectory(dt=dt, states=states, inputs=inputs)
