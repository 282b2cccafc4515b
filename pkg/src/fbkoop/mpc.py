"""Condensed linear MPC on the lifted model with box input constraints.

States are eliminated through the horizon, leaving a strictly convex
quadratic in the stacked inputs (optionally plus a soft quadratic-hinge
state-bound penalty), solved by accelerated projected gradient descent.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .datagen import NoiseSpec, snr_sigma
from .numerics import norm2_est
from .operator import KoopmanModel
from .lifting import lift
from .seeding import stream
from .systems import STATE_NORM_LIMIT, SystemSpec, rk4_step


class MaxIterExceeded(Warning):
    """QP solver hit the iteration cap; the best iterate was returned."""


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, penalties and bounds of the tracking controller."""

    horizon: int
    q_x: tuple          # per-channel state weights (nonnegative)
    r_u: tuple          # per-channel input weights (positive)
    u_min: tuple
    u_max: tuple
    x_min: tuple | None = None
    x_max: tuple | None = None
    rho: float = 1e3    # soft state-bound penalty weight
    feedback: NoiseSpec | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.r_u) <= 0:
            raise ValueError("input weights must be positive (strict convexity)")
        if min(self.q_x) < 0:
            raise ValueError("state weights must be nonnegative")
        if not all(lo < hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("input box must have u_min < u_max elementwise")
        if (self.x_min is None) != (self.x_max is None):
            raise ValueError("state bounds must be given as a pair")


@dataclass
class SoftStateBounds:
    """Quadratic hinge penalty rho * ||(v - hi)_+||^2 + rho * ||(lo - v)_+||^2."""

    S: np.ndarray       # maps stacked inputs to stacked predicted states
    base: np.ndarray    # predicted states at u = 0
    lo: np.ndarray
    hi: np.ndarray
    rho: float

    def penalty(self, u: np.ndarray) -> float:
        v = self.S @ u + self.base
        over = np.maximum(v - self.hi, 0.0)
        under = np.maximum(self.lo - v, 0.0)
        return float(self.rho * ((over ** 2).sum() + (under ** 2).sum()))

    def grad(self, u: np.ndarray) -> np.ndarray:
        v = self.S @ u + self.base
        over = np.maximum(v - self.hi, 0.0)
        under = np.maximum(self.lo - v, 0.0)
        return 2.0 * self.rho * (self.S.T @ (over - under))


@dataclass
class CondensedQp:
    """min u^T P u + 2 g^T u + const over the box, plus an optional soft term."""

    P: np.ndarray
    g: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    const: float
    soft: SoftStateBounds | None = None

    def cost(self, u: np.ndarray) -> float:
        value = float(u @ self.P @ u + 2.0 * self.g @ u + self.const)
        if self.soft is not None:
            value += self.soft.penalty(u)
        return value

    def grad(self, u: np.ndarray) -> np.ndarray:
        grad = 2.0 * (self.P @ u + self.g)
        if self.soft is not None:
            grad = grad + self.soft.grad(u)
        return grad


@dataclass
class SolveInfo:
    converged: bool
    iterations: int
    kkt_residual: float


@dataclass
class TrackResult:
    """Closed-loop log; arrays share the completed-step count."""

    dt: float
    reference: np.ndarray    # (T, n)
    actual: np.ndarray       # (T, n)
    inputs: np.ndarray       # (T-1, m)
    solve_times: np.ndarray  # (T-1,)
    stage_costs: np.ndarray  # (T-1,)
    diverged: bool = False

    def __post_init__(self):
        T = len(self.reference)
        if len(self.actual) != T or len(self.inputs) != T - 1:
            raise ValueError("inconsistent track log lengths")


def condense(model: KoopmanModel, z0: np.ndarray, ref: np.ndarray,
             cfg: MpcConfig) -> CondensedQp:
    """Eliminate the lifted states over the horizon.

    The cost penalizes the H predicted states z_1..z_H against the H
    reference rows and every input in the stack.
    """
    H, n, m, N = cfg.horizon, model.n, model.m, model.lifted_dim
    ref = np.asarray(ref, dtype=float).reshape(H, n)
    q = np.asarray(cfg.q_x, dtype=float)
    r = np.asarray(cfg.r_u, dtype=float)

    # CA^k z0 and the C A^(i-j) B impulse blocks
    CApow = np.empty((H + 1, n, N))
    CApow[0] = np.eye(N)[:n]
    for k in range(H):
        CApow[k + 1] = CApow[k] @ model.A
    f0 = np.concatenate([CApow[k + 1] @ z0 for k in range(H)])
    E = np.zeros((H * n, H * m))
    for i in range(H):
        for j in range(i + 1):
            E[i * n:(i + 1) * n, j * m:(j + 1) * m] = CApow[i - j] @ model.B
    Qbar = np.tile(q, H)
    Rbar = np.tile(r, H)
    err0 = f0 - ref.reshape(-1)
    P = E.T @ (Qbar[:, None] * E) + np.diag(Rbar)
    P = 0.5 * (P + P.T)
    g = E.T @ (Qbar * err0)
    const = float(err0 @ (Qbar * err0))
    soft = None
    if cfg.x_min is not None:
        soft = SoftStateBounds(S=E, base=f0,
                               lo=np.tile(np.asarray(cfg.x_min, float), H),
                               hi=np.tile(np.asarray(cfg.x_max, float), H),
                               rho=cfg.rho)
    return CondensedQp(P=P, g=g, lo=np.tile(np.asarray(cfg.u_min, float), H),
                       hi=np.tile(np.asarray(cfg.u_max, float), H),
                       const=const, soft=soft)


def solve_box_qp(qp: CondensedQp, tol: float = 1e-8,
                 max_iter: int = 20000) -> tuple[np.ndarray, SolveInfo]:
    """Accelerated projected gradient descent with adaptive restart.

    Convergence is declared on the unit-step projected-gradient residual
    ||u - clip(u - grad(u))||_inf < tol; the iterate is inside the box by
    construction.  On hitting max_iter the best iterate comes back with a
    MaxIterExceeded warning.
    """
    lipschitz = 2.0 * norm2_est(qp.P)
    if qp.soft is not None:
        lipschitz += 2.0 * qp.soft.rho * norm2_est(qp.soft.S) ** 2
    step = 1.0 / max(lipschitz, np.finfo(float).tiny)

    def project(u):
        return np.minimum(np.maximum(u, qp.lo), qp.hi)

    def residual(u):
        return float(np.max(np.abs(u - project(u - qp.grad(u)))))

    # warm start at the clipped unconstrained minimizer of the quadratic part
    try:
        u = project(np.linalg.solve(qp.P, -qp.g))
    except np.linalg.LinAlgError:
        u = project(np.zeros_like(qp.g))
    y = u.copy()
    t_acc = 1.0
    best_u, best_r = u.copy(), residual(u)
    for it in range(max_iter):
        if best_r < tol:
            return best_u, SolveInfo(True, it, best_r)
        u_next = project(y - step * qp.grad(y))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
        momentum = (t_acc - 1.0) / t_next
        # restart acceleration when momentum points uphill
        if (y - u_next) @ (u_next - u) > 0:
            y = u_next.copy()
            t_next = 1.0
        else:
            y = u_next + momentum * (u_next - u)
        u, t_acc = u_next, t_next
        r = residual(u)
        if r < best_r:
            best_u, best_r = u.copy(), r
    warnings.warn(f"box QP stopped at residual {best_r:.3e} after {max_iter} iterations",
                  MaxIterExceeded)
    return best_u, SolveInfo(False, max_iter, best_r)


def mpc_step(model: KoopmanModel, x_measured: np.ndarray, ref_window: np.ndarray,
             cfg: MpcConfig, tol: float = 1e-8) -> np.ndarray:
    """Lift the measurement, condense, solve, return the first input."""
    x_measured = np.asarray(x_measured, dtype=float)
    if not np.all(np.isfinite(x_measured)):
        raise ValueError("measurement contains non-finite entries")
    z0 = lift(x_measured, model.lifting)
    qp = condense(model, z0, ref_window, cfg)
    u, _ = solve_box_qp(qp, tol=tol)
    return u[:model.m]


def pad_reference_window(ref: np.ndarray, start: int, horizon: int) -> np.ndarray:
    """Next `horizon` reference rows from `start`, repeating the final row."""
    T = len(ref)
    idx = np.minimum(np.arange(start, start + horizon), T - 1)
    return ref[idx]


def track(spec: SystemSpec, model: KoopmanModel, ref: np.ndarray, cfg: MpcConfig,
          seed: int = 0, x0: np.ndarray | None = None) -> TrackResult:
    """Closed-loop tracking with noisy feedback against the true dynamics.

    Feedback noise sigmas follow the reference signal's per-channel rms at
    the configured SNR.  Divergence of the true state is recorded as a
    truncated result, not raised.
    """
    ref = np.asarray(ref, dtype=float)
    if len(ref) < 2:
        raise ValueError("reference must contain at least 2 rows")
    n = spec.state_dim
    x = np.asarray(ref[0] if x0 is None else x0, dtype=float)
    q = np.asarray(cfg.q_x, dtype=float)
    r = np.asarray(cfg.r_u, dtype=float)

    sig = np.zeros(n)
    if cfg.feedback is not None and cfg.feedback.snr_db is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # zero-rms channels get sigma 0
            sig = np.array([snr_sigma(ref[:, i], cfg.feedback.snr_db) for i in range(n)])
    rng = stream(seed, "feedback-noise")

    actual = [x.copy()]
    inputs, solve_times, stage_costs = [], [], []
    diverged = False
    for k in range(len(ref) - 1):
        measured = x + rng.standard_normal(n) * sig
        window = pad_reference_window(ref, k + 1, cfg.horizon)
        t0 = time.perf_counter()
        u = mpc_step(model, measured, window, cfg)
        solve_times.append(time.perf_counter() - t0)
        err = x - ref[k]
        stage_costs.append(float(err @ (q * err) + u @ (r * u)))
        inputs.append(u)
        x = rk4_step(spec.deriv, x, u, model.dt)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > STATE_NORM_LIMIT:
            diverged = True
            break
        actual.append(x.copy())
    T = len(actual)
    return TrackResult(
        dt=model.dt,
        reference=ref[:T],
        actual=np.array(actual),
        inputs=np.array(inputs[:T - 1]).reshape(T - 1, -1),
        solve_times=np.array(solve_times[:T - 1]),
        stage_costs=np.array(stage_costs[:T - 1]),
        diverged=diverged,
    )


def sinusoid_joint_reference(n_links: int, dt: float, duration: float,
                             amplitude: float = 0.5, frequency: float = 0.2,
                             phase_step: float = np.pi / 2) -> np.ndarray:
    """Phase-shifted joint sinusoids with consistent velocities, (T, 2*links)."""
    t = np.arange(0.0, duration + 0.5 * dt, dt)
    w = 2.0 * np.pi * frequency
    phases = phase_step * np.arange(n_links)
    q = amplitude * np.sin(w * t[:, None] + phases[None, :])
    qd = amplitude * w * np.cos(w * t[:, None] + phases[None, :])
    return np.hstack([q, qd])
