"""Fixed-grid ODE integration with temperature-scaled velocity sampling.

Each integration step draws one standard-normal vector ``eps`` and evaluates
the velocity as ``mu + tau * sigma * eps`` at every solver stage, so a
trajectory is fully determined by ``(x0, [eps_k])`` and can be replayed.

Trajectories are always integrated one at a time (batch size 1). Batched
BLAS calls are not bitwise batch-invariant, and replay must be exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputDomainError, TrajectoryDivergence
from .net import NetParams, VelocityDistribution, predict

SOLVERS = ("euler", "midpoint", "rk4")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SamplerConfig:
    # Fixed step grid, so every step index is well defined for guided search.
    num_steps: int = 16
    solver: str = "rk4"
    tau: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise InputDomainError("num_steps must be >= 1")
        if self.solver not in SOLVERS:
            raise InputDomainError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.tau >= 0:
            raise InputDomainError("tau must be >= 0")


@dataclass
class Trajectory:
    times: list[float]
    states: list[np.ndarray]
    sampled_velocities: list[np.ndarray] = field(default_factory=list)
    noise_draws: list[np.ndarray] = field(default_factory=list)
    cum_log_confidence: float = 0.0
    tau: float = 0.0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "times": list(self.times),
            "states": [s.tolist() for s in self.states],
            "sampled_velocities": [v.tolist() for v in self.sampled_velocities],
            "noise_draws": [e.tolist() for e in self.noise_draws],
            "cum_log_confidence": self.cum_log_confidence,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        return cls(
            times=list(data["times"]),
            states=[np.asarray(s, dtype=np.float64) for s in data["states"]],
            sampled_velocities=[np.asarray(v, dtype=np.float64) for v in data["sampled_velocities"]],
            noise_draws=[np.asarray(e, dtype=np.float64) for e in data["noise_draws"]],
            cum_log_confidence=data["cum_log_confidence"],
            tau=data["tau"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def temperature(n: int, tau0: float = 0.01, tau_max: float = 0.08) -> float:
    """``min(tau_max, tau0 * sqrt(2 ln(n + 1)))`` for n candidate trajectories."""
    if n < 0:
        raise InputDomainError("candidate count must be >= 0")
    if not (tau0 > 0 and tau_max > 0):
        raise InputDomainError("tau0 and tau_max must be > 0")
    return min(tau_max, tau0 * math.sqrt(2.0 * math.log1p(n)))


def gaussian_log_density(v, mu, log_var: float) -> float:
    """Log-pdf of ``v`` under N(mu, exp(log_var) I)."""
    diff = np.asarray(v) - np.asarray(mu)
    d = diff.size
    return -0.5 * d * (LOG_2PI + log_var) - 0.5 * float(diff @ diff) * math.exp(-log_var)


def sample_velocity(
    dist: VelocityDistribution,
    tau: float,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Draw ``v = mu + tau * sigma * eps``; returns ``(v, eps, log N(v; mu, sigma^2 I))``."""
    if not tau >= 0:
        raise InputDomainError("tau must be >= 0")
    if eps is None:
        if rng is None:
            raise InputDomainError("need an rng or a pinned eps")
        eps = rng.standard_normal(dist.mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    v = dist.mu + tau * dist.sigma * eps
    return v, eps, gaussian_log_density(v, dist.mu, dist.log_var)


def _velocity(params, x, t, cond, tau, eps):
    mu, lv = predict(params, x[None, :], t, cond)
    mu, lv = mu[0], float(lv[0])
    if tau == 0.0:
        return mu, mu, lv
    return mu + tau * math.exp(0.5 * lv) * eps, mu, lv


def solver_step(params: NetParams, x: np.ndarray, t: float, h: float, cond, tau: float, eps: np.ndarray, solver: str):
    """Advance one step; returns ``(x_next, first-stage v, first-stage mu, first-stage log_var)``."""
    k1, mu, lv = _velocity(params, x, t, cond, tau, eps)
    if solver == "euler":
        x_next = x + h * k1
    elif solver == "midpoint":
        k2, _, _ = _velocity(params, x + 0.5 * h * k1, t + 0.5 * h, cond, tau, eps)
        x_next = x + h * k2
    else:
        k2, _, _ = _velocity(params, x + 0.5 * h * k1, t + 0.5 * h, cond, tau, eps)
        k3, _, _ = _velocity(params, x + 0.5 * h * k2, t + 0.5 * h, cond, tau, eps)
        k4, _, _ = _velocity(params, x + h * k3, t + h, cond, tau, eps)
        x_next = x + h * ((k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0)
    return x_next, k1, mu, lv


def integrate(
    params: NetParams,
    x0,
    cond,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    noise: Sequence[np.ndarray] | None = None,
    start_step: int = 0,
    start_time: float | None = None,
) -> Trajectory:
    """Integrate ``dx/dt = mu + tau sigma eps`` from t=0 to t=1.

    Pass ``noise`` (one vector per step) to replay a recorded trajectory;
    otherwise one eps per step is drawn from ``rng``. With ``tau == 0``
    no noise is drawn at all and ``rng`` may be None.
    ``start_step`` lets callers continue a partial trajectory on the same grid.
    """
    x = np.array(x0, dtype=np.float64)
    d = params.config.d
    if x.shape != (d,):
        raise InputDomainError(f"x0 must have length {d}")
    n = config.num_steps
    tau = float(config.tau)
    if noise is not None and len(noise) != n - start_step:
        raise InputDomainError(f"expected {n - start_step} noise draws, got {len(noise)}")
    h = 1.0 / n
    t0 = start_step / n if start_time is None else start_time
    traj = Trajectory(times=[t0], states=[x.copy()], tau=tau)
    zero = np.zeros(d)
    for k in range(start_step, n):
        t = k / n
        if noise is not None:
            eps = np.asarray(noise[k - start_step], dtype=np.float64)
        elif tau == 0.0:
            eps = zero
        else:
            if rng is None:
                raise InputDomainError("tau > 0 needs an rng")
            eps = rng.standard_normal(d)
        x, v, mu, lv = solver_step(params, x, t, h, cond, tau, eps, config.solver)
        if not np.all(np.isfinite(x)):
            raise TrajectoryDivergence(k)
        traj.times.append((k + 1) / n)
        traj.states.append(x.copy())
        traj.sampled_velocities.append(v)
        traj.noise_draws.append(eps.copy())
        traj.cum_log_confidence += gaussian_log_density(v, mu, lv)
    return traj


def draw_x0(d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(d)


def generate_trajectory(params: NetParams, cond, config: SamplerConfig, rng: np.random.Generator) -> Trajectory:
    """x0 ~ N(0, I) from ``rng``, then :func:`integrate` continuing on the same generator."""
    x0 = draw_x0(params.config.d, rng)
    return integrate(params, x0, cond, config, rng)


def generate(params: NetParams, cond, config: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    return generate_trajectory(params, cond, config, rng).final


def replay(params: NetParams, trajectory: Trajectory, cond, config: SamplerConfig) -> Trajectory:
    cfg = SamplerConfig(config.num_steps, config.solver, trajectory.tau, config.seed)
    return integrate(params, trajectory.states[0], cond, cfg, noise=trajectory.noise_draws)


def mean_completion(params: NetParams, x: np.ndarray, step: int, cond, config: SamplerConfig) -> np.ndarray:
    """Finish a partial trajectory from grid step ``step`` with tau=0."""
    cfg = SamplerConfig(config.num_steps, config.solver, 0.0, config.seed)
    return integrate(params, x, cond, cfg, start_step=step).final


def mean_completion_rows(params: NetParams, xs: np.ndarray, step: int, cond, config: SamplerConfig) -> np.ndarray:
    """Row-batched :func:`mean_completion` for scoring previews.

    Rows are integrated together; with the compiled kernel backend each row
    matches :func:`mean_completion` bit for bit, with the numpy backend only
    to rounding.
    """
    x = np.array(xs, dtype=np.float64)
    n = config.num_steps
    h = 1.0 / n

    def f(y, t):
        return predict(params, y, t, cond)[0]

    for k in range(step, n):
        t = k / n
        k1 = f(x, t)
        if config.solver == "euler":
            x = x + h * k1
        elif config.solver == "midpoint":
            x = x + h * f(x + 0.5 * h * k1, t + 0.5 * h)
        else:
            k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = f(x + h * k3, t + h)
            x = x + h * ((k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0)
    return x
