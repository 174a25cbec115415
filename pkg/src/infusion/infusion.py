"""The infusion chain: a proposal that leaks the target into model sampling.

At step ``t`` each dimension is drawn, independently, from the model
transition with probability ``1 - alpha(t)`` or from a narrow Gaussian
``N(x_i, sigma_delta**2)`` around the target with probability ``alpha(t)``.

Random-number consumption per step is fixed regardless of which branch
wins: first ``n*d`` uniforms for the branch choices, then ``n*d`` standard
normals shared by both branches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from infusion.autodiff import (
    Tensor,
    as_tensor,
    gaussian_log_density,
    gaussian_log_density_terms,
    logaddexp,
    no_grad,
    tsum,
)
from infusion.model import ChainTrace, FactorialGaussian, _rows


@dataclass(frozen=True)
class InfusionSchedule:
    alpha0: float = 0.0
    omega: float = 0.01
    sigma_delta: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.sigma_delta <= 0:
            raise ValueError("sigma_delta must be > 0")

    def alpha_at(self, t: int) -> float:
        return alpha_at(self, t)


def alpha_at(sched: InfusionSchedule, t: int) -> float:
    """Linear infusion rate ``min(1, alpha0 + t * omega)`` for step ``t >= 0``."""
    if t < 0:
        raise ValueError("step index must be >= 0")
    return min(1.0, sched.alpha0 + t * sched.omega)


def draw_branches(rng: np.random.Generator, shape, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(take_target, noise)`` following the documented draw order."""
    take_target = rng.random(shape) < alpha
    noise = rng.standard_normal(shape)
    return take_target, noise


def infusion_step(
    rng: np.random.Generator,
    op_output: FactorialGaussian,
    x,
    alpha: float,
    sigma_delta: float,
) -> np.ndarray:
    mean, var = op_output.mean_array, op_output.var_array
    x = np.asarray(x, dtype=np.float64)
    shape = np.broadcast_shapes(mean.shape, x.shape)
    take_target, noise = draw_branches(rng, shape, alpha)
    return np.where(take_target, x + sigma_delta * noise, mean + np.sqrt(var) * noise)


def mixture_log_density(z, mean, var, x, alpha: float, sigma_delta: float) -> Tensor:
    """Per-row ``sum_i log[(1-a) N(z_i; mean_i, var_i) + a N(z_i; x_i, sd^2)]``.

    Differentiable in ``z``, ``mean`` and ``var``. The endpoints ``alpha=0``
    and ``alpha=1`` collapse to a single Gaussian term.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return gaussian_log_density(z, mean, var)
    delta_var = sigma_delta * sigma_delta
    if alpha == 1.0:
        return gaussian_log_density(z, x, delta_var)
    model_terms = gaussian_log_density_terms(z, mean, var) + float(np.log1p(-alpha))
    target_terms = gaussian_log_density_terms(z, x, delta_var) + float(np.log(alpha))
    return tsum(logaddexp(model_terms, target_terms), axis=-1)


def infusion_log_density(z, op_output: FactorialGaussian, x, alpha: float, sigma_delta: float) -> np.ndarray:
    with no_grad():
        return mixture_log_density(
            as_tensor(z), op_output.mean_array, op_output.var_array, np.asarray(x, dtype=np.float64), alpha, sigma_delta
        ).data


def run_infusion_chain(
    rng: np.random.Generator,
    prior: FactorialGaussian,
    op,
    sched: InfusionSchedule,
    x,
    T: int | None = None,
    mode: str | None = None,
) -> ChainTrace:
    """Sample ``z~(0..T-1)`` for each row of ``x``.

    ``logp[t]`` is the model density of ``z~(t)`` given ``z~(t-1)`` (prior
    at t=0) and ``logq[t]`` the infusion-mixture density of the same draw.
    """
    T = op.n_steps if T is None else T
    if T < 1:
        raise ValueError("T must be >= 1")
    mode = mode or getattr(op, "default_mode", "eval")
    x = _rows(x)
    n, d = x.shape
    trace = ChainTrace([], [], logq=[])
    with no_grad():
        out = FactorialGaussian(np.broadcast_to(prior.mean_array, (n, d)), np.broadcast_to(prior.var_array, (n, d)))
        for t in range(T):
            if t > 0:
                out = op.transition(trace.states[-1], t, mode)
            alpha = alpha_at(sched, t)
            z = infusion_step(rng, out, x, alpha, sched.sigma_delta)
            trace.states.append(z)
            trace.means.append(np.array(out.mean_array))
            trace.logp.append(out.log_density(z))
            trace.logq.append(infusion_log_density(z, out, x, alpha, sched.sigma_delta))
    return trace
