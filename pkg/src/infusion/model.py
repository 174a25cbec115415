"""Factorial Gaussian prior, MLP transition operator and the sampling chains."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from infusion.autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    as_tensor,
    batch_norm,
    gaussian_log_density,
    linear,
    no_grad,
    relu,
    sigmoid,
)

MODES = ("train", "eval")


@dataclass
class FactorialGaussian:
    """Independent per-dimension Gaussians.

    ``mean`` and ``var`` are ndarrays for the prior and :class:`Tensor`
    objects for transition outputs (so gradients can flow through them).
    """

    mean: np.ndarray | Tensor
    var: np.ndarray | Tensor

    @property
    def mean_array(self) -> np.ndarray:
        return self.mean.data if isinstance(self.mean, Tensor) else np.asarray(self.mean)

    @property
    def var_array(self) -> np.ndarray:
        return self.var.data if isinstance(self.var, Tensor) else np.asarray(self.var)

    def log_density(self, x) -> np.ndarray:
        with no_grad():
            return gaussian_log_density(x, self.mean_array, self.var_array).data

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        mean, var = self.mean_array, self.var_array
        shape = mean.shape if n is None else (n,) + mean.shape[-1:]
        return mean + np.sqrt(var) * rng.standard_normal(shape)


@dataclass
class OperatorConfig:
    d: int
    T: int = 15
    hidden_sizes: tuple[int, ...] = (1200, 1200)
    share_params: bool = True
    beta: float = 0.1
    eps_var: float = 1e-4
    output_mode: str = "diagonal"
    fixed_var: float | None = None
    batch_norm: bool = False

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.beta <= 0 or self.eps_var <= 0:
            raise ValueError("beta and eps_var must be positive")
        if not self.hidden_sizes:
            raise ValueError("hidden_sizes must be nonempty")
        if self.output_mode not in ("diagonal", "isotropic"):
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        if self.output_mode == "isotropic" and (self.fixed_var is None or self.fixed_var <= 0):
            raise ValueError("isotropic output needs a positive fixed_var")


def _glorot(rng, fan_in, fan_out, scale=1.0):
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class TransitionOperator:
    """MLP mapping ``z(t-1)`` to a diagonal Gaussian over ``z(t)``.

    A ReLU trunk (optionally batch-normalized before each activation, with
    separate statistics per step) feeds two heads: ``sigmoid`` for the mean
    and ``beta * sigmoid + eps_var`` for the variance.
    """

    def __init__(self, config: OperatorConfig, rng: np.random.Generator | int | None = None):
        self.config = config
        rng = np.random.default_rng(rng)
        n_blocks = 1 if config.share_params else config.T
        self.blocks = [self._init_block(rng) for _ in range(n_blocks)]
        self.bn: list[BatchNormState] = []
        if config.batch_norm:
            self.bn = [BatchNormState(h, config.T) for h in config.hidden_sizes]

    def _init_block(self, rng) -> dict[str, Parameter]:
        cfg = self.config
        block = {}
        sizes = (cfg.d,) + cfg.hidden_sizes
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            block[f"W{i}"] = Parameter(_glorot(rng, fan_in, fan_out))
            block[f"b{i}"] = Parameter(np.zeros(fan_out))
        h = sizes[-1]
        # heads start small: means near 0.5, variances mid-range
        block["W_mean"] = Parameter(_glorot(rng, h, cfg.d, 0.1))
        block["b_mean"] = Parameter(np.zeros(cfg.d))
        block["W_var"] = Parameter(_glorot(rng, h, cfg.d, 0.1))
        block["b_var"] = Parameter(np.zeros(cfg.d))
        return block

    @property
    def n_steps(self) -> int:
        return self.config.T

    @property
    def default_mode(self) -> str:
        if self.bn and not all(s.finalized for s in self.bn):
            return "train"
        return "eval"

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for k, block in enumerate(self.blocks):
            out.extend((f"block{k}.{name}", p) for name, p in block.items())
        for i, state in enumerate(self.bn):
            for t in range(1, state.n_steps + 1):
                out.append((f"bn{i}.scale.{t}", state.scale[t]))
                out.append((f"bn{i}.shift.{t}", state.shift[t]))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def transition(self, z_prev, t: int, mode: str = "train") -> FactorialGaussian:
        """Output distribution of ``p(t)(. | z_prev)`` for a batch of rows."""
        cfg = self.config
        if not 1 <= t <= cfg.T:
            raise ValueError(f"step {t} out of range 1..{cfg.T}")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        h = as_tensor(z_prev)
        if h.ndim == 1:
            h = Tensor(h.data[None, :])
        block = self.blocks[0 if cfg.share_params else t - 1]
        for i in range(len(cfg.hidden_sizes)):
            h = linear(h, block[f"W{i}"], block[f"b{i}"])
            if self.bn:
                h = batch_norm(h, self.bn[i], t, mode)
            h = relu(h)
        mean = sigmoid(linear(h, block["W_mean"], block["b_mean"]))
        if cfg.output_mode == "isotropic":
            var = Tensor(np.full(mean.shape, cfg.fixed_var))
        else:
            var = sigmoid(linear(h, block["W_var"], block["b_var"])) * cfg.beta + cfg.eps_var
        return FactorialGaussian(mean, var)

    # -- serialization helpers -------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, state in enumerate(self.bn):
            for t in range(1, state.n_steps + 1):
                arrays[f"bn{i}.running_mean.{t}"] = state.running_mean[t].copy()
                arrays[f"bn{i}.running_var.{t}"] = state.running_var[t].copy()
                if t in state.eval_mean:
                    arrays[f"bn{i}.eval_mean.{t}"] = state.eval_mean[t].copy()
                    arrays[f"bn{i}.eval_var.{t}"] = state.eval_var[t].copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for i, state in enumerate(self.bn):
            state.eval_mean.clear()
            state.eval_var.clear()
            for t in range(1, state.n_steps + 1):
                state.running_mean[t] = np.array(arrays[f"bn{i}.running_mean.{t}"])
                state.running_var[t] = np.array(arrays[f"bn{i}.running_var.{t}"])
                if f"bn{i}.eval_mean.{t}" in arrays:
                    state.eval_mean[t] = np.array(arrays[f"bn{i}.eval_mean.{t}"])
                    state.eval_var[t] = np.array(arrays[f"bn{i}.eval_var.{t}"])


def transition_forward(op: TransitionOperator, z_prev, t: int, mode: str = "train") -> FactorialGaussian:
    return op.transition(z_prev, t, mode)


@dataclass
class ChainTrace:
    """States of one batch of chains, each entry shaped ``[n, d]``.

    ``logp[t]`` is the model log-density of ``states[t]`` (prior for t=0),
    ``logq[t]`` the proposal log-density when the chain is an infusion chain.
    ``means[t]`` holds the distribution mean that ``states[t]`` was drawn
    from, which is what image grids display.
    """

    states: list[np.ndarray]
    logp: list[np.ndarray]
    logq: list[np.ndarray] | None = None
    means: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def fit_prior(train_data, var_floor: float = 1e-4) -> FactorialGaussian:
    """Maximum-likelihood factorial Gaussian (divisor n), variance floored."""
    X = np.asarray(train_data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("fit_prior needs a [n, d] matrix with n >= 2")
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    return FactorialGaussian(X.mean(axis=0), np.maximum(X.var(axis=0), var_floor))


def sample_prior(rng: np.random.Generator, prior: FactorialGaussian, n: int) -> np.ndarray:
    return prior.sample(rng, n)


def _step_for(op, t: int) -> int:
    # sampling past the trained horizon reuses the last step's parameters and statistics
    return min(t, op.n_steps)


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def run_model_chain(
    rng: np.random.Generator,
    prior: FactorialGaussian,
    op,
    T_sample: int | None = None,
    n: int = 1,
    mode: str | None = None,
) -> ChainTrace:
    T_sample = op.n_steps if T_sample is None else T_sample
    if T_sample < 1:
        raise ValueError("T_sample must be >= 1")
    mode = mode or getattr(op, "default_mode", "eval")
    with no_grad():
        z = sample_prior(rng, prior, n)
        trace = ChainTrace([z], [prior.log_density(z)], means=[np.broadcast_to(prior.mean_array, z.shape).copy()])
        for t in range(1, T_sample + 1):
            out = op.transition(z, _step_for(op, t), mode)
            z = out.sample(rng)
            trace.states.append(z)
            trace.logp.append(out.log_density(z))
            trace.means.append(out.mean_array.copy())
    return trace


def chain_log_joint(trace: ChainTrace, prior: FactorialGaussian, op, x, mode: str | None = None) -> np.ndarray:
    """``log p(z(0..T-1), x)`` per row, recomputed from the stored states."""
    if len(trace.states) != op.n_steps:
        raise ValueError(f"trace has {len(trace.states)} states, expected {op.n_steps}")
    mode = mode or getattr(op, "default_mode", "eval")
    x = _rows(x)
    states = trace.states
    with no_grad():
        total = prior.log_density(states[0])
        for t in range(1, op.n_steps):
            total = total + op.transition(states[t - 1], t, mode).log_density(states[t])
        total = total + op.transition(states[-1], op.n_steps, mode).log_density(x)
    return total


def run_clamped_chain(
    rng: np.random.Generator,
    prior: FactorialGaussian,
    op,
    observed,
    mask,
    T_sample: int | None = None,
    mode: str | None = None,
) -> ChainTrace:
    """Model chain with ``observed`` held fixed on the ``mask`` dimensions.

    One chain per row of ``observed``; tile it to run restarts.
    """
    observed = _rows(observed)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != observed.shape[-1:]:
        raise ValueError("mask must have one entry per dimension")
    if not mask.any():
        raise ValueError("mask has no observed dimension; use run_model_chain")
    T_sample = op.n_steps if T_sample is None else T_sample
    mode = mode or getattr(op, "default_mode", "eval")
    n = observed.shape[0]
    with no_grad():
        z = np.where(mask, observed, sample_prior(rng, prior, n))
        trace = ChainTrace([z], [prior.log_density(z)], means=[np.where(mask, observed, prior.mean_array)])
        for t in range(1, T_sample + 1):
            out = op.transition(z, _step_for(op, t), mode)
            z = np.where(mask, observed, out.sample(rng))
            trace.states.append(z)
            trace.logp.append(out.log_density(z))
            trace.means.append(np.where(mask, observed, out.mean_array))
    return trace
