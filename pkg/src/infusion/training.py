"""Denoising-based and lower-bound-based infusion training."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from infusion.autodiff import (
    Tape,
    Tensor,
    backward,
    gaussian_log_density,
    no_grad,
    reparam_sample,
    where,
)
from infusion.evaluation import elbo_samples
from infusion.infusion import InfusionSchedule, alpha_at, draw_branches, mixture_log_density, run_infusion_chain
from infusion.model import FactorialGaussian, OperatorConfig, TransitionOperator, fit_prior

log = logging.getLogger(__name__)

OBJECTIVES = ("denoising", "lower_bound")


@dataclass
class TrainConfig:
    T: int = 15
    schedule: InfusionSchedule = field(default_factory=InfusionSchedule)
    eta0: float = 1e-3
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    objective: str = "denoising"
    seed: int = 0
    clip_norm: float | None = 100.0
    n_eval_samples: int = 20

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError("eta0 must be >= 0")
        if self.batch_size < 1 or self.T < 1:
            raise ValueError("batch_size and T must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def eta_at(cfg: TrainConfig, t: int) -> float:
    """Per-step learning rate ``eta0 * t / T``."""
    if not 1 <= t <= cfg.T:
        raise ValueError(f"step {t} out of range 1..{cfg.T}")
    return cfg.eta0 * t / cfg.T


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Key layout used throughout: ``(0,)`` operator init, ``(1, epoch)``
    training epoch, ``(2, epoch)`` validation, ``(3,)`` final batch-norm
    statistics, ``(4,)`` sampling, ``(5,)`` evaluation, ``(6,)`` inpainting.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data = p.data - self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(op, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(op.parameters(), cfg.eta0)
    return Adam(op.parameters(), cfg.eta0, cfg.adam_betas, cfg.adam_eps)


def clip_gradients(params, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def denoising_loss(op, prior, cfg: TrainConfig, batch, rng, mode: str = "train") -> tuple[Tensor, list[np.ndarray]]:
    """Weighted negative denoising log-likelihood, recorded on the active tape.

    The infusion chain is sampled step by step from the same forward pass
    that scores ``log p(t)(x | z~(t-1))``; chain states are constants.
    Returns the loss and the chain states ``z~(0..T-1)``.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    sched = cfg.schedule
    n, d = X.shape
    mean0 = np.broadcast_to(prior.mean_array, (n, d))
    var0 = np.broadcast_to(prior.var_array, (n, d))
    take, noise = draw_branches(rng, (n, d), alpha_at(sched, 0))
    z = np.where(take, X + sched.sigma_delta * noise, mean0 + np.sqrt(var0) * noise)
    states = [z]
    total = None
    for t in range(1, cfg.T + 1):
        out = op.transition(z, t, mode)
        term = gaussian_log_density(X, out.mean, out.var) * (t / cfg.T)
        total = term if total is None else total + term
        if t < cfg.T:
            take, noise = draw_branches(rng, (n, d), alpha_at(sched, t))
            model_draw = out.mean_array + np.sqrt(out.var_array) * noise
            z = np.where(take, X + sched.sigma_delta * noise, model_draw)
            states.append(z)
    return -total.mean(), states


def lower_bound_loss(op, prior, cfg: TrainConfig, batch, rng, mode: str = "train") -> Tensor:
    """Negated stochastic lower bound ``log p(z~, x) - log q(z~ | x)``, batch mean.

    Model-branch draws are reparameterized so the gradient flows along the
    chain; target-branch draws and branch choices are constants.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    sched = cfg.schedule
    n, d = X.shape
    mean0 = np.broadcast_to(prior.mean_array, (n, d))
    var0 = np.broadcast_to(prior.var_array, (n, d))
    alpha = alpha_at(sched, 0)
    take, noise = draw_branches(rng, (n, d), alpha)
    z = Tensor(np.where(take, X + sched.sigma_delta * noise, mean0 + np.sqrt(var0) * noise))
    ell = gaussian_log_density(z, mean0, var0) - mixture_log_density(z, mean0, var0, X, alpha, sched.sigma_delta)
    for t in range(1, cfg.T):
        out = op.transition(z, t, mode)
        alpha = alpha_at(sched, t)
        take, noise = draw_branches(rng, (n, d), alpha)
        model_draw = reparam_sample(None, out.mean, out.var, noise=noise)
        z = where(take, X + sched.sigma_delta * noise, model_draw)
        ell = ell + gaussian_log_density(z, out.mean, out.var)
        ell = ell - mixture_log_density(z, out.mean, out.var, X, alpha, sched.sigma_delta)
    out = op.transition(z, cfg.T, mode)
    ell = ell + gaussian_log_density(X, out.mean, out.var)
    return -ell.mean()


def _apply_update(op, cfg: TrainConfig, tape: Tape, loss: Tensor, optimizer) -> float:
    if not np.isfinite(loss.data):
        raise FloatingPointError("training loss is not finite")
    op.zero_grad()
    backward(tape, loss)
    norm = clip_gradients(op.parameters(), cfg.clip_norm)
    optimizer = optimizer or make_optimizer(op, cfg)
    optimizer.step()
    return norm


def denoising_step(op, prior, cfg: TrainConfig, batch, rng, optimizer=None) -> dict:
    with Tape() as tape:
        loss, _ = denoising_loss(op, prior, cfg, batch, rng)
    norm = _apply_update(op, cfg, tape, loss, optimizer)
    return {"objective": -float(loss.data), "grad_norm": norm}


def lower_bound_step(op, prior, cfg: TrainConfig, batch, rng, optimizer=None) -> dict:
    with Tape() as tape:
        loss = lower_bound_loss(op, prior, cfg, batch, rng)
    norm = _apply_update(op, cfg, tape, loss, optimizer)
    return {"objective": -float(loss.data), "grad_norm": norm}


def finalize_statistics(op, prior, sched: InfusionSchedule, train_data, rng) -> None:
    """Per-step batch-norm statistics over the whole training set.

    Infusion chains for every training row are run as one batch; the
    statistics each step sees become that step's eval-mode statistics.
    """
    if not op.bn:
        return
    for state in op.bn:
        state.collecting = True
    try:
        with no_grad():
            trace = run_infusion_chain(rng, prior, op, sched, train_data, mode="train")
            op.transition(trace.states[-1], op.n_steps, "train")
    finally:
        for state in op.bn:
            state.collecting = False


def validation_lower_bound(op, prior, sched, valid, k: int, rng, mode: str = "train") -> float:
    ell = elbo_samples(op, prior, sched, valid, k, rng, mode=mode)
    return float(np.mean(ell))


@dataclass
class TrainResult:
    operator: TransitionOperator
    prior: FactorialGaussian
    history: list[dict]
    best_epoch: int | None


def train(
    train_data,
    valid_data,
    cfg: TrainConfig,
    op_config: OperatorConfig | None = None,
    callbacks: list[Callable] | None = None,
    op: TransitionOperator | None = None,
    prior: FactorialGaussian | None = None,
) -> TrainResult:
    """Epoch loop with validation lower bound and best-epoch retention.

    ``callbacks`` are called as ``cb(epoch, op, prior, row)`` after each
    epoch, with the operator holding that epoch's parameters.
    """
    X = np.asarray(train_data, dtype=np.float64)
    V = np.asarray(valid_data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training split")
    if V.ndim != 2 or V.shape[0] == 0:
        raise ValueError("empty validation split")
    prior = prior or fit_prior(X)
    if op is None:
        op_config = op_config or OperatorConfig(d=X.shape[1], T=cfg.T)
        op = TransitionOperator(op_config, rng_stream(cfg.seed, 0))
    if op.n_steps != cfg.T:
        raise ValueError("operator and training config disagree on T")
    step_fn = denoising_step if cfg.objective == "denoising" else lower_bound_step
    optimizer = make_optimizer(op, cfg)
    min_batch = 2 if op.bn else 1

    history: list[dict] = []
    best_lb, best_epoch, best_state = -np.inf, None, None
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = rng_stream(cfg.seed, 1, epoch)
        order = rng.permutation(X.shape[0])
        objectives = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < min_batch:
                continue
            objectives.append(step_fn(op, prior, cfg, X[idx], rng, optimizer)["objective"])
        lb = validation_lower_bound(op, prior, cfg.schedule, V, cfg.n_eval_samples, rng_stream(cfg.seed, 2, epoch))
        row = {
            "epoch": epoch,
            "train_objective": float(np.mean(objectives)) if objectives else float("nan"),
            "valid_lower_bound": lb,
            "wall_time": time.perf_counter() - start,
        }
        history.append(row)
        log.info("epoch %d  train %.4f  valid LB %.4f", epoch, row["train_objective"], lb)
        if lb > best_lb:
            best_lb, best_epoch, best_state = lb, epoch, copy.deepcopy(op.state_arrays())
        for cb in callbacks or ():
            cb(epoch, op, prior, row)

    if best_state is not None:
        op.load_state_arrays(best_state)
    finalize_statistics(op, prior, cfg.schedule, X, rng_stream(cfg.seed, 3))
    return TrainResult(op, prior, history, best_epoch)
