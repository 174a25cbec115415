"""Log-likelihood estimators: stochastic lower bound, importance sampling, Parzen."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from infusion.autodiff import LOG_2PI, no_grad
from infusion.infusion import InfusionSchedule, run_infusion_chain
from infusion.model import FactorialGaussian, _rows, run_model_chain


@dataclass
class EvalConfig:
    k: int = 20
    parzen: bool = False
    parzen_sigma: float = 0.17
    parzen_n_samples: int = 10000
    dequantize: bool = False
    repetitions: int = 1
    T_sample: int | None = None
    # rows of (points x proposals) pushed through the operator at once
    chunk_rows: int = 8192

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.parzen_sigma <= 0:
            raise ValueError("parzen_sigma must be > 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


def logmeanexp(values, axis: int = -1) -> np.ndarray:
    """``log(mean(exp(values)))``, shifted by the max so it never overflows.

    Equal inputs return that value exactly (the mean of ones is one).
    """
    values = np.asarray(values, dtype=np.float64)
    m = values.max(axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(values - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def lower_bound_estimate(ell) -> float | np.ndarray:
    ell = np.asarray(ell, dtype=np.float64)
    if ell.size == 0 or ell.shape[-1] == 0:
        raise ValueError("need at least one sample")
    return ell.mean(axis=-1)


def is_estimate(ell) -> float | np.ndarray:
    ell = np.asarray(ell, dtype=np.float64)
    if ell.size == 0 or ell.shape[-1] == 0:
        raise ValueError("need at least one sample")
    return logmeanexp(ell, axis=-1)


def elbo_samples(
    op,
    prior: FactorialGaussian,
    sched: InfusionSchedule,
    x,
    k: int,
    rng: np.random.Generator,
    mode: str | None = None,
    chunk_rows: int = 8192,
) -> np.ndarray:
    """``log p(z~, x) - log q(z~ | x)`` for ``k`` infusion chains per point.

    Returns shape ``[k]`` for a single point and ``[n, k]`` for a matrix.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    single = np.asarray(x).ndim == 1
    X = _rows(x)
    n = X.shape[0]
    mode = mode or getattr(op, "default_mode", "eval")
    flat = np.repeat(X, k, axis=0)
    ell = np.empty(n * k)
    step = max(1, chunk_rows)
    with no_grad():
        for start in range(0, flat.shape[0], step):
            xs = flat[start:start + step]
            trace = run_infusion_chain(rng, prior, op, sched, xs, mode=mode)
            final = op.transition(trace.states[-1], op.n_steps, mode).log_density(xs)
            ell[start:start + step] = sum(trace.logp) + final - sum(trace.logq)
    ell = ell.reshape(n, k)
    return ell[0] if single else ell


def parzen_log_density(samples, x, sigma: float) -> float | np.ndarray:
    """Log of the mean isotropic Gaussian kernel around each sample.

    Test points are processed one row at a time.
    """
    S = np.asarray(samples, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0:
        raise ValueError("need a nonempty [N, d] sample matrix")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    single = np.asarray(x).ndim == 1
    X = _rows(x)
    d = S.shape[1]
    const = -0.5 * d * (LOG_2PI + 2.0 * np.log(sigma))
    out = np.empty(X.shape[0])
    for i, row in enumerate(X):
        diff = S - row
        out[i] = logmeanexp(-0.5 * np.einsum("ij,ij->i", diff, diff) / (sigma * sigma)) + const
    return float(out[0]) if single else out


def dequantize(X, rng: np.random.Generator, width: float = 1.0 / 256) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X + rng.uniform(0.0, width, size=X.shape)


@dataclass
class EvalReport:
    k: int
    seed: int | None
    n_points: int
    repetitions: int
    lower_bound: list[float] = field(default_factory=list)
    importance_sampling: list[float] = field(default_factory=list)
    parzen: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def summary(self) -> list[tuple[str, float, float]]:
        rows = [
            ("lower_bound", *_mean_std(self.lower_bound)),
            ("importance_sampling", *_mean_std(self.importance_sampling)),
        ]
        if self.parzen:
            rows.append(("parzen", *_mean_std(self.parzen)))
        return rows

    def csv_rows(self) -> list[dict]:
        return [
            {
                "metric": name,
                "estimate": repr(float(mean)),
                "std": repr(float(std)),
                "k": self.k,
                "repetitions": self.repetitions,
                "n_points": self.n_points,
                "seed": self.seed,
            }
            for name, mean, std in self.summary()
        ]

    def format_table(self) -> str:
        lines = [f"{'metric':<22}{'estimate (nats)':>18}{'std':>12}", "-" * 52]
        for name, mean, std in self.summary():
            lines.append(f"{name:<22}{mean:>18.3f}{std:>12.3f}")
        lines.append(f"k={self.k} points={self.n_points} repetitions={self.repetitions}")
        return "\n".join(lines)


REPORT_FIELDS = ["metric", "estimate", "std", "k", "repetitions", "n_points", "seed"]


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_model(
    op,
    prior: FactorialGaussian,
    sched: InfusionSchedule,
    split,
    cfg: EvalConfig,
    rng: np.random.Generator,
    seed: int | None = None,
) -> EvalReport:
    """Average per-point LB / IS (and Parzen) estimates, repeated with fresh streams."""
    X = _rows(split)
    if X.shape[0] == 0:
        raise ValueError("empty evaluation split")
    report = EvalReport(k=cfg.k, seed=seed, n_points=X.shape[0], repetitions=cfg.repetitions)
    start = time.perf_counter()
    for rep_rng in rng.spawn(cfg.repetitions):
        data = dequantize(X, rep_rng) if cfg.dequantize else X
        ell = elbo_samples(op, prior, sched, data, cfg.k, rep_rng, chunk_rows=cfg.chunk_rows)
        report.lower_bound.append(float(np.mean(lower_bound_estimate(ell))))
        report.importance_sampling.append(float(np.mean(is_estimate(ell))))
        if cfg.parzen:
            samples = run_model_chain(rep_rng, prior, op, cfg.T_sample, n=cfg.parzen_n_samples).final
            report.parzen.append(float(np.mean(parzen_log_density(samples, X, cfg.parzen_sigma))))
    report.wall_time = time.perf_counter() - start
    return report
