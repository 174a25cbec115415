"""Run configuration: a sectioned INI file with typed, defaulted keys.

Every key lives in one section and has a default, so a resolved config
(written next to each run's outputs) fully reproduces the run::

    [data]
    dataset = toy2d
    [train]
    epochs = 100
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from infusion.data import Dataset, mnist_idx, mnist_small, split, toy_two_gaussians
from infusion.evaluation import EvalConfig
from infusion.infusion import InfusionSchedule
from infusion.model import OperatorConfig
from infusion.training import TrainConfig, rng_stream

OUTPUT_ROOT_ENV = "INFUSION_OUTPUT_ROOT"
DATASETS = ("toy2d", "mnist-small", "mnist")

# field name -> INI section
SECTIONS = {
    "dataset": "data",
    "n_examples": "data",
    "toy_std": "data",
    "idx_images": "data",
    "idx_test_images": "data",
    "valid_fraction": "data",
    "test_fraction": "data",
    "hidden_sizes": "model",
    "share_params": "model",
    "batch_norm": "model",
    "beta": "model",
    "eps_var": "model",
    "output_mode": "model",
    "fixed_var": "model",
    "T": "infusion",
    "alpha0": "infusion",
    "omega": "infusion",
    "sigma_delta": "infusion",
    "eta0": "train",
    "optimizer": "train",
    "batch_size": "train",
    "epochs": "train",
    "objective": "train",
    "clip_norm": "train",
    "n_eval_samples": "train",
    "grid_examples": "train",
    "k": "eval",
    "parzen": "eval",
    "parzen_sigma": "eval",
    "parzen_n_samples": "eval",
    "dequantize": "eval",
    "repetitions": "eval",
    "T_sample": "eval",
    "seed": "run",
    "output_dir": "run",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "toy2d"
    n_examples: int = 2000
    toy_std: float = 0.05
    idx_images: str | None = None
    idx_test_images: str | None = None
    valid_fraction: float = 0.1
    test_fraction: float = 0.1

    hidden_sizes: tuple[int, ...] = (1200, 1200)
    share_params: bool = True
    batch_norm: bool = False
    beta: float = 0.1
    eps_var: float = 1e-4
    output_mode: str = "diagonal"
    fixed_var: float | None = None

    T: int = 15
    alpha0: float = 0.0
    omega: float = 0.01
    sigma_delta: float = 0.03

    eta0: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    epochs: int = 100
    objective: str = "denoising"
    clip_norm: float | None = 100.0
    n_eval_samples: int = 20
    # rows shown in the per-epoch training-chain grid
    grid_examples: int = 10

    k: int = 20
    parzen: bool = False
    parzen_sigma: float = 0.17
    parzen_n_samples: int = 10000
    dequantize: bool = False
    repetitions: int = 1
    T_sample: int | None = None

    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "mnist" and not self.idx_images:
            raise ConfigError("dataset 'mnist' needs idx_images")
        for path in (self.idx_images, self.idx_test_images):
            if path and not Path(path).is_file():
                raise ConfigError(f"no such file: {path}")
        if not 0 <= self.valid_fraction < 1 or not 0 <= self.test_fraction < 1:
            raise ConfigError("split fractions must lie in [0, 1)")
        if self.valid_fraction + self.test_fraction >= 1:
            raise ConfigError("no rows left for training")
        if self.n_examples < 3:
            raise ConfigError("n_examples must be >= 3")
        # the component configs carry their own checks
        try:
            self.schedule()
            self.train_config()
            self.eval_config()
            self.operator_config(2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- views --------------------------------------------------------------

    def schedule(self) -> InfusionSchedule:
        return InfusionSchedule(self.alpha0, self.omega, self.sigma_delta)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            T=self.T,
            schedule=self.schedule(),
            eta0=self.eta0,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            epochs=self.epochs,
            objective=self.objective,
            seed=self.seed,
            clip_norm=self.clip_norm,
            n_eval_samples=self.n_eval_samples,
        )

    def operator_config(self, d: int) -> OperatorConfig:
        return OperatorConfig(
            d=d,
            T=self.T,
            hidden_sizes=tuple(self.hidden_sizes),
            share_params=self.share_params,
            beta=self.beta,
            eps_var=self.eps_var,
            output_mode=self.output_mode,
            fixed_var=self.fixed_var,
            batch_norm=self.batch_norm,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            k=self.k,
            parzen=self.parzen,
            parzen_sigma=self.parzen_sigma,
            parzen_n_samples=self.parzen_n_samples,
            dequantize=self.dequantize,
            repetitions=self.repetitions,
            T_sample=self.T_sample,
        )

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def output_path(self) -> Path:
        """``output_dir``, resolved against ``$INFUSION_OUTPUT_ROOT`` when relative."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self, include_output: bool = True) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if isinstance(d["hidden_sizes"], tuple):
            d["hidden_sizes"] = list(d["hidden_sizes"])
        if not include_output:
            d.pop("output_dir")
        return d

    # -- INI ----------------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for f in fields(self):
            section = SECTIONS[f.name]
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, f.name, _format(getattr(self, f.name)))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_HINTS = get_type_hints(RunConfig)
_BOOLS = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def coerce(name: str, text: str):
    """Parse the string form of field ``name``."""
    if name not in _HINTS:
        raise ConfigError(f"unknown config key {name!r}")
    hint = str(_HINTS[name])
    text = text.strip()
    if "None" in hint and text.lower() in ("none", ""):
        return None
    try:
        if "tuple" in hint:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if "bool" in hint:
            if text.lower() not in _BOOLS:
                raise ValueError(text)
            return _BOOLS[text.lower()]
        if "int" in hint:
            return int(text)
        if "float" in hint:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    changes = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in SECTIONS:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            if SECTIONS[key] != section:
                raise ConfigError(f"key {key!r} belongs in [{SECTIONS[key]}], not [{section}]")
            changes[key] = coerce(key, value)
    return (base or RunConfig()).replace(**changes)


def load(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return from_ini(path.read_text(), base)


PRESETS = {
    "toy2d": dict(
        dataset="toy2d",
        n_examples=5000,
        hidden_sizes=(64, 64),
        share_params=False,
        T=10,
        alpha0=0.0,
        omega=0.02,
        eta0=3e-3,
        batch_size=64,
        epochs=100,
        objective="denoising",
        grid_examples=500,
        output_dir="runs/toy2d",
    ),
    "mnist-small": dict(
        dataset="mnist-small",
        n_examples=2000,
        hidden_sizes=(256, 256),
        share_params=False,
        T=15,
        alpha0=0.0,
        omega=0.01,
        eta0=1e-3,
        batch_size=64,
        epochs=60,
        objective="denoising",
        output_dir="runs/mnist-small",
    ),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**PRESETS[name])


# -- datasets -------------------------------------------------------------------


def build_dataset(cfg: RunConfig) -> Dataset:
    """Split dataset described by ``cfg``; toy rows come from stream ``(seed, 7)``."""
    fractions = (1 - cfg.valid_fraction - cfg.test_fraction, cfg.valid_fraction, cfg.test_fraction)
    if cfg.dataset == "toy2d":
        base = toy_two_gaussians(rng_stream(cfg.seed, 7), cfg.n_examples, std=cfg.toy_std)
        return split(base, fractions, cfg.seed)
    if cfg.dataset == "mnist-small":
        base = mnist_small(cfg.n_examples, cfg.idx_images, seed=cfg.seed)
        return split(base, fractions, cfg.seed)
    return mnist_idx(cfg.idx_images, cfg.idx_test_images, seed=cfg.seed)


def split_rows(ds: Dataset, name: str) -> np.ndarray:
    rows = ds.part(name)
    if rows.shape[0] == 0:
        raise ConfigError(f"split {name!r} is empty")
    return rows
