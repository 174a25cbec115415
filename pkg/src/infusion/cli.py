"""Command-line interface: ``train``, ``sample``, ``eval``, ``inpaint`` and ``sweep``.

Every subcommand takes ``--seed``; with a fixed seed all CSV, checkpoint
and PGM outputs are byte-identical across runs. Wall-clock times go to
separate ``timing*.csv`` files for that reason.

On failure the last line on stderr is machine-parsable::

    infusion-error: exit=3 type=ConfigError message="unknown preset 'x'"
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from infusion import config as cfgmod
from infusion.checkpoint import load_checkpoint, save_arrays, save_checkpoint
from infusion.config import ConfigError, RunConfig
from infusion.data import IDXFormatError, rasterize_points, write_grid
from infusion.evaluation import REPORT_FIELDS, evaluate_model
from infusion.infusion import run_infusion_chain
from infusion.model import TransitionOperator, fit_prior, run_clamped_chain, run_model_chain
from infusion.training import rng_stream, train

log = logging.getLogger("infusion")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4

CHECKPOINT = "checkpoint.npz"
TOY_RASTER = 32


def write_csv(path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- visualization -------------------------------------------------------------------


def chain_grid(states, targets, image_shape, path) -> None:
    """One row per example (image data) or one row of point clouds (2-D data).

    ``states`` is a list of ``[n, d]`` arrays; ``targets`` is appended as the
    last column when given.
    """
    cols = list(states) + ([targets] if targets is not None else [])
    if image_shape is None:
        images = np.stack([rasterize_points(c, TOY_RASTER) for c in cols])
        write_grid(images, 1, len(cols), (TOY_RASTER, TOY_RASTER), path)
        return
    n = cols[0].shape[0]
    images = np.stack(cols, axis=1).reshape(n * len(cols), -1)
    write_grid(images, n, len(cols), image_shape, path)


def _image_shape(ds):
    if ds.image_shape is not None:
        return ds.image_shape
    return None if ds.rows.shape[1] == 2 else (1, ds.rows.shape[1])


# -- train -----------------------------------------------------------------------------


def _fit(cfg: RunConfig, out: Path, grids: bool = True):
    ds = cfgmod.build_dataset(cfg)
    X, V = cfgmod.split_rows(ds, "train"), cfgmod.split_rows(ds, "valid")
    shape = _image_shape(ds)
    grid_rows = V[: cfg.grid_examples]
    if grids:
        (out / "grids").mkdir(parents=True, exist_ok=True)

    def draw(epoch, op, prior, row):
        trace = run_infusion_chain(rng_stream(cfg.seed, 9, epoch), prior, op, cfg.schedule(), grid_rows)
        chain_grid(trace.states, grid_rows, shape, out / "grids" / f"epoch_{epoch:03d}.pgm")

    prior = fit_prior(X)
    op = TransitionOperator(cfg.operator_config(X.shape[1]), rng_stream(cfg.seed, 0))
    result = train(X, V, cfg.train_config(), op=op, prior=prior, callbacks=[draw] if grids else None)
    return ds, result


def cmd_train(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.ini")
    ds, result = _fit(cfg, out)
    extra = {"best_epoch": result.best_epoch, "config": cfg.to_dict(include_output=False)}
    save_checkpoint(out / CHECKPOINT, result.operator, result.prior, cfg.schedule(), extra=extra)
    rows = [{k: _fmt(r[k]) for k in ("epoch", "train_objective", "valid_lower_bound")} for r in result.history]
    write_csv(out / "history.csv", rows, ["epoch", "train_objective", "valid_lower_bound"])
    timing = [{"epoch": r["epoch"], "wall_time": f"{r['wall_time']:.3f}"} for r in result.history]
    write_csv(out / "timing.csv", timing, ["epoch", "wall_time"])
    best = max((r["valid_lower_bound"] for r in result.history), default=float("nan"))
    print(f"trained {len(result.history)} epochs; best valid lower bound {best:.4f} at epoch {result.best_epoch}")
    print(f"outputs in {out}")
    return out


# -- checkpoint-driven commands ----------------------------------------------------------


def _load(path):
    ck = load_checkpoint(path)
    stored = dict(ck.extra.get("config", {}))
    stored.pop("output_dir", None)
    if isinstance(stored.get("hidden_sizes"), list):
        stored["hidden_sizes"] = tuple(stored["hidden_sizes"])
    run_cfg = RunConfig(**stored) if stored else None
    return ck, run_cfg


def _out_dir(args, default: str) -> Path:
    out = RunConfig(output_dir=args.out or default).output_path()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_sample(args) -> Path:
    ck, run_cfg = _load(args.checkpoint)
    out = _out_dir(args, str(Path(args.checkpoint).parent / "samples"))
    T = args.T_sample or ck.operator.n_steps
    trace = run_model_chain(rng_stream(args.seed, 4), ck.prior, ck.operator, T, n=args.n)
    shape = None if ck.prior.mean.size == 2 else _shape_for(run_cfg, ck.prior.mean.size)
    chain_grid(trace.means[1:], None, shape, out / "samples.pgm")
    save_arrays(
        out / "trace.npz",
        {"states": np.stack(trace.states), "means": np.stack(trace.means[1:]), "logp": np.stack(trace.logp)},
    )
    print(f"sampled {args.n} chains of {T} steps into {out}")
    return out


def _shape_for(run_cfg, d):
    if run_cfg is not None and run_cfg.dataset in ("mnist-small", "mnist"):
        side = int(round(np.sqrt(d)))
        if side * side == d:
            return (side, side)
    return (1, d)


def cmd_eval(args) -> Path:
    ck, run_cfg = _load(args.checkpoint)
    if run_cfg is None:
        raise ConfigError("checkpoint carries no run config; cannot locate its dataset")
    overrides = {
        k: v
        for k, v in dict(
            k=args.k,
            repetitions=args.repetitions,
            parzen=args.parzen,
            dequantize=args.dequantize,
            parzen_n_samples=args.parzen_n_samples,
            T_sample=args.T_sample,
        ).items()
        if v is not None
    }
    run_cfg = run_cfg.replace(**overrides)
    rows = cfgmod.split_rows(cfgmod.build_dataset(run_cfg), args.split)
    out = _out_dir(args, str(Path(args.checkpoint).parent / f"eval_{args.split}"))
    report = evaluate_model(
        ck.operator, ck.prior, ck.schedule, rows, run_cfg.eval_config(), rng_stream(args.seed, 5), seed=args.seed
    )
    write_csv(out / "report.csv", report.csv_rows(), REPORT_FIELDS)
    write_csv(out / "timing.csv", [{"wall_time": f"{report.wall_time:.3f}"}], ["wall_time"])
    print(report.format_table())
    return out


def parse_mask(spec: str, d: int, image_shape) -> np.ndarray:
    """``top-half``, ``bottom-half``, ``left-half``, ``right-half`` or ``dims:i,j,a-b``."""
    h, w = image_shape
    grid = np.zeros((h, w), dtype=bool)
    if spec == "top-half":
        grid[: h // 2] = True
    elif spec == "bottom-half":
        grid[h - h // 2:] = True
    elif spec == "left-half":
        grid[:, : w // 2] = True
    elif spec == "right-half":
        grid[:, w - w // 2:] = True
    elif spec.startswith("dims:"):
        mask = np.zeros(d, dtype=bool)
        try:
            for part in spec[5:].split(","):
                lo, _, hi = part.partition("-")
                idx = range(int(lo), int(hi) + 1) if hi else [int(lo)]
                for i in idx:
                    if not 0 <= i < d:
                        raise ValueError
                    mask[i] = True
        except ValueError:
            raise ConfigError(f"invalid mask spec {spec!r} for d={d}") from None
        return mask
    else:
        raise ConfigError(f"invalid mask spec {spec!r}")
    mask = grid.reshape(-1)
    if mask.size != d:
        raise ConfigError(f"mask shape {image_shape} does not match d={d}")
    if not mask.any():
        raise ConfigError(f"mask {spec!r} selects no dimension of a {h}x{w} layout")
    return mask


def cmd_inpaint(args) -> Path:
    ck, run_cfg = _load(args.checkpoint)
    if run_cfg is None:
        raise ConfigError("checkpoint carries no run config; cannot locate its dataset")
    rows = cfgmod.split_rows(cfgmod.build_dataset(run_cfg), args.split)
    X = rows[args.index:args.index + args.n_images]
    if X.shape[0] == 0:
        raise ConfigError(f"no rows at index {args.index} of split {args.split!r}")
    d = X.shape[1]
    shape = _shape_for(run_cfg, d)
    mask = parse_mask(args.mask, d, shape)
    out = _out_dir(args, str(Path(args.checkpoint).parent / "inpaint"))
    rng = rng_stream(args.seed, 6)
    noise = ck.prior.mean + np.sqrt(ck.prior.var) * rng.standard_normal(X.shape)
    masked = np.where(mask, X, noise)
    tiled = np.repeat(X, args.restarts, axis=0)
    trace = run_clamped_chain(rng, ck.prior, ck.operator, tiled, mask, args.T_sample)
    shown = np.where(mask, tiled, trace.means[-1]).reshape(X.shape[0], args.restarts, d)
    panel = np.concatenate([X[:, None], masked[:, None], shown], axis=1)
    write_grid(panel.reshape(-1, d), X.shape[0], args.restarts + 2, shape, out / "inpaint.pgm")
    completions = trace.final.reshape(X.shape[0], args.restarts, d)
    save_arrays(out / "inpaint.npz", {"observed": X, "mask": mask, "completions": completions})
    print(f"inpainted {X.shape[0]} rows x {args.restarts} restarts into {out}")
    return out


# -- sweep -----------------------------------------------------------------------------------


SWEEP_FIELDS = ["cell", "T", "alpha0", "omega", "best_valid_lower_bound", "best_epoch"]


def run_sweep(cfg: RunConfig, Ts, alpha0s, omegas, out: Path | None = None) -> list[dict]:
    grid = list(itertools.product(Ts, alpha0s, omegas))
    if not grid:
        raise ConfigError("empty sweep grid")
    out = out or cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.ini")
    rows, timing = [], []
    for i, (T, a0, om) in enumerate(grid):
        cell_cfg = cfg.replace(T=int(T), alpha0=float(a0), omega=float(om), output_dir=str(out / f"cell_{i:03d}"))
        cell_dir = cell_cfg.output_path()
        cell_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        _, result = _fit(cell_cfg, cell_dir, grids=False)
        timing.append({"cell": i, "wall_time": f"{time.perf_counter() - start:.3f}"})
        best = max((r["valid_lower_bound"] for r in result.history), default=float("nan"))
        extra = {"best_epoch": result.best_epoch, "config": cell_cfg.to_dict(include_output=False)}
        save_checkpoint(cell_dir / CHECKPOINT, result.operator, result.prior, cell_cfg.schedule(), extra=extra)
        rows.append(
            {"cell": i, "T": T, "alpha0": _fmt(a0), "omega": _fmt(om), "best_valid_lower_bound": _fmt(best), "best_epoch": result.best_epoch}
        )
        log.info("cell %d T=%d alpha0=%g omega=%g best LB %.4f", i, T, a0, om, best)
    write_csv(out / "summary.csv", rows, SWEEP_FIELDS)
    write_csv(out / "timing.csv", timing, ["cell", "wall_time"])
    return rows


def cmd_sweep(cfg: RunConfig, args) -> Path:
    Ts = _floats(args.T_grid, int) if args.T_grid else [cfg.T]
    a0 = _floats(args.alpha0_grid) if args.alpha0_grid else [cfg.alpha0]
    om = _floats(args.omega_grid) if args.omega_grid else [cfg.omega]
    rows = run_sweep(cfg, Ts, a0, om)
    for r in rows:
        print(" ".join(f"{k}={r[k]}" for k in SWEEP_FIELDS))
    return cfg.output_path()


def _floats(text: str, kind=float):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None


# -- argument parsing ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="start from a shipped preset")
    group = p.add_argument_group("run config overrides")
    for f in fields(RunConfig):
        if f.name in ("seed", "output_dir"):
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")
    p.add_argument("--out", help="output directory (relative paths honour $%s)" % cfgmod.OUTPUT_ROOT_ENV)


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.preset(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = cfgmod.load(args.config, cfg)
    changes = {}
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            changes[f.name] = cfgmod.coerce(f.name, value)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    return cfg.replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infusion", description="Train and evaluate infusion-trained Markov chains.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a transition operator")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sample", help="run model chains from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=16, help="number of chains (default 16)")
    p.add_argument("--T-sample", dest="T_sample", type=int, help="chain length (default: trained T)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <run>/samples)")

    p = sub.add_parser("eval", help="estimate log-likelihood on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--k", type=int, help="proposal chains per point")
    p.add_argument("--repetitions", type=int, help="independent repeats for the std column")
    p.add_argument("--parzen", action="store_true", default=None, help="add a Parzen-window estimate")
    p.add_argument("--parzen-n-samples", type=int, help="model samples for the Parzen kernel")
    p.add_argument("--dequantize", action="store_true", default=None, help="add uniform(0, 1/256) noise to points")
    p.add_argument("--T-sample", dest="T_sample", type=int, help="chain length for Parzen samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <run>/eval_<split>)")

    p = sub.add_parser("inpaint", help="complete partially observed rows")
    p.add_argument("checkpoint")
    p.add_argument("--mask", default="top-half", help="top-half, bottom-half, left-half, right-half or dims:i,j,a-b (observed dims)")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--index", type=int, default=0, help="first row of the split to complete")
    p.add_argument("--n-images", type=int, default=4, help="rows to complete")
    p.add_argument("--restarts", type=int, default=8, help="independent completions per row")
    p.add_argument("--T-sample", dest="T_sample", type=int, help="chain length (default: trained T)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <run>/inpaint)")

    p = sub.add_parser("sweep", help="train one model per (T, alpha0, omega) cell")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--T-grid", help="comma-separated step counts")
    p.add_argument("--alpha0-grid", help="comma-separated initial rates")
    p.add_argument("--omega-grid", help="comma-separated rate increments")
    return parser


def _dispatch(args) -> None:
    if args.command == "train":
        cmd_train(resolve_config(args))
    elif args.command == "sweep":
        cmd_sweep(resolve_config(args), args)
    elif args.command == "sample":
        cmd_sample(args)
    elif args.command == "eval":
        cmd_eval(args)
    else:
        cmd_inpaint(args)


def _error_line(code: int, exc: BaseException) -> str:
    return f"infusion-error: exit={code} type={type(exc).__name__} message={json.dumps(str(exc))}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(_error_line(EXIT_USAGE, exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _dispatch(args)
    except (ConfigError, IDXFormatError) as exc:
        print(_error_line(EXIT_CONFIG, exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(_error_line(EXIT_IO, exc), file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - report anything else uniformly
        print(_error_line(EXIT_ERROR, exc), file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
