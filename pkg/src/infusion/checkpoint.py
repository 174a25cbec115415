"""Versioned checkpoint container.

A checkpoint is a zip archive of ``.npy`` members (readable with
``numpy.load``) plus a ``meta.json`` member holding the format version and
the operator configuration.  Members are written in sorted order with a
fixed timestamp so identical contents give identical bytes.
"""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from infusion.infusion import InfusionSchedule
from infusion.model import FactorialGaussian, OperatorConfig, TransitionOperator

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Deterministic ``.npz``: sorted ``.npy`` members, fixed timestamps."""
    with zipfile.ZipFile(path, "w") as zf:
        if meta is not None:
            _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _write_member(zf, name + ".npy", buf.getvalue())


def save_checkpoint(
    path,
    op: TransitionOperator,
    prior: FactorialGaussian,
    schedule: InfusionSchedule | None = None,
    extra: dict | None = None,
) -> None:
    arrays = {f"op/{k}": v for k, v in op.state_arrays().items()}
    arrays["prior/mean"] = np.asarray(prior.mean_array, dtype=np.float64)
    arrays["prior/var"] = np.asarray(prior.var_array, dtype=np.float64)
    meta = {
        "format_version": FORMAT_VERSION,
        "operator_config": dataclasses.asdict(op.config),
        "schedule": dataclasses.asdict(schedule) if schedule else None,
        "extra": extra or {},
    }
    save_arrays(path, arrays, meta)


@dataclasses.dataclass
class Checkpoint:
    operator: TransitionOperator
    prior: FactorialGaussian
    schedule: InfusionSchedule | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    cfg = OperatorConfig(**meta["operator_config"])
    op = TransitionOperator(cfg, rng=0)
    op.load_state_arrays({k[3:]: v for k, v in arrays.items() if k.startswith("op/")})
    prior = FactorialGaussian(arrays["prior/mean"], arrays["prior/var"])
    sched = InfusionSchedule(**meta["schedule"]) if meta.get("schedule") else None
    return Checkpoint(op, prior, sched, meta.get("extra", {}))
