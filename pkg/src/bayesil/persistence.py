"""Checkpoints (JSON manifest + raw float64 blob) and metrics files.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
The blob is every array as little-endian float64, concatenated in the order
the manifest lists them; each manifest entry records name, shape, offset and
byte length.  Both files are written to a temporary name and renamed.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .architectures import rebuild
from .errors import ConsistencyError, FormatError
from .layers import BayesNet, PriorSnapshot
from .training import AdamState, IncrementalLearner, StageMetrics, TrainConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
METRIC_FIELDS = ("stage", "epoch", "elbo", "data_term", "kl_term", "test_accuracy", "test_nll")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


@dataclass
class Checkpoint:
    model: BayesNet
    prior: PriorSnapshot | None = None
    learner: IncrementalLearner | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: BayesNet, prior: PriorSnapshot | None = None, learner: IncrementalLearner | None = None, meta: dict | None = None) -> Path:
    """Write ``model`` (and optionally a prior or a whole paused learner) to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if learner is not None:
        prior = learner.prior
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.describe(),
        "meta": meta or {},
        "prior": None,
        "learner": None,
    }
    if prior is not None:
        manifest["prior"] = {"layers": prior.describe(), "fixed_analytic": prior.fixed_analytic}
        arrays.update({f"prior/{k}": v for k, v in prior.arrays().items()})
    if learner is not None:
        names = list(model.named_parameters())
        st = learner.state
        manifest["learner"] = {
            "config": asdict(learner.config),
            "stage": st.stage,
            "epoch": st.epoch,
            "step": st.step,
            "adam_t": learner.optimizer.state.t,
            "rng": st.rng.bit_generator.state,
            "metrics": [m.to_dict() for m in learner.metrics],
            "current": None if st.current is None else st.current.to_dict(),
        }
        for k, m, v in zip(names, learner.optimizer.state.m, learner.optimizer.state.v):
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest["arrays"] = entries
    manifest["blob_nbytes"] = offset
    _atomic_write(path / BLOB, b"".join(chunks))
    _atomic_write(path / MANIFEST, _dumps(manifest))
    return path


def _read_arrays(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    blob = (path / BLOB).read_bytes()
    entries = manifest.get("arrays", [])
    declared = sum(e["nbytes"] for e in entries)
    if declared != len(blob) or manifest.get("blob_nbytes", declared) != len(blob):
        raise ConsistencyError(f"{path / BLOB}: {len(blob)} bytes on disk, manifest declares {declared}")
    out, expect = {}, 0
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] != expect or e["nbytes"] != 8 * n:
            raise ConsistencyError(f"array {e['name']!r}: offset/length disagree with shape {e['shape']}")
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        out[e["name"]] = a.reshape(e["shape"])
        expect += e["nbytes"]
    return out


def _section(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path / MANIFEST}: not valid JSON ({e})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version!r}; this build reads version {FORMAT_VERSION}")
    arrays = _read_arrays(path, manifest)
    model = rebuild(manifest["model"])
    model.load_state_arrays(_section(arrays, "model/"))
    prior = None
    if manifest["prior"] is not None:
        p = manifest["prior"]
        prior = PriorSnapshot.from_arrays(p["layers"], _section(arrays, "prior/"), p["fixed_analytic"])
    learner = None
    if manifest["learner"] is not None:
        info = manifest["learner"]
        learner = IncrementalLearner(model, TrainConfig(**info["config"]), prior)
        names = list(model.named_parameters())
        m, v = _section(arrays, "adam_m/"), _section(arrays, "adam_v/")
        learner.optimizer.state = AdamState([m[k].copy() for k in names], [v[k].copy() for k in names], info["adam_t"])
        st = learner.state
        st.stage, st.epoch, st.step = info["stage"], info["epoch"], info["step"]
        st.rng.bit_generator.state = info["rng"]
        learner.metrics = [StageMetrics(**d) for d in info["metrics"]]
        st.current = None if info["current"] is None else StageMetrics(**info["current"])
    return Checkpoint(model, prior, learner, manifest.get("meta", {}))


# --------------------------------------------------------------------------- metrics


def _fmt(x):
    return None if x is None else float(f"{x:.9g}")


def metric_records(metrics) -> list[dict]:
    rows = []
    for m in metrics:
        for r in m.records():
            rows.append({k: (r[k] if k in ("stage", "epoch") else _fmt(r[k])) for k in METRIC_FIELDS})
    return rows


def write_metrics(metrics, path, fmt: str | None = None, config: dict | None = None) -> Path:
    """Write per-epoch metric rows as CSV or JSON (by ``fmt`` or the file suffix).

    When ``config`` is given it is stored next to the file as
    ``<name>.config.json``.
    """
    path = Path(path)
    rows = metric_records(metrics)
    if not rows:
        raise ValueError("no metrics to write")
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    if fmt == "json":
        data = _dumps(rows)
    elif fmt == "csv":
        lines = [",".join(METRIC_FIELDS)]
        for r in rows:
            lines.append(",".join("" if r[k] is None else (str(r[k]) if k in ("stage", "epoch") else f"{r[k]:.9g}") for k in METRIC_FIELDS))
        data = ("\n".join(lines) + "\n").encode()
    else:
        raise ValueError(f"unknown metrics format {fmt!r}; expected csv or json")
    _atomic_write(path, data)
    if config is not None:
        _atomic_write(path.with_name(path.name + ".config.json"), _dumps(config))
    return path


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as f:
        rows = []
        for r in csv.DictReader(f):
            rows.append({k: (int(r[k]) if k in ("stage", "epoch") else (None if r[k] == "" else float(r[k]))) for k in METRIC_FIELDS})
    return rows
