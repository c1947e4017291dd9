"""File formats: datasets, model checkpoints, CSV reports and run summaries.

Datasets and checkpoints share one layout: ``key: value`` text lines, a blank
line, then a little-endian float32 blob. Header values other than the dataset
fields are canonical JSON, so load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .agent import AgentConfig, AgentState, reset_optimizers
from .diffusion import DenoiserModel, NoiseSchedule
from .dynamics import DynamicsModel, Regressor
from .errors import PersistenceError, RejectedInput
from .nn import Mlp
from .ood import CvaeModel, EnsembleDetector, OodThresholds
from .toyworld import Dataset

F32LE = np.dtype("<f4")
DATASET_MAGIC = "DOSR1"
CHECKPOINT_MAGIC = "DOSRCKPT1"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _split_header(raw: bytes, path) -> tuple[list[tuple[str, str]], bytes]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise PersistenceError(f"{path}: missing header terminator")
    fields = []
    for line in raw[:end].decode("utf-8").split("\n"):
        key, sep, value = line.partition(": ")
        if not sep:
            raise PersistenceError(f"{path}: malformed header line {line!r}")
        fields.append((key, value))
    return fields, raw[end + 2:]


def _join(fields: list[tuple[str, str]], blob: np.ndarray) -> bytes:
    head = "".join(f"{k}: {v}\n" for k, v in fields) + "\n"
    return head.encode("utf-8") + np.ascontiguousarray(blob, dtype=F32LE).tobytes()


# -- datasets ------------------------------------------------------------------------


def dataset_bytes(d: Dataset) -> bytes:
    fields = [
        ("magic", DATASET_MAGIC),
        ("state_dim", str(d.state_dim)),
        ("action_dim", str(d.action_dim)),
        ("rows", str(len(d))),
        ("source", d.source),
        ("seed", "none" if d.seed is None else str(int(d.seed))),
    ]
    return _join(fields, d.matrix())


def save_dataset(d: Dataset, path) -> None:
    _write_bytes(path, dataset_bytes(d))


def load_dataset(path) -> Dataset:
    fields, blob = _split_header(_read_bytes(path), path)
    head = dict(fields)
    if head.get("magic") != DATASET_MAGIC:
        raise PersistenceError(f"{path}: not a dataset file")
    try:
        sd, ad, n = int(head["state_dim"]), int(head["action_dim"]), int(head["rows"])
    except (KeyError, ValueError) as exc:
        raise PersistenceError(f"{path}: bad dataset header") from exc
    width = 2 * sd + ad + 2
    if len(blob) != n * width * 4:
        raise PersistenceError(f"{path}: expected {n * width * 4} data bytes, found {len(blob)}")
    m = np.frombuffer(blob, dtype=F32LE).reshape(n, width).astype(np.float32)
    seed = None if head["seed"] == "none" else int(head["seed"])
    return Dataset(m[:, :sd], m[:, sd:sd + ad], m[:, sd + ad], m[:, sd + ad + 1:2 * sd + ad + 1],
                   m[:, -1], source=head["source"], seed=seed)


# -- checkpoints ---------------------------------------------------------------------
#
# A record is (kind, meta: JSON-able dict, tensors: ordered {name: Mlp}). Weights go
# to the float32 blob; small statistics stay in ``meta`` as exact float64 JSON.


def _net_meta(net: Mlp) -> dict:
    return {"layer_dims": list(net.layer_dims), "activations": list(net.activations),
            "dropout_prob": net.dropout_prob}


def _vec(x) -> list:
    return [float(v) for v in np.asarray(x, dtype=np.float64).ravel()]


def _regressor_meta(reg: Regressor) -> dict:
    return {"in_shift": _vec(reg.in_shift), "in_scale": _vec(reg.in_scale),
            "out_shift": _vec(reg.out_shift), "out_scale": _vec(reg.out_scale)}


def _dynamics_meta(m: DynamicsModel) -> dict:
    return {"state_dim": m.state_dim, "action_dim": m.action_dim, "state_low": m.state_low,
            "state_high": m.state_high, "training_step": m.training_steps_done, **_regressor_meta(m.reg)}


def to_record(model) -> tuple[str, dict, dict]:
    if isinstance(model, DenoiserModel):
        s = model.schedule
        meta = {"schedule": {"sigma_data": s.sigma_data, "sigma_min": s.sigma_min, "sigma_max": s.sigma_max,
                             "scale": s.scale, "c_in_mode": s.c_in_mode},
                "target_dim": model.target_dim, "condition_dim": model.condition_dim,
                "embedding": model.embedding, "cond_shift": _vec(model.cond_shift),
                "cond_scale": _vec(model.cond_scale), "training_step": model.training_steps_done}
        return "denoiser", meta, {"net": model.net}
    if isinstance(model, DynamicsModel):
        return "dynamics", _dynamics_meta(model), {"net": model.reg.net}
    if isinstance(model, Regressor):
        return "regressor", _regressor_meta(model), {"net": model.net}
    if isinstance(model, CvaeModel):
        meta = {"latent_dim": model.latent_dim, "state_shift": _vec(model.state_shift),
                "state_scale": _vec(model.state_scale), "trained": model.trained}
        return "cvae", meta, {"encoder": model.encoder, "decoder": model.decoder}
    if isinstance(model, EnsembleDetector):
        meta = {"variance_threshold": model.variance_threshold,
                "members": [_dynamics_meta(m) for m in model.members]}
        return "ensemble", meta, {f"member{i}": m.reg.net for i, m in enumerate(model.members)}
    if isinstance(model, AgentState):
        cfg = dict(vars(model.config))
        cfg["hidden"] = list(cfg["hidden"])
        meta = {"config": cfg, "state_dim": model.state_dim, "action_dim": model.action_dim,
                "log_alpha": model.log_alpha, "target_entropy": model.target_entropy, "q_min": model.q_min,
                "state_shift": _vec(model.state_shift), "state_scale": _vec(model.state_scale),
                "training_step": model.step}
        return "agent", meta, dict(model.params())
    raise RejectedInput(f"cannot checkpoint a {type(model).__name__}")


def _mlp(meta: dict, params: np.ndarray) -> Mlp:
    return Mlp(tuple(meta["layer_dims"]), tuple(meta["activations"]), params, meta["dropout_prob"])


def _regressor(net: Mlp, meta: dict) -> Regressor:
    return Regressor(net, meta["in_shift"], meta["in_scale"], meta["out_shift"], meta["out_scale"])


def _dynamics(net: Mlp, meta: dict) -> DynamicsModel:
    return DynamicsModel(_regressor(net, meta), meta["state_dim"], meta["action_dim"], meta["state_low"],
                         meta["state_high"], meta["training_step"])


def from_record(kind: str, meta: dict, nets: dict):
    if kind == "denoiser":
        return DenoiserModel(nets["net"], NoiseSchedule(**meta["schedule"]), meta["target_dim"],
                             meta["condition_dim"], meta["embedding"], meta["cond_shift"], meta["cond_scale"],
                             meta["training_step"])
    if kind == "dynamics":
        return _dynamics(nets["net"], meta)
    if kind == "regressor":
        return _regressor(nets["net"], meta)
    if kind == "cvae":
        return CvaeModel(nets["encoder"], nets["decoder"], meta["latent_dim"], np.asarray(meta["state_shift"]),
                         np.asarray(meta["state_scale"]), meta["trained"])
    if kind == "ensemble":
        members = [_dynamics(nets[f"member{i}"], m) for i, m in enumerate(meta["members"])]
        return EnsembleDetector(members, meta["variance_threshold"])
    if kind == "agent":
        cfg = AgentConfig(**meta["config"])
        k = cfg.n_critics
        agent = AgentState(
            cfg, meta["state_dim"], meta["action_dim"], [nets[f"q{i}"] for i in range(k)],
            [nets[f"q{i}_target"] for i in range(k)], nets["v"], nets["v_target"], nets["actor"],
            nets["actor_target"], meta["log_alpha"], meta["target_entropy"], meta["q_min"],
            np.asarray(meta["state_shift"]), np.asarray(meta["state_scale"]), meta["training_step"],
        )
        reset_optimizers(agent)
        return agent
    raise PersistenceError(f"unknown checkpoint kind {kind!r}")


def checkpoint_bytes(model) -> bytes:
    kind, meta, nets = to_record(model)
    layout = [[name, int(net.params.size)] for name, net in nets.items()]
    fields = [
        ("magic", CHECKPOINT_MAGIC),
        ("format_version", str(FORMAT_VERSION)),
        ("kind", kind),
        ("nets", canonical_json({name: _net_meta(net) for name, net in nets.items()})),
        ("layout", canonical_json(layout)),
        ("weight_count", str(sum(n for _, n in layout))),
        ("meta", canonical_json(meta)),
    ]
    blob = np.concatenate([net.params for net in nets.values()]) if nets else np.zeros(0)
    return _join(fields, blob)


def save_checkpoint(model, path) -> None:
    """Weights are stored as float32; optimizer moments are not saved."""
    _write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path):
    return parse_checkpoint(_read_bytes(path), path)


def parse_checkpoint(raw: bytes, path="<bytes>"):
    fields, blob = _split_header(raw, path)
    head = dict(fields)
    if head.get("magic") != CHECKPOINT_MAGIC:
        raise PersistenceError(f"{path}: not a checkpoint file")
    if int(head.get("format_version", -1)) != FORMAT_VERSION:
        raise PersistenceError(f"{path}: unsupported format version {head.get('format_version')}")
    try:
        layout = json.loads(head["layout"])
        net_meta = json.loads(head["nets"])
        meta = json.loads(head["meta"])
        count = int(head["weight_count"])
    except (KeyError, ValueError) as exc:
        raise PersistenceError(f"{path}: bad checkpoint header") from exc
    if len(blob) != 4 * count or count != sum(n for _, n in layout):
        raise PersistenceError(f"{path}: blob holds {len(blob) // 4} weights, manifest declares {count}")
    flat = np.frombuffer(blob, dtype=F32LE).astype(np.float64)
    nets, at = {}, 0
    for name, n in layout:
        nets[name] = _mlp(net_meta[name], flat[at:at + n].copy())
        at += n
    return from_record(head["kind"], meta, nets)


def quantized(model):
    """The model as it will look after a save/load cycle (float32 weights)."""
    return parse_checkpoint(checkpoint_bytes(model))


# -- thresholds ----------------------------------------------------------------------


def save_thresholds(th: OodThresholds, path) -> None:
    obj = {"tau_a": th.tau_a, "tau_s": th.tau_s, "percentile_a": th.percentile_a,
           "percentile_s": th.percentile_s, "calibration_errors_a": _vec(th.calibration_errors_a),
           "calibration_errors_s": _vec(th.calibration_errors_s)}
    _write_bytes(path, (canonical_json(obj) + "\n").encode())


def load_thresholds(path) -> OodThresholds:
    try:
        obj = json.loads(_read_bytes(path))
        return OodThresholds(obj["tau_a"], obj["tau_s"], obj["percentile_a"], obj["percentile_s"],
                             np.asarray(obj["calibration_errors_a"]), np.asarray(obj["calibration_errors_s"]))
    except (KeyError, ValueError) as exc:
        raise PersistenceError(f"{path}: bad thresholds file") from exc


# -- CSV reports ---------------------------------------------------------------------

SCHEMAS: dict[str, tuple[tuple[str, type], ...]] = {
    "loss_trace": (("step", int), ("loss", float)),
    "train_trace": (("step", int), ("v_loss", float), ("bellman", float), ("penalty", float), ("bonus", float),
                    ("actor_loss", float), ("alpha", float), ("frac_id", float), ("frac_beneficial", float),
                    ("frac_detrimental", float), ("eval_score", float)),
    "calibration": (("kind", str), ("bin_low", float), ("bin_high", float), ("count", int)),
    "detection": (("detector", str), ("noise_scale", float), ("tp", int), ("tn", int), ("fp", int), ("fn", int),
                  ("precision", float), ("recall", float), ("f1", float), ("accuracy", float), ("auroc", float),
                  ("threshold_used", float)),
    "roc": (("detector", str), ("noise_scale", float), ("fpr", float), ("tpr", float), ("threshold", float)),
    "tabular": (("check", str), ("n_states", int), ("n_actions", int), ("value", float), ("passed", int)),
    "deviation": (("eps_dyn", float), ("eps_det", float), ("mean_deviation", float)),
    "gmm_scatter": (("error", float), ("nll", float)),
    "eval": (("episodes", int), ("seed", int), ("mean_return", float), ("normalized_score", float)),
}


def _fmt(value, typ) -> str:
    if typ is float:
        v = float(value)
        return "nan" if math.isnan(v) else repr(v)
    if typ is int:
        return str(int(value))
    return str(value)


def _check_row(kind: str, row: dict) -> None:
    cols = SCHEMAS[kind]
    names = [c for c, _ in cols]
    if sorted(row) != sorted(names):
        raise RejectedInput(f"{kind} row has columns {sorted(row)}, schema wants {names}")
    for name, typ in cols:
        v = row[name]
        ok = isinstance(v, (int, np.integer)) and not isinstance(v, bool) if typ is int else (
            isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) if typ is float
            else isinstance(v, str))
        if not ok:
            raise RejectedInput(f"{kind}.{name} must be {typ.__name__}, got {type(v).__name__}")


def csv_text(kind: str, rows) -> str:
    if kind not in SCHEMAS:
        raise RejectedInput(f"unknown report kind {kind!r}")
    cols = SCHEMAS[kind]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c for c, _ in cols])
    for row in rows:
        _check_row(kind, row)
        w.writerow([_fmt(row[c], t) for c, t in cols])
    return buf.getvalue()


def write_csv(path, kind: str, rows) -> None:
    _write_bytes(path, csv_text(kind, rows).encode())


def read_csv(path, kind: str) -> list[dict]:
    """Parse a report, checking the header and coercing each column to its schema type."""
    cols = SCHEMAS[kind]
    text = _read_bytes(path).decode()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != [c for c, _ in cols]:
        raise PersistenceError(f"{path}: header {header} does not match {kind} schema")
    out = []
    for line in reader:
        try:
            out.append({c: t(v) for (c, t), v in zip(cols, line, strict=True)})
        except ValueError as exc:
            raise PersistenceError(f"{path}: bad row {line}") from exc
    return out


# -- summaries -----------------------------------------------------------------------


def summary_text(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_summary(path, summary: dict) -> None:
    _write_bytes(path, summary_text(summary).encode())
