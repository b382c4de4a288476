"""Hyper-search: train the trainable-scales model on a small dataset, harvest
the converged scale vectors, and persist them for the multiplier optimizer.

The scales file is JSON with every float stored in C hex-float form
(``float.hex()``), so export/import round-trips are bit-exact. Only the branch
scales s and t are exported; the trained identity-branch gamma is dropped on
purpose because the target side fixes the identity scale convention at 1 (the
bare +1 in both the multiplier and the equivalent-init formulas).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetHandle
from .errors import ConfigError, DataFormatError, FormatVersionError
from .models import Model, ModelSpec, build_hypersearch, hs_init_value
from .optim import MultiplierSgd, OptimizerConfig
from .rng import Rng
from .reports import write_csv
from .train import TrainResult, train_model

SCALES_FORMAT_VERSION = 1

DEGRADE_MODES = ("all_ones", "hs_init", "channel_mean")


@dataclass
class ScaleRecord:
    block_id: str
    c_out: int
    has_identity: bool
    depth_l: int
    s: np.ndarray
    t: np.ndarray


@dataclass
class ScalesFile:
    records: list
    provenance: dict = field(default_factory=dict)
    format_version: int = SCALES_FORMAT_VERSION

    def record(self, block_id: str) -> ScaleRecord:
        for r in self.records:
            if r.block_id == block_id:
                return r
        raise ConfigError(f"scales file has no record for block {block_id!r}")

    def __eq__(self, other):
        if not isinstance(other, ScalesFile):
            return NotImplemented
        if self.format_version != other.format_version:
            return False
        if self.provenance != other.provenance:
            return False
        if len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if (a.block_id, a.c_out, a.has_identity, a.depth_l) != \
               (b.block_id, b.c_out, b.has_identity, b.depth_l):
                return False
            if a.s.tobytes() != b.s.tobytes() or a.t.tobytes() != b.t.tobytes():
                return False
        return True


def _hex_list(arr: np.ndarray) -> list:
    return [float(v).hex() for v in arr]


def _from_hex_list(values, what: str) -> np.ndarray:
    try:
        return np.array([float.fromhex(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"bad hex float in {what}: {exc}") from exc


def export_scales(scales: ScalesFile, path: str) -> None:
    doc = {
        "format_version": scales.format_version,
        "records": [
            {
                "block_id": r.block_id,
                "c_out": r.c_out,
                "has_identity": r.has_identity,
                "depth_l": r.depth_l,
                "s_hex": _hex_list(r.s),
                "t_hex": _hex_list(r.t),
            }
            for r in scales.records
        ],
        "provenance": scales.provenance,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_scales(path: str) -> ScalesFile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise DataFormatError(f"{path}: missing format_version header")
    if doc["format_version"] != SCALES_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format_version {doc['format_version']} unsupported "
            f"(this build reads {SCALES_FORMAT_VERSION})"
        )
    records = []
    try:
        for rec in doc["records"]:
            s = _from_hex_list(rec["s_hex"], f"block {rec['block_id']} s")
            t = _from_hex_list(rec["t_hex"], f"block {rec['block_id']} t")
            if len(s) != rec["c_out"] or len(t) != rec["c_out"]:
                raise DataFormatError(
                    f"{path}: block {rec['block_id']} declares c_out={rec['c_out']} "
                    f"but has {len(s)}/{len(t)} scale entries"
                )
            records.append(ScaleRecord(rec["block_id"], int(rec["c_out"]),
                                       bool(rec["has_identity"]), int(rec["depth_l"]),
                                       s, t))
    except KeyError as exc:
        raise DataFormatError(f"{path}: record missing key {exc}") from exc
    return ScalesFile(records, dict(doc.get("provenance", {})))


def scales_from_model(model: Model, provenance: dict | None = None) -> ScalesFile:
    """Harvest the current s/t vectors from a trainable-scales model."""
    records = []
    for block in model.blocks:
        info = block.info
        records.append(ScaleRecord(info.block_id, info.c_out, info.has_identity,
                                   info.depth_l, block.scale3.values.copy(),
                                   block.scale1.values.copy()))
    return ScalesFile(records, dict(provenance or {}))


def init_scales(spec: ModelSpec, mode: str = "hs_init") -> ScalesFile:
    """Scale vectors at their initialization values, without any training."""
    from .models import block_infos

    records = []
    for info in block_infos(spec):
        v = hs_init_value(info.depth_l) if mode == "hs_init" else 1.0
        vec = np.full(info.c_out, v)
        records.append(ScaleRecord(info.block_id, info.c_out, info.has_identity,
                                   info.depth_l, vec.copy(), vec.copy()))
    return ScalesFile(records, {"source": f"init:{mode}"})


def degrade_scales(scales: ScalesFile, mode: str) -> ScalesFile:
    """Ablation transforms: all_ones, hs_init (sqrt(2/l)), channel_mean."""
    mode = mode.replace("-", "_")
    if mode not in DEGRADE_MODES:
        raise ConfigError(f"unknown degrade mode {mode!r}; want one of {DEGRADE_MODES}")
    records = []
    for r in scales.records:
        if mode == "all_ones":
            s = np.ones(r.c_out)
            t = np.ones(r.c_out)
        elif mode == "hs_init":
            v = hs_init_value(r.depth_l)
            s = np.full(r.c_out, v)
            t = np.full(r.c_out, v)
        else:  # channel_mean
            s = np.full(r.c_out, float(r.s.mean()))
            t = np.full(r.c_out, float(r.t.mean()))
        records.append(ScaleRecord(r.block_id, r.c_out, r.has_identity, r.depth_l, s, t))
    prov = dict(scales.provenance)
    prov["degraded"] = mode
    return ScalesFile(records, prov)


@dataclass
class ScaleTrajectory:
    """Per-epoch mean of s, t, gamma per block (gamma empty where no identity)."""

    rows: list = field(default_factory=list)  # (epoch, block_id, s, t, gamma|None)

    def append_epoch(self, epoch: int, model: Model) -> None:
        for block in model.blocks:
            gamma = (float(block.gamma.values.mean())
                     if block.info.has_identity else None)
            self.rows.append((epoch, block.info.block_id,
                              float(block.scale3.values.mean()),
                              float(block.scale1.values.mean()), gamma))

    def write_csv(self, path: str) -> None:
        write_csv(path, ["epoch", "block_id", "mean_s", "mean_t", "mean_gamma"],
                  self.rows)


def run_hyper_search(spec: ModelSpec, dataset: DatasetHandle, cfg: OptimizerConfig,
                     seed: int, *, epochs: int | None = None,
                     test_dataset: DatasetHandle | None = None,
                     augment: bool = True) -> tuple[ScalesFile, ScaleTrajectory, TrainResult]:
    """Train the trainable-scales model end to end with plain SGD and export
    the final per-block scale vectors."""
    model_rng, data_rng = Rng.spawn(seed, 2)
    model = build_hypersearch(spec, rng=model_rng)
    optimizer = MultiplierSgd(dict(model.named_parameters()),
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    trajectory = ScaleTrajectory()

    def hook(epoch, mdl, _opt, _rng, _res):
        trajectory.append_epoch(epoch, mdl)

    result = train_model(model, optimizer, dataset, test_dataset, cfg, data_rng,
                         epochs=epochs, augment=augment,
                         eval_each_epoch=test_dataset is not None, epoch_hook=hook)
    provenance = {
        "dataset": f"{dataset.source}(n={len(dataset)},res={dataset.resolution},"
                   f"classes={dataset.num_classes})",
        "seed": seed,
        "epochs": result.epochs_run,
    }
    scales = scales_from_model(model, provenance)
    for r in scales.records:
        if not (np.all(np.isfinite(r.s)) and np.all(np.isfinite(r.t))):
            raise DataFormatError(f"block {r.block_id}: non-finite searched scales")
    return scales, trajectory, result
