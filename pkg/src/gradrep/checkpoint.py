"""Versioned binary checkpoints.

Layout: an 8-byte magic (``GRCP`` + format version word), a little-endian
uint64 header length, a JSON header, then the raw bytes of every array in the
order the header lists them (sorted by section and name; float64 throughout).
The header carries the model kind and spec echo, epoch/step counters and the
data-stream RNG state, so loading a checkpoint reproduces the run exactly:
``load(save(x))`` is bit-identical and resuming continues an interrupted run
on the same trajectory as the uninterrupted one.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, FormatVersionError
from .models import (
    Model,
    ModelSpec,
    block_infos,
    build_csla,
    build_hypersearch,
    build_repghost_variant,
    build_repvgg,
    build_target,
)

MAGIC = b"GRCP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_kind: str
    spec: ModelSpec
    params: dict
    buffers: dict
    opt_state: dict = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


def _array_sections(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield "param", name, ckpt.params[name]
    for name in sorted(ckpt.buffers):
        yield "buffer", name, ckpt.buffers[name]
    for name in sorted(ckpt.opt_state):
        yield "opt", name, ckpt.opt_state[name]


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    for section, name, arr in _array_sections(ckpt):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"section": section, "name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model": {
            "kind": ckpt.model_kind,
            "spec": {
                "stem_channels": ckpt.spec.stem_channels,
                "stages": [list(s) for s in ckpt.spec.stages],
                "num_classes": ckpt.spec.num_classes,
                "input_hw": ckpt.spec.input_hw,
            },
        },
        "counters": {"epoch": ckpt.epoch, "step": ckpt.step},
        "rng": ckpt.rng_state,
        "extra": ckpt.extra,
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: checkpoint format {version} unsupported (this build reads "
            f"{FORMAT_VERSION})"
        )
    header_len = struct.unpack("<Q", data[8:16])[0]
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    offset = 16 + header_len
    params, buffers, opt_state = {}, {}, {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise DataFormatError(
                f"{path}: truncated at array {entry['name']!r} "
                f"(need {nbytes} bytes at offset {offset}, have {len(data) - offset})"
            )
        arr = np.frombuffer(data, dtype=np.float64, count=count,
                            offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
        {"param": params, "buffer": buffers, "opt": opt_state}[entry["section"]][
            entry["name"]] = arr
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} trailing bytes")
    spec_doc = header["model"]["spec"]
    spec = ModelSpec(spec_doc["stem_channels"],
                     tuple(tuple(s) for s in spec_doc["stages"]),
                     spec_doc["num_classes"], spec_doc["input_hw"])
    return Checkpoint(header["model"]["kind"], spec, params, buffers, opt_state,
                      header.get("rng"), header["counters"]["epoch"],
                      header["counters"]["step"], header.get("extra", {}))


def snapshot_model(model: Model, optimizer=None, data_rng=None, epoch=0, step=0,
                   extra=None, multipliers=None) -> Checkpoint:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    buffers = {n: np.array(b) for n, b in model.named_buffers()}
    opt_state = dict(optimizer.state_arrays()) if optimizer is not None else {}
    if multipliers:
        for name, m in multipliers.items():
            opt_state[f"mult.{name}"] = np.asarray(m, dtype=np.float64)
    return Checkpoint(model.kind, model.spec, params, buffers, opt_state,
                      data_rng.get_state() if data_rng is not None else None,
                      epoch, step, dict(extra or {}))


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the model skeleton for the stored kind and overwrite every
    parameter and buffer with the stored values."""
    spec = ckpt.spec
    if ckpt.model_kind == "target":
        model = build_target(spec, seed=0)
    elif ckpt.model_kind in ("csla", "hs"):
        ones = {i.block_id: (np.ones(i.c_out), np.ones(i.c_out))
                for i in block_infos(spec)}
        if ckpt.model_kind == "csla":
            model = build_csla(spec, ones, seed=0)
        else:
            model = build_hypersearch(spec, seed=0)
    elif ckpt.model_kind == "repvgg":
        model = build_repvgg(spec, seed=0)
    elif ckpt.model_kind == "repghost":
        model = build_repghost_variant(spec, seed=0)
    else:
        raise DataFormatError(f"cannot restore model kind {ckpt.model_kind!r}")
    model.load_arrays(ckpt.params, ckpt.buffers)
    return model


def optimizer_arrays(ckpt: Checkpoint) -> dict:
    """The optimizer's own state entries (multiplier dumps stripped)."""
    return {k: v for k, v in ckpt.opt_state.items() if not k.startswith("mult.")}


def snapshot_fused(model, spec: ModelSpec, extra=None) -> Checkpoint:
    """Checkpoint for a deploy-form model (fused biased convs + FC)."""
    params = {"fc.weight": model.fc_weight.copy(), "fc.bias": model.fc_bias.copy()}
    strides, paddings = [], []
    for i, conv in enumerate(model.convs):
        params[f"conv{i}.kernel"] = conv.kernel.copy()
        params[f"conv{i}.bias"] = conv.bias.copy()
        strides.append(conv.stride)
        paddings.append(conv.padding)
    meta = dict(extra or {})
    meta.update({"num_convs": len(model.convs), "strides": strides,
                 "paddings": paddings})
    return Checkpoint("fused", spec, params, {}, {}, None, 0, 0, meta)


def restore_fused(ckpt: Checkpoint):
    from .equivlab import FusedConv, InferenceModel

    if ckpt.model_kind != "fused":
        raise DataFormatError(f"checkpoint kind {ckpt.model_kind!r} is not fused")
    convs = []
    for i in range(ckpt.extra["num_convs"]):
        convs.append(FusedConv(ckpt.params[f"conv{i}.kernel"],
                               ckpt.params[f"conv{i}.bias"],
                               ckpt.extra["strides"][i], ckpt.extra["paddings"][i]))
    return InferenceModel(convs, ckpt.params["fc.weight"], ckpt.params["fc.bias"],
                          spec=ckpt.spec)
