"""Model families: plain target nets, branched linear-addition (CSLA) nets,
their hyper-search variants, three-branch conversion baselines, the two-branch
1x1 ("ghost") variant, and a residual reference, plus parameter/FLOPs
accounting.

All builders share the stem / stage / head skeleton: a stride-2 3x3 stem conv
with BN+ReLU, four-or-fewer stages whose first block has stride 2, and a
global-average-pool + FC head. Builders draw every kernel from one Rng stream
in a fixed documented order (stem, blocks in sequence, head), which is what
lets the branched model and its single-operator counterpart be initialized as
exact counterparts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, ChannelScale, Conv2d, Linear, Module
from .optim import equivalent_init
from .rng import Rng, msra_init


@dataclass(frozen=True)
class ModelSpec:
    """Stage layout: stem width, (num_layers, channels) per stage, head size."""

    stem_channels: int
    stages: tuple
    num_classes: int
    input_hw: int

    def __post_init__(self):
        if self.stem_channels <= 0 or self.num_classes <= 0 or self.input_hw <= 0:
            raise ConfigError(f"model spec fields must be positive: {self}")
        if not self.stages:
            raise ConfigError("model spec needs at least one stage")
        for st in self.stages:
            if len(st) != 2 or st[0] <= 0 or st[1] <= 0:
                raise ConfigError(f"bad stage entry {st}; want (num_layers, channels)")

    @staticmethod
    def from_stages_string(text, stem_channels, num_classes, input_hw):
        """Parse '4x128,6x256' into a spec."""
        stages = []
        for part in text.split(","):
            try:
                n, c = part.strip().split("x")
                stages.append((int(n), int(c)))
            except ValueError as exc:
                raise ConfigError(f"bad stage entry {part!r}; want NxC") from exc
        return ModelSpec(stem_channels, tuple(stages), num_classes, input_hw)


#: settings of the published four-stage plain-model family (the B/L rows):
#: stage depths, stage widths, stem width 64, 1000 classes, 224x224 input.
PRESETS = {
    "b1": ModelSpec(64, ((4, 128), (6, 256), (16, 512), (1, 2048)), 1000, 224),
    "b2": ModelSpec(64, ((4, 160), (6, 320), (16, 640), (1, 2560)), 1000, 224),
    "l1": ModelSpec(64, ((8, 128), (14, 256), (24, 512), (1, 2048)), 1000, 224),
    "l2": ModelSpec(64, ((8, 160), (14, 320), (24, 640), (1, 2560)), 1000, 224),
    # desk-scale specs for CPU experiments
    "desk6": ModelSpec(8, ((2, 8), (2, 16), (2, 32)), 10, 32),
    "desk9": ModelSpec(8, ((3, 8), (3, 16), (3, 32)), 10, 32),
    "desk4": ModelSpec(8, ((2, 8), (2, 16)), 10, 32),
}


@dataclass(frozen=True)
class BlockInfo:
    index: int
    block_id: str
    c_in: int
    c_out: int
    stride: int
    has_identity: bool
    depth_l: int  # identity-bearing blocks count 1, 2, ... within each stage


@dataclass(frozen=True)
class CslaBlockSpec:
    """Description of one branched linear-addition block: channel counts,
    stride, the constant per-channel scales after the 3x3 and 1x1 branches,
    and whether the trainable identity scaling exists."""

    c_in: int
    c_out: int
    stride: int
    s: tuple
    t: tuple
    has_identity: bool

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        shape_preserving = self.c_in == self.c_out and self.stride == 1
        if self.has_identity != shape_preserving:
            raise ConfigError(
                "has_identity must hold exactly when c_in == c_out and stride == 1 "
                f"(c_in={self.c_in}, c_out={self.c_out}, stride={self.stride})"
            )
        s = np.asarray(self.s, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if s.shape != (self.c_out,) or t.shape != (self.c_out,):
            raise ShapeError(
                f"scales must have shape ({self.c_out},), got {s.shape}/{t.shape}"
            )
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
            raise ConfigError("scales must be finite")

    @staticmethod
    def square(c: int, s, t) -> "CslaBlockSpec":
        return CslaBlockSpec(c, c, 1, tuple(np.asarray(s, dtype=float)),
                             tuple(np.asarray(t, dtype=float)), True)


def block_infos(spec: ModelSpec) -> list[BlockInfo]:
    """Static block layout; has_identity iff c_in == c_out and stride == 1."""
    infos = []
    prev_c = spec.stem_channels
    idx = 0
    for si, (num_layers, channels) in enumerate(spec.stages, start=1):
        id_depth = 0
        for bi in range(num_layers):
            stride = 2 if bi == 0 else 1
            c_in = prev_c if bi == 0 else channels
            has_id = c_in == channels and stride == 1
            if has_id:
                id_depth += 1
            infos.append(BlockInfo(idx, f"s{si}b{bi}", c_in, channels, stride,
                                   has_id, id_depth if has_id else 1))
            idx += 1
        prev_c = channels
    return infos


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class PlainBlock(Module):
    """Single 3x3 conv -> BN -> ReLU."""

    def __init__(self, info: BlockInfo, rng=None, weight=None):
        self.info = info
        self.conv = Conv2d(info.c_in, info.c_out, 3, info.stride, 1, rng=rng,
                           weight=weight)
        self.bn = BatchNorm2d(info.c_out)

    def forward(self, x, training):
        return ops.relu(self.bn.forward(self.conv.forward(x), training))


class CslaBlock(Module):
    """Branched linear addition: s*conv3x3 + t*conv1x1 (+ gamma*identity),
    then BN and ReLU. Scales are constants in the branched counterpart and
    trainable in the hyper-search variant; gamma is always trainable."""

    def __init__(self, info: BlockInfo, s_values, t_values, trainable_scales,
                 rng=None, gamma_values=None):
        self.info = info
        s_values = np.asarray(s_values, dtype=np.float64)
        t_values = np.asarray(t_values, dtype=np.float64)
        if s_values.shape != (info.c_out,) or t_values.shape != (info.c_out,):
            raise ShapeError(
                f"block {info.block_id}: scale vectors must have shape ({info.c_out},), "
                f"got s{s_values.shape} t{t_values.shape}"
            )
        self.conv3 = Conv2d(info.c_in, info.c_out, 3, info.stride, 1, rng=rng)
        self.conv1 = Conv2d(info.c_in, info.c_out, 1, info.stride, 0, rng=rng)
        self.scale3 = ChannelScale(s_values, trainable_scales)
        self.scale1 = ChannelScale(t_values, trainable_scales)
        if info.has_identity:
            g = np.ones(info.c_out) if gamma_values is None else np.asarray(gamma_values)
            self.gamma = ChannelScale(g, trainable=True)
        self.bn = BatchNorm2d(info.c_out)
        self.capture = False
        self.last_identity = None
        self.last_sum = None

    def forward(self, x, training):
        z = ops.add(self.scale3.forward(self.conv3.forward(x)),
                    self.scale1.forward(self.conv1.forward(x)))
        if self.info.has_identity:
            idpath = self.gamma.forward(x)
            z = ops.add(z, idpath)
            if self.capture:
                self.last_identity = idpath.data
                self.last_sum = z.data
        return ops.relu(self.bn.forward(z, training))


class RepVggStyleBlock(Module):
    """Three branches with per-branch BN (3x3+BN, 1x1+BN, identity BN),
    summed then ReLU; the conversion/quantization baseline."""

    def __init__(self, info: BlockInfo, rng=None):
        self.info = info
        self.conv3 = Conv2d(info.c_in, info.c_out, 3, info.stride, 1, rng=rng)
        self.bn3 = BatchNorm2d(info.c_out)
        self.conv1 = Conv2d(info.c_in, info.c_out, 1, info.stride, 0, rng=rng)
        self.bn1 = BatchNorm2d(info.c_out)
        if info.has_identity:
            self.bnid = BatchNorm2d(info.c_out)

    def forward(self, x, training):
        z = ops.add(self.bn3.forward(self.conv3.forward(x), training),
                    self.bn1.forward(self.conv1.forward(x), training))
        if self.info.has_identity:
            z = ops.add(z, self.bnid.forward(x, training))
        return ops.relu(z)


class GhostStyleBlock(Module):
    """Two-branch degenerate case: t*conv1x1 + gamma*identity, BN after the
    addition, then ReLU. Shape-preserving by construction."""

    def __init__(self, c, t_values, trainable_scales, rng=None, with_identity=True):
        self.c = c
        self.with_identity = with_identity
        self.conv1 = Conv2d(c, c, 1, 1, 0, rng=rng)
        self.scale1 = ChannelScale(np.asarray(t_values, dtype=np.float64),
                                   trainable_scales)
        if with_identity:
            self.gamma = ChannelScale(np.ones(c), trainable=True)
        self.bn = BatchNorm2d(c)

    def forward(self, x, training):
        z = self.scale1.forward(self.conv1.forward(x))
        if self.with_identity:
            z = ops.add(z, self.gamma.forward(x))
        return ops.relu(self.bn.forward(z, training))


class ResidualBlock(Module):
    """conv3-BN-ReLU-conv3-BN plus identity, post-add ReLU."""

    def __init__(self, c, rng=None):
        self.c = c
        self.conv_a = Conv2d(c, c, 3, 1, 1, rng=rng)
        self.bn_a = BatchNorm2d(c)
        self.conv_b = Conv2d(c, c, 3, 1, 1, rng=rng)
        self.bn_b = BatchNorm2d(c)
        self.capture = False
        self.last_identity = None
        self.last_sum = None

    def forward(self, x, training):
        h = ops.relu(self.bn_a.forward(self.conv_a.forward(x), training))
        h = self.bn_b.forward(self.conv_b.forward(h), training)
        z = ops.add(x, h)
        if self.capture:
            self.last_identity = x.data
            self.last_sum = z.data
        return ops.relu(z)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Model(Module):
    """Stem conv/BN/ReLU, a flat block list, GAP + FC head."""

    def __init__(self, kind, spec, stem_conv, stem_bn, blocks, fc):
        self.kind = kind
        self.spec = spec
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = blocks
        self.fc = fc

    def forward(self, x, training=False):
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        t = ops.relu(self.stem_bn.forward(self.stem_conv.forward(t), training))
        for block in self.blocks:
            t = block.forward(t, training)
        return self.fc.forward(ops.global_avg_pool(t))

    def set_capture(self, flag: bool):
        for block in self.blocks:
            if hasattr(block, "capture"):
                block.capture = bool(flag)

    def gr_managed_params(self):
        """Names of the block kernels the multiplier optimizer manages."""
        if self.kind not in ("target", "ghost_target"):
            return []
        return [f"blocks.{i}.conv.weight" for i in range(len(self.blocks))]

    def block_infos(self):
        return [b.info for b in self.blocks if hasattr(b, "info")]


def _stem_and_head(spec, rng):
    stem_conv = Conv2d(3, spec.stem_channels, 3, 2, 1, rng=rng)
    stem_bn = BatchNorm2d(spec.stem_channels)
    return stem_conv, stem_bn


def _head(spec, rng):
    return Linear(spec.stages[-1][1], spec.num_classes, rng=rng)


def _scales_lookup(scales) -> dict:
    """Accept a ScalesFile-like object (with .records) or a plain mapping
    block_id -> (s, t)."""
    if scales is None:
        return {}
    if hasattr(scales, "records"):
        return {r.block_id: (np.asarray(r.s), np.asarray(r.t)) for r in scales.records}
    return {k: (np.asarray(v[0]), np.asarray(v[1])) for k, v in scales.items()}


def _block_scales(info, lookup):
    if info.block_id not in lookup:
        raise ConfigError(f"scales file has no record for block {info.block_id!r}")
    s, t = lookup[info.block_id]
    if s.shape != (info.c_out,) or t.shape != (info.c_out,):
        raise ShapeError(
            f"block {info.block_id}: scales of shape s{s.shape}/t{t.shape} do not "
            f"match {info.c_out} output channels"
        )
    return s, t


def build_target(spec: ModelSpec, seed=None, rng: Rng | None = None) -> Model:
    """Plain stack: one 3x3 conv + BN + ReLU per block, MSRA init."""
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = [PlainBlock(info, rng=rng) for info in block_infos(spec)]
    return Model("target", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def build_target_equivalent_init(spec: ModelSpec, scales, seed=None,
                                 rng: Rng | None = None) -> Model:
    """Plain stack whose kernels are the equivalent single-operator form of a
    freshly initialized branched counterpart with the given constant scales.

    Draws the same random stream as :func:`build_csla` (stem, then per block a
    3x3 kernel followed by a 1x1 kernel, then the head), so with the same seed
    the two models are exact training counterparts.
    """
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    lookup = _scales_lookup(scales)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        s, t = _block_scales(info, lookup)
        w_s = msra_init((info.c_out, info.c_in, 3, 3), rng=rng)
        w_t = msra_init((info.c_out, info.c_in, 1, 1), rng=rng)
        gamma = np.ones(info.c_out) if info.has_identity else None
        w = equivalent_init(w_s, w_t, s, t, gamma)
        blocks.append(PlainBlock(info, weight=w))
    return Model("target", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def build_csla(spec: ModelSpec, scales, seed=None, rng: Rng | None = None,
               trainable_scales=False) -> Model:
    """The branched constant-scale counterpart (never trained in production;
    exists so its dynamics can be verified against the multiplier optimizer)."""
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    lookup = _scales_lookup(scales)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        s, t = _block_scales(info, lookup)
        blocks.append(CslaBlock(info, s, t, trainable_scales, rng=rng))
    return Model("csla", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def hs_init_value(depth_l: int) -> float:
    """Depth-indexed init for trainable branch scales: sqrt(2 / l)."""
    if depth_l < 1:
        raise ConfigError(f"depth index must be >= 1, got {depth_l}")
    return float(np.sqrt(2.0 / depth_l))


def build_hypersearch(spec: ModelSpec, seed=None, rng: Rng | None = None) -> Model:
    """Branched model with trainable scales, s = t = sqrt(2/l) at init and
    identity scales at 1."""
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        v = hs_init_value(info.depth_l)
        vec = np.full(info.c_out, v)
        blocks.append(CslaBlock(info, vec, vec, trainable_scales=True, rng=rng))
    model = Model("hs", spec, stem_conv, stem_bn, blocks, _head(spec, rng))
    return model


def build_hypersearch_all_ones(spec: ModelSpec, seed=None, rng=None) -> Model:
    """Hyper-search variant with all scales initialized to 1 (control arm of
    the init study)."""
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        vec = np.ones(info.c_out)
        blocks.append(CslaBlock(info, vec, vec, trainable_scales=True, rng=rng))
    return Model("hs", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def build_repvgg(spec: ModelSpec, seed=None, rng: Rng | None = None) -> Model:
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = [RepVggStyleBlock(info, rng=rng) for info in block_infos(spec)]
    return Model("repvgg", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def build_repghost_variant(spec: ModelSpec, t_scales=None, seed=None,
                           rng: Rng | None = None) -> Model:
    """Stages of two-branch 1x1 blocks behind a strided plain adapter block.

    ``t_scales``: mapping block_id -> vector for the constant 1x1-branch
    scales; defaults to all ones.
    """
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        if not info.has_identity:
            blocks.append(PlainBlock(info, rng=rng))
        else:
            t = (np.ones(info.c_out) if t_scales is None
                 else np.asarray(t_scales[info.block_id]))
            block = GhostStyleBlock(info.c_out, t, trainable_scales=False, rng=rng)
            block.info = info
            blocks.append(block)
    return Model("repghost", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


def build_resnet_reference(stage_blocks, channels=None, num_classes=10,
                           input_hw=32, stem_channels=None, seed=None,
                           rng: Rng | None = None) -> Model:
    """Residual reference for the identity-variance study: each stage opens
    with a strided plain block (no identity path) followed by residual blocks."""
    rng = rng if rng is not None else Rng(0 if seed is None else seed)
    if channels is None:
        channels = [8 * (2 ** i) for i in range(len(stage_blocks))]
    spec = ModelSpec(stem_channels or channels[0],
                     tuple((n, c) for n, c in zip(stage_blocks, channels)),
                     num_classes, input_hw)
    stem_conv, stem_bn = _stem_and_head(spec, rng)
    blocks = []
    for info in block_infos(spec):
        if info.has_identity:
            block = ResidualBlock(info.c_out, rng=rng)
            block.info = info
            blocks.append(block)
        else:
            blocks.append(PlainBlock(info, rng=rng))
    return Model("resnet", spec, stem_conv, stem_bn, blocks, _head(spec, rng))


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def count_params_inference(spec: ModelSpec) -> int:
    """Deploy-form parameter count: every block folded to one biased 3x3 conv,
    stem conv folded with its BN, plus the FC head."""
    total = spec.stem_channels * 3 * 9 + spec.stem_channels
    for info in block_infos(spec):
        total += info.c_out * info.c_in * 9 + info.c_out
    total += spec.num_classes * spec.stages[-1][1] + spec.num_classes
    return total


def count_params_train(spec: ModelSpec, kind: str) -> int:
    """Trainable parameters of the built training-time graph."""
    total = spec.stem_channels * 27 + 2 * spec.stem_channels  # stem conv + BN
    for info in block_infos(spec):
        k3 = info.c_out * info.c_in * 9
        k1 = info.c_out * info.c_in
        bn = 2 * info.c_out
        if kind == "target":
            total += k3 + bn
        elif kind == "csla":
            total += k3 + k1 + bn + (info.c_out if info.has_identity else 0)
        elif kind == "hs":
            total += k3 + k1 + bn + 2 * info.c_out + (info.c_out if info.has_identity else 0)
        elif kind == "repvgg":
            total += k3 + k1 + 2 * bn + (bn if info.has_identity else 0)
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
    total += spec.num_classes * spec.stages[-1][1] + spec.num_classes
    return total


def _strided_out(hw: int) -> int:
    return (hw + 2 - 3) // 2 + 1


def count_flops(spec: ModelSpec, input_hw=None) -> int:
    """Deploy-form compute, counted as multiply-accumulates (one MAC = one
    FLOP here; BN/ReLU/pooling ignored). The convention is pinned in README."""
    hw = input_hw if input_hw is not None else spec.input_hw
    hw = _strided_out(hw)
    total = hw * hw * spec.stem_channels * 3 * 9
    for info in block_infos(spec):
        if info.stride == 2:
            hw = _strided_out(hw)
        total += hw * hw * info.c_out * info.c_in * 9
    total += spec.num_classes * spec.stages[-1][1]
    return total


def count_built_params(model: Model) -> int:
    return sum(p.data.size for _, p in model.named_parameters())


def build_multipliers(model: Model, scales) -> dict:
    """Multiplier tensors for every managed block kernel of a plain target
    model, derived on demand from a scales file (or block_id -> (s, t) map)."""
    from .optim import build_grad_mult

    lookup = _scales_lookup(scales)
    mults = {}
    for i, block in enumerate(model.blocks):
        info = block.info
        s, t = _block_scales(info, lookup)
        mults[f"blocks.{i}.conv.weight"] = build_grad_mult(
            s, t, info.has_identity, c_in=info.c_in
        )
    return mults
