"""Executable verification of the counterpart theorem, structural conversion
(BN fusion and branch merging) with inference-equivalence checks, and the
identity-variance-ratio analysis.

The lockstep harness trains the branched block and its single-operator
counterpart side by side on one shared seeded input/target stream and records,
at every iteration, the max-abs output divergence and the max-abs divergence
of the combined branch kernels from the single kernel. With double precision
both stay at accumulated round-off; skipping either the equivalent
initialization or the gradient multiplier is expected to break them fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d
from .models import CslaBlockSpec, Model
from .optim import (
    MultiplierSgd,
    OptimizerConfig,
    build_grad_mult,
    build_grad_mult_1x1,
    build_grad_mult_scalar,
    equivalent_init,
    equivalent_init_1x1,
)
from .reports import write_csv, write_json
from .rng import Rng, msra_init

ABLATIONS = (None, "skip_reinit", "skip_gradmult")


@dataclass
class EquivalenceReport:
    output_divergence: list  # max-abs output gap at iteration i (pre-update)
    kernel_divergence: list  # max-abs combined-kernel gap at iteration i
    steps: int
    config: dict = field(default_factory=dict)

    @property
    def max_output_divergence(self) -> float:
        return max(self.output_divergence)

    @property
    def max_kernel_divergence(self) -> float:
        return max(self.kernel_divergence)

    def divergence_at(self, step: int) -> float:
        return max(self.output_divergence[: step + 1])

    def write_csv(self, path: str) -> None:
        rows = [(i, o, k) for i, (o, k) in
                enumerate(zip(self.output_divergence, self.kernel_divergence))]
        write_csv(path, ["step", "output_div", "kernel_div"], rows)

    def write_json_summary(self, path: str) -> None:
        write_json(path, {
            "steps": self.steps,
            "max_output_divergence": self.max_output_divergence,
            "max_kernel_divergence": self.max_kernel_divergence,
            "config": self.config,
        })


class _Counterparts:
    """One branched/single pair stepped in lockstep by the harness."""

    def forward_branched(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def forward_single(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def combined_kernel(self) -> np.ndarray:
        raise NotImplementedError

    def single_kernel(self) -> np.ndarray:
        return self.w_prime.data


class _ScalarPair(_Counterparts):
    """Two same-shape 3x3 kernels with scalar scales vs one kernel with the
    scalar multiplier."""

    def __init__(self, alpha_a, alpha_b, c, seed, ablation=None):
        rng = Rng(seed)
        self.alpha_a, self.alpha_b = float(alpha_a), float(alpha_b)
        w_a = msra_init((c, c, 3, 3), rng=rng)
        w_b = msra_init((c, c, 3, 3), rng=rng)
        self.w_a = Parameter(w_a, name="w_a")
        self.w_b = Parameter(w_b, name="w_b")
        if ablation == "skip_reinit":
            init = msra_init((c, c, 3, 3), rng=rng)
        else:
            init = alpha_a * w_a + alpha_b * w_b
        self.w_prime = Parameter(init.copy(), name="w")
        mult = (1.0 if ablation == "skip_gradmult"
                else build_grad_mult_scalar(alpha_a, alpha_b))
        self.branched_params = {"w_a": self.w_a, "w_b": self.w_b}
        self.single_params = {"w": self.w_prime}
        self.multipliers = {"w": mult}

    def forward_branched(self, x, training):
        ya = ops.conv2d(x, self.w_a, stride=1, padding=1)
        yb = ops.conv2d(x, self.w_b, stride=1, padding=1)
        return ops.add(
            ops.channel_scale(ya, Tensor(np.full(ya.data.shape[1], self.alpha_a))),
            ops.channel_scale(yb, Tensor(np.full(yb.data.shape[1], self.alpha_b))),
        )

    def forward_single(self, x, training):
        return ops.conv2d(x, self.w_prime, stride=1, padding=1)

    def combined_kernel(self):
        return self.alpha_a * self.w_a.data + self.alpha_b * self.w_b.data


class _CslaPair(_Counterparts):
    """Full branched block (3x3, 1x1, optional identity, channel-wise scales)
    vs one 3x3 conv, optionally with a shared post-addition BN + ReLU head."""

    def __init__(self, block: CslaBlockSpec, seed, ablation=None, post_bn=False):
        rng = Rng(seed)
        self.block = block
        self.s = np.asarray(block.s, dtype=np.float64)
        self.t = np.asarray(block.t, dtype=np.float64)
        w_s = msra_init((block.c_out, block.c_in, 3, 3), rng=rng)
        w_t = msra_init((block.c_out, block.c_in, 1, 1), rng=rng)
        self.w_s = Parameter(w_s, name="w_s")
        self.w_t = Parameter(w_t, name="w_t")
        self.gamma = (Parameter(np.ones(block.c_out), name="gamma")
                      if block.has_identity else None)
        if ablation == "skip_reinit":
            init = msra_init((block.c_out, block.c_in, 3, 3), rng=rng)
        else:
            init = equivalent_init(
                w_s, w_t, self.s, self.t,
                np.ones(block.c_out) if block.has_identity else None,
            )
        self.w_prime = Parameter(init.copy(), name="w")
        mult = (np.ones_like(init) if ablation == "skip_gradmult"
                else build_grad_mult(self.s, self.t, block.has_identity,
                                     c_in=block.c_in))
        self.branched_params = {"w_s": self.w_s, "w_t": self.w_t}
        if self.gamma is not None:
            self.branched_params["gamma"] = self.gamma
        self.single_params = {"w": self.w_prime}
        self.multipliers = {"w": mult}
        self.post_bn = post_bn
        if post_bn:
            self.bn_branched = BatchNorm2d(block.c_out)
            self.bn_single = BatchNorm2d(block.c_out)
            self.branched_params.update({"bn.gamma": self.bn_branched.gamma,
                                         "bn.beta": self.bn_branched.beta})
            self.single_params.update({"bn.gamma": self.bn_single.gamma,
                                       "bn.beta": self.bn_single.beta})

    def forward_branched(self, x, training):
        z = ops.add(
            ops.channel_scale(ops.conv2d(x, self.w_s, self.block.stride, 1), Tensor(self.s)),
            ops.channel_scale(ops.conv2d(x, self.w_t, self.block.stride, 0), Tensor(self.t)),
        )
        if self.gamma is not None:
            z = ops.add(z, ops.channel_scale(x, self.gamma))
        if self.post_bn:
            z = ops.relu(self.bn_branched.forward(z, training))
        return z

    def forward_single(self, x, training):
        z = ops.conv2d(x, self.w_prime, self.block.stride, 1)
        if self.post_bn:
            z = ops.relu(self.bn_single.forward(z, training))
        return z

    def combined_kernel(self):
        return equivalent_init(
            self.w_s.data, self.w_t.data, self.s, self.t,
            self.gamma.data if self.gamma is not None else None,
        )


class _GhostPair(_Counterparts):
    """Two-branch 1x1 degenerate case (constant-scaled 1x1 conv plus trainable
    identity scaling), BN after the addition on both sides."""

    def __init__(self, c, t_values, seed, ablation=None):
        rng = Rng(seed)
        self.t = np.asarray(t_values, dtype=np.float64)
        w_t = msra_init((c, c, 1, 1), rng=rng)
        self.w_t = Parameter(w_t, name="w_t")
        self.gamma = Parameter(np.ones(c), name="gamma")
        if ablation == "skip_reinit":
            init = msra_init((c, c, 1, 1), rng=rng)
        else:
            init = equivalent_init_1x1(w_t, self.t, np.ones(c))
        self.w_prime = Parameter(init.copy(), name="w")
        mult = (np.ones_like(init) if ablation == "skip_gradmult"
                else build_grad_mult_1x1(self.t, has_identity=True))
        self.bn_branched = BatchNorm2d(c)
        self.bn_single = BatchNorm2d(c)
        self.branched_params = {"w_t": self.w_t, "gamma": self.gamma,
                                "bn.gamma": self.bn_branched.gamma,
                                "bn.beta": self.bn_branched.beta}
        self.single_params = {"w": self.w_prime,
                              "bn.gamma": self.bn_single.gamma,
                              "bn.beta": self.bn_single.beta}
        self.multipliers = {"w": mult}

    def forward_branched(self, x, training):
        z = ops.add(ops.channel_scale(ops.conv2d(x, self.w_t), Tensor(self.t)),
                    ops.channel_scale(x, self.gamma))
        return ops.relu(self.bn_branched.forward(z, training))

    def forward_single(self, x, training):
        z = ops.conv2d(x, self.w_prime)
        return ops.relu(self.bn_single.forward(z, training))

    def combined_kernel(self):
        return equivalent_init_1x1(self.w_t.data, self.t, self.gamma.data)


def _run_lockstep(pair: _Counterparts, steps, cfg: OptimizerConfig, seed, *,
                  batch, c_in, hw, training=True, config_echo=None) -> EquivalenceReport:
    """Synchronized updates on identical random input/target streams."""
    stream = Rng(seed)
    opt_branched = MultiplierSgd(pair.branched_params, momentum=cfg.momentum,
                                 weight_decay=cfg.weight_decay)
    opt_single = MultiplierSgd(pair.single_params, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay,
                               multipliers=pair.multipliers,
                               managed=tuple(pair.multipliers))
    out_div, kern_div = [], []
    for _ in range(steps):
        x_data = stream.gaussian((batch, c_in, hw, hw))
        y1 = pair.forward_branched(Tensor(x_data), training)
        y2 = pair.forward_single(Tensor(x_data), training)
        out_div.append(float(np.abs(y1.data - y2.data).max()))
        kern_div.append(float(np.abs(pair.combined_kernel() - pair.single_kernel()).max()))
        target = stream.gaussian(y1.data.shape)
        for params, loss in ((pair.branched_params, ops.mse_loss(y1, target)),
                             (pair.single_params, ops.mse_loss(y2, target))):
            for p in params.values():
                p.grad = None
            loss.backward()
        opt_branched.step(cfg.base_lr)
        opt_single.step(cfg.base_lr)
    echo = dict(config_echo or {})
    echo.update({"steps": steps, "lr": cfg.base_lr, "momentum": cfg.momentum,
                 "weight_decay": cfg.weight_decay, "seed": seed,
                 "batch": batch, "hw": hw})
    return EquivalenceReport(out_div, kern_div, steps, echo)


def verify_scalar_two_branch(alpha_a, alpha_b, steps, cfg: OptimizerConfig,
                             seed, *, channels=2, batch=4, hw=8,
                             ablation=None) -> EquivalenceReport:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; want one of {ABLATIONS}")
    pair = _ScalarPair(alpha_a, alpha_b, channels, seed, ablation)
    echo = {"case": "scalar_two_branch", "alpha_a": alpha_a, "alpha_b": alpha_b,
            "ablation": ablation or "none"}
    return _run_lockstep(pair, steps, cfg, seed + 1, batch=batch, c_in=channels,
                         hw=hw, config_echo=echo)


def verify_csla_gr(block: CslaBlockSpec, steps, cfg: OptimizerConfig, seed, *,
                   batch=4, hw=16, ablation=None, post_bn=False) -> EquivalenceReport:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; want one of {ABLATIONS}")
    pair = _CslaPair(block, seed, ablation, post_bn=post_bn)
    echo = {"case": "csla_block", "c_in": block.c_in, "c_out": block.c_out,
            "stride": block.stride, "has_identity": block.has_identity,
            "post_bn": post_bn, "ablation": ablation or "none"}
    return _run_lockstep(pair, steps, cfg, seed + 1, batch=batch,
                         c_in=block.c_in, hw=hw, config_echo=echo)


def verify_ghost_gr(channels, steps, cfg: OptimizerConfig, seed, *, batch=4,
                    hw=8, t_values=None, ablation=None) -> EquivalenceReport:
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; want one of {ABLATIONS}")
    t = (np.full(channels, 0.8) if t_values is None
         else np.asarray(t_values, dtype=np.float64))
    pair = _GhostPair(channels, t, seed, ablation)
    echo = {"case": "ghost_two_branch", "channels": channels,
            "ablation": ablation or "none"}
    return _run_lockstep(pair, steps, cfg, seed + 1, batch=batch, c_in=channels,
                         hw=hw, config_echo=echo)


# ---------------------------------------------------------------------------
# structural conversion
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


def _bn_state(bn) -> BNState:
    if isinstance(bn, BNState):
        return bn
    if isinstance(bn, BatchNorm2d):
        return BNState(bn.gamma.data, bn.beta.data, bn.running_mean,
                       bn.running_var, bn.eps)
    raise ConfigError(f"cannot read BN state from {type(bn).__name__}")


@dataclass
class FusedConv:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = ops.conv2d(Tensor(x), Tensor(self.kernel), self.stride,
                         self.padding, bias=Tensor(self.bias))
        return out.data


def fuse_bn(kernel: np.ndarray, bias, bn) -> FusedConv:
    """Fold an eval-mode BN into the preceding conv:
    kernel' = gamma/sqrt(var+eps) * kernel (per output channel),
    bias' = beta + (bias - mean) * gamma/sqrt(var+eps)."""
    st = _bn_state(bn)
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out = kernel.shape[0]
    bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
    scale = st.gamma / np.sqrt(st.var + st.eps)
    fused_kernel = kernel * scale[:, None, None, None]
    fused_bias = st.beta + (bias - st.mean) * scale
    return FusedConv(fused_kernel, fused_bias)


def pad_1x1_to_3x3(kernel: np.ndarray) -> np.ndarray:
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (1, 1):
        raise ShapeError(f"expected a 1x1 kernel, got {kernel.shape}")
    out = np.zeros((c_out, c_in, 3, 3))
    out[:, :, 1, 1] = kernel[:, :, 0, 0]
    return out


def dirac_kernel_3x3(c: int) -> np.ndarray:
    out = np.zeros((c, c, 3, 3))
    out[np.arange(c), np.arange(c), 1, 1] = 1.0
    return out


def convert_repvgg_block(block) -> FusedConv:
    """Merge a three-branch block into one biased 3x3 conv: fuse per-branch
    BNs, embed the 1x1 kernel at the centers, express the identity branch as a
    BN-fused diagonal-center kernel, then sum kernels and biases."""
    info = block.info
    f3 = fuse_bn(block.conv3.weight.data, None, block.bn3)
    f1 = fuse_bn(block.conv1.weight.data, None, block.bn1)
    kernel = f3.kernel + pad_1x1_to_3x3(f1.kernel)
    bias = f3.bias + f1.bias
    if info.has_identity:
        fid = fuse_bn(dirac_kernel_3x3(info.c_out), None, block.bnid)
        kernel = kernel + fid.kernel
        bias = bias + fid.bias
    return FusedConv(kernel, bias, stride=info.stride, padding=1)


class InferenceModel:
    """Deploy form: fused biased convs with ReLUs, GAP, FC. Eval only."""

    def __init__(self, convs: list, fc_weight: np.ndarray, fc_bias: np.ndarray,
                 spec=None):
        self.convs = convs  # list of FusedConv, ReLU after each
        self.fc_weight = np.asarray(fc_weight, dtype=np.float64)
        self.fc_bias = np.asarray(fc_bias, dtype=np.float64)
        self.spec = spec

    def features(self, x: np.ndarray):
        """Per-layer post-ReLU activations (calibration taps)."""
        acts = []
        h = np.asarray(x, dtype=np.float64)
        for conv in self.convs:
            h = np.maximum(conv.forward(h), 0.0)
            acts.append(h)
        return acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for conv in self.convs:
            h = np.maximum(conv.forward(h), 0.0)
        pooled = h.mean(axis=(2, 3))
        return pooled @ self.fc_weight.T + self.fc_bias


def convert_model(model: Model) -> InferenceModel:
    """Fuse a trained model into its deploy form. Plain blocks fold conv+BN;
    three-branch blocks are merged; the stem folds like a plain block."""
    stem = fuse_bn(model.stem_conv.weight.data, None, model.stem_bn)
    stem.stride, stem.padding = 2, 1
    convs = [stem]
    for block in model.blocks:
        if hasattr(block, "bn3"):
            convs.append(convert_repvgg_block(block))
        elif hasattr(block, "conv") and hasattr(block, "bn"):
            fused = fuse_bn(block.conv.weight.data, None, block.bn)
            fused.stride, fused.padding = block.info.stride, 1
            convs.append(fused)
        else:
            raise ConfigError(
                f"cannot convert block of type {type(block).__name__}"
            )
    return InferenceModel(convs, model.fc.weight.data.copy(),
                          model.fc.bias.data.copy(), spec=model.spec)


def training_divergence_after_conversion(info_block, steps, lr, seed, *,
                                         batch=4, hw=8) -> list:
    """Train the original three-branch block and its converted single conv
    with plain SGD on one stream; probe eval-mode outputs after each step.
    Inference equivalence holds at step 0 and is expected to break once
    training starts (the structures have different dynamics)."""
    block = info_block
    fused = convert_repvgg_block(block)
    w = Parameter(fused.kernel.copy(), name="w")
    b = Parameter(fused.bias.copy(), name="b")
    stream = Rng(seed)
    probe = stream.gaussian((batch, block.info.c_in, hw, hw))
    branched_params = dict(block.named_parameters())
    opt_a = MultiplierSgd(branched_params)
    opt_b = MultiplierSgd({"w": w, "b": b})
    divergences = []

    def probe_divergence():
        ya = block.forward(Tensor(probe), training=False)
        yb = ops.conv2d(Tensor(probe), Tensor(w.data), block.info.stride, 1,
                        bias=Tensor(b.data))
        return float(np.abs(ya.data - ops.relu(yb).data).max())

    divergences.append(probe_divergence())
    for _ in range(steps):
        x = Tensor(stream.gaussian((batch, block.info.c_in, hw, hw)))
        ya = block.forward(x, training=True)
        target = stream.gaussian(ya.data.shape)
        for p in branched_params.values():
            p.grad = None
        ops.mse_loss(ya, target).backward()
        opt_a.step(lr)
        yb = ops.relu(ops.conv2d(x, w, block.info.stride, 1, bias=b))
        w.grad = None
        b.grad = None
        ops.mse_loss(yb, target).backward()
        opt_b.step(lr)
        divergences.append(probe_divergence())
    return divergences


# ---------------------------------------------------------------------------
# identity variance ratio
# ---------------------------------------------------------------------------

def identity_variance_ratio(model_factory, data: np.ndarray, num_seeds: int,
                            base_seed: int = 0):
    """Ratio var(identity path) / var(sum) per shape-preserving block at
    initialization, with batch statistics active (train-mode forward, no
    updates). Returns (block_ids, per-seed ratio matrix, seed-averaged ratios).

    ``model_factory(seed)`` must build a fresh model; batch size and seed
    count are the caller's to choose and are echoed in reports.
    """
    ids = None
    rows = []
    for k in range(num_seeds):
        model = model_factory(base_seed + k)
        model.set_capture(True)
        model.forward(data, training=True)
        blocks = [b for b in model.blocks if getattr(b, "last_sum", None) is not None]
        if ids is None:
            ids = [b.info.block_id for b in blocks]
        ratios = [float(np.var(b.last_identity) / np.var(b.last_sum)) for b in blocks]
        rows.append(ratios)
    return ids, np.array(rows), np.array(rows).mean(axis=0)
