"""The gradient-multiplier optimizer.

Three pieces make a branched linear block and a single operator exact training
counterparts:

* a constant multiplier tensor built from the branch scales (squared scales,
  with +1 on diagonal centers when an identity branch exists),
* the equivalent-kernel initialization (scale-weighted branch kernels summed
  into one kernel, identity embedded at the diagonal centers),
* the update rule that multiplies the loss gradient elementwise by the
  multiplier before anything else.

Weight decay is added after the multiplier and before momentum. That ordering
is forced by the kernel-combination invariant: with per-branch L2 the branched
side's combined decay term is sum_b scale_b * (wd * W_b) = wd * W', which is
exactly what "multiply first, then add wd * W'" produces on the single-kernel
side; decaying before masking would instead yield wd * (M o W').
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    warmup_epochs: int = 5
    total_epochs: int = 120
    schedule: str = "cosine"
    label_smoothing: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine or constant, got {self.schedule!r}")
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise ConfigError("epochs must be non-negative (warmup) and positive (total)")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be > 0, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


# ---------------------------------------------------------------------------
# multiplier construction
# ---------------------------------------------------------------------------

def build_grad_mult(s, t, has_identity: bool, c_in: int | None = None) -> np.ndarray:
    """Multiplier tensor for a 3x3 kernel backing a (3x3, 1x1, identity) block.

    Entry (c, d, p, q) is s_c^2 away from the center, s_c^2 + t_c^2 at the
    center (p = q = 1 zero-based), plus 1 at diagonal centers when the block
    has an identity branch.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if s.ndim != 1 or s.shape != t.shape:
        raise ShapeError(f"scale vectors must be 1-d and equal length, got "
                         f"{s.shape} and {t.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ConfigError("scale vectors must be finite")
    c = s.shape[0]
    c_in = c if c_in is None else c_in
    if has_identity and c_in != c:
        raise ShapeError(f"identity branch needs square channels, got {c}x{c_in}")
    m = np.empty((c, c_in, 3, 3))
    m[:] = (s ** 2)[:, None, None, None]
    m[:, :, 1, 1] = (s ** 2 + t ** 2)[:, None]
    if has_identity:
        idx = np.arange(c)
        m[idx, idx, 1, 1] += 1.0
    return m


def build_grad_mult_scalar(alpha_a: float, alpha_b: float) -> float:
    """Two branches with scalar scales collapse to one scalar multiplier."""
    return float(alpha_a) ** 2 + float(alpha_b) ** 2


def build_grad_mult_1x1(t, has_identity: bool, c_in: int | None = None) -> np.ndarray:
    """Multiplier for a 1x1 kernel backing a (1x1-conv, identity) block:
    t_c^2 everywhere plus 1 on the diagonal when the identity branch exists."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1:
        raise ShapeError(f"scale vector must be 1-d, got shape {t.shape}")
    c = t.shape[0]
    c_in = c if c_in is None else c_in
    if has_identity and c_in != c:
        raise ShapeError(f"identity branch needs square channels, got {c}x{c_in}")
    m = np.empty((c, c_in, 1, 1))
    m[:] = (t ** 2)[:, None, None, None]
    if has_identity:
        idx = np.arange(c)
        m[idx, idx, 0, 0] += 1.0
    return m


# ---------------------------------------------------------------------------
# equivalent kernels
# ---------------------------------------------------------------------------

def equivalent_init(w_s: np.ndarray, w_t: np.ndarray, s, t,
                    gamma=None) -> np.ndarray:
    """Fold branch kernels into the single equivalent 3x3 kernel.

    w' = s_c * w_s everywhere; the 1x1 kernel times t_c joins at the centers;
    gamma (the identity branch's channel scales, all ones at init) joins at
    the diagonal centers. Also used mid-training to combine the branched
    counterpart's current kernels when checking the step invariant.
    """
    w_s = np.asarray(w_s, dtype=np.float64)
    w_t = np.asarray(w_t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    c_out, c_in = w_s.shape[0], w_s.shape[1]
    if w_s.shape[2:] != (3, 3) or w_t.shape != (c_out, c_in, 1, 1):
        raise ShapeError(f"want kernels ({c_out},{c_in},3,3) and ({c_out},{c_in},1,1), "
                         f"got {w_s.shape} and {w_t.shape}")
    if s.shape != (c_out,) or t.shape != (c_out,):
        raise ShapeError(f"scale vectors must have shape ({c_out},), got "
                         f"{s.shape} and {t.shape}")
    w = s[:, None, None, None] * w_s
    w[:, :, 1, 1] += t[:, None] * w_t[:, :, 0, 0]
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=np.float64)
        if c_in != c_out or gamma.shape != (c_out,):
            raise ShapeError(f"identity term needs square kernel and gamma of shape "
                             f"({c_out},), got c_in={c_in}, gamma {gamma.shape}")
        idx = np.arange(c_out)
        w[idx, idx, 1, 1] += gamma
    return w


def equivalent_init_1x1(w_t: np.ndarray, t, gamma=None) -> np.ndarray:
    """Two-branch 1x1 counterpart: w' = t_c * w_t (+ gamma on the diagonal)."""
    w_t = np.asarray(w_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    c_out, c_in = w_t.shape[0], w_t.shape[1]
    if w_t.shape[2:] != (1, 1) or t.shape != (c_out,):
        raise ShapeError(f"want kernel ({c_out},{c_in},1,1) and scales ({c_out},), "
                         f"got {w_t.shape} and {t.shape}")
    w = t[:, None, None, None] * w_t
    if gamma is not None:
        idx = np.arange(c_out)
        w[idx, idx, 0, 0] += np.asarray(gamma, dtype=np.float64)
    return w


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def gr_step(params: dict, grads: dict, grad_mults: dict, velocities: dict, *,
            lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
            managed=()) -> None:
    """One SGD step with per-parameter gradient multipliers, in place.

    Order per parameter: g = mult * grad, then g += weight_decay * theta, then
    v = momentum * v + g, then theta -= lr * v. Parameters without an entry in
    ``grad_mults`` use multiplier 1; every name in ``managed`` must have one.
    """
    for name in managed:
        if name not in grad_mults:
            raise UsageError(f"managed parameter {name!r} has no gradient multiplier")
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        mult = grad_mults.get(name)
        g = g * mult if mult is not None else np.array(g, copy=True)
        if weight_decay:
            g += weight_decay * theta
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(theta)
            velocities[name] = v
        if momentum:
            v *= momentum
            v += g
        else:
            v[...] = g
        theta -= lr * v


class MultiplierSgd:
    """SGD with momentum, L2 decay and optional per-parameter multipliers.

    With an empty multiplier table this is plain SGD; with the constructed
    multiplier tensors it is the re-parameterizing optimizer.
    """

    def __init__(self, named_params, momentum=0.0, weight_decay=0.0,
                 multipliers=None, managed=()):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.multipliers = dict(multipliers or {})
        self.managed = tuple(managed)
        for name in self.managed:
            if name not in self.params:
                raise UsageError(f"managed name {name!r} is not a model parameter")
            if name not in self.multipliers:
                raise UsageError(f"managed parameter {name!r} has no gradient multiplier")
        for name, mult in self.multipliers.items():
            if name not in self.params:
                raise UsageError(f"multiplier given for unknown parameter {name!r}")
            m = np.asarray(mult)
            if m.ndim and m.shape != self.params[name].data.shape:
                raise ShapeError(
                    f"multiplier for {name!r} has shape {m.shape}, parameter has "
                    f"{self.params[name].data.shape}"
                )
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        datas = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        gr_step(datas, grads, self.multipliers, self.velocities, lr=lr,
                momentum=self.momentum, weight_decay=self.weight_decay,
                managed=self.managed)

    def state_arrays(self) -> dict:
        return {f"velocity.{n}": v for n, v in sorted(self.velocities.items())}

    def load_state_arrays(self, arrays: dict) -> None:
        self.velocities = {}
        for key, arr in arrays.items():
            if not key.startswith("velocity."):
                raise UsageError(f"unexpected optimizer state entry {key!r}")
            self.velocities[key[len("velocity."):]] = np.array(arr, dtype=np.float64)


class MultiplierAdamW:
    """AdamW behind the same multiplier hook.

    The multiplier is applied to the raw gradient before the moment updates;
    decay is decoupled. No counterpart-equivalence is claimed for this rule;
    it is exercised for shape and determinism only.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, multipliers=None, managed=()):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.multipliers = dict(multipliers or {})
        self.managed = tuple(managed)
        for name in self.managed:
            if name not in self.multipliers:
                raise UsageError(f"managed parameter {name!r} has no gradient multiplier")
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            mult = self.multipliers.get(name)
            if mult is not None:
                g = g * mult
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self) -> dict:
        out = {f"adam_m.{n}": v for n, v in sorted(self.m.items())}
        out.update({f"adam_v.{n}": v for n, v in sorted(self.v.items())})
        out["adam_t"] = np.array([float(self.t)])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            if key == "adam_t":
                self.t = int(arr[0])
            elif key.startswith("adam_m."):
                self.m[key[7:]] = np.array(arr)
            elif key.startswith("adam_v."):
                self.v[key[7:]] = np.array(arr)
            else:
                raise UsageError(f"unexpected optimizer state entry {key!r}")


def lr_schedule(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at the end."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be > 0, got {total_steps}")
    step = min(step, total_steps)
    if cfg.schedule == "constant":
        return cfg.base_lr
    warmup_steps = int(round(total_steps * cfg.warmup_epochs / cfg.total_epochs))
    if step < warmup_steps:
        return cfg.base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return cfg.base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * cfg.base_lr * (1.0 + np.cos(np.pi * progress))
