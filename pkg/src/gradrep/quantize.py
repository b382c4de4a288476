"""INT8 post-training quantization simulation and kernel-position statistics.

The recipe is fixed and documented: symmetric per-tensor quantization with
scale = max|x| / 127 (a 1e-12 floor guards all-zero tensors), values rounded
to the nearest integer and clamped to [-127, 127]. Weights are quantized once;
activations are fake-quantized at every layer input with scales calibrated as
the max absolute activation over a calibration set. Biases stay in float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equivlab import InferenceModel
from .errors import ConfigError, ShapeError

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    bits: int = 8

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")


def quantize_int8(arr: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """Symmetric per-tensor quantization to int8 in [-127, 127]."""
    arr = np.asarray(arr, dtype=np.float64)
    amax = float(np.abs(arr).max()) if arr.size else 0.0
    scale = max(amax / 127.0, SCALE_FLOOR)
    q = np.clip(np.rint(arr / scale), -127, 127).astype(np.int8)
    return q, QuantParams(scale)


def dequantize(q: np.ndarray, params: QuantParams) -> np.ndarray:
    return q.astype(np.float64) * params.scale


def fake_quantize(arr: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.rint(arr / scale), -127, 127) * scale


@dataclass(frozen=True)
class KernelStats:
    std_overall: float
    std_central: float
    std_surrounding: float


def kernel_position_stats(kernel: np.ndarray) -> KernelStats:
    """Population stds of a 3x3 kernel overall, at the central positions, and
    at the eight non-central positions."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"want a (c_out, c_in, 3, 3) kernel, got {kernel.shape}")
    central = kernel[:, :, 1, 1]
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 1] = False
    surrounding = kernel[:, :, mask]
    return KernelStats(float(kernel.std()), float(central.std()),
                       float(surrounding.std()))


class QuantizedModel:
    """Deploy model with int8 weights and per-layer activation fake-quant."""

    def __init__(self, model: InferenceModel, act_scales: list, input_scale: float,
                 weight_params: list, fc_weight_params: QuantParams):
        self.base = model
        self.input_scale = input_scale
        self.act_scales = act_scales  # one per conv output (= next layer's input)
        self.conv_weights = []  # (dequantized kernel, bias, stride, padding)
        self.weight_params = weight_params
        for conv, params in zip(model.convs, weight_params):
            q, _ = quantize_int8(conv.kernel)
            self.conv_weights.append(
                (dequantize(q, params), conv.bias, conv.stride, conv.padding)
            )
        q_fc, _ = quantize_int8(model.fc_weight)
        self.fc_weight = dequantize(q_fc, fc_weight_params)
        self.fc_weight_params = fc_weight_params

    def forward(self, x: np.ndarray) -> np.ndarray:
        from .equivlab import FusedConv

        h = fake_quantize(np.asarray(x, dtype=np.float64), self.input_scale)
        for (kernel, bias, stride, padding), scale in zip(self.conv_weights,
                                                          self.act_scales):
            h = FusedConv(kernel, bias, stride, padding).forward(h)
            h = np.maximum(h, 0.0)
            h = fake_quantize(h, scale)
        pooled = h.mean(axis=(2, 3))
        return pooled @ self.fc_weight.T + self.base.fc_bias


def ptq_model(model: InferenceModel, calibration: np.ndarray,
              batch_size: int = 64) -> QuantizedModel:
    """Quantize a deploy-form model: weights per tensor, activations with
    max-abs calibration over the calibration set."""
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.ndim != 4 or calibration.shape[0] == 0:
        raise ConfigError(
            f"calibration set must be a non-empty (n, c, h, w) array, got shape "
            f"{calibration.shape}"
        )
    input_amax = 0.0
    act_amax = np.zeros(len(model.convs))
    for start in range(0, len(calibration), batch_size):
        batch = calibration[start:start + batch_size]
        input_amax = max(input_amax, float(np.abs(batch).max()))
        for i, act in enumerate(model.features(batch)):
            act_amax[i] = max(act_amax[i], float(np.abs(act).max()))
    input_scale = max(input_amax / 127.0, SCALE_FLOOR)
    act_scales = [max(a / 127.0, SCALE_FLOOR) for a in act_amax]
    weight_params = [quantize_int8(conv.kernel)[1] for conv in model.convs]
    fc_params = quantize_int8(model.fc_weight)[1]
    return QuantizedModel(model, act_scales, input_scale, weight_params, fc_params)


def quantize_weights_only(model: InferenceModel) -> InferenceModel:
    """Round-trip every weight tensor through int8; activations stay float."""
    from .equivlab import FusedConv

    convs = []
    for conv in model.convs:
        q, params = quantize_int8(conv.kernel)
        convs.append(FusedConv(dequantize(q, params), conv.bias.copy(),
                               conv.stride, conv.padding))
    q_fc, fc_params = quantize_int8(model.fc_weight)
    return InferenceModel(convs, dequantize(q_fc, fc_params),
                          model.fc_bias.copy(), spec=model.spec)


def model_accuracy(model, handle, batch_size: int = 256) -> float:
    """Accuracy of a deploy-form (or quantized) model over a dataset handle."""
    correct = 0
    for start in range(0, len(handle), batch_size):
        idx = np.arange(start, min(start + batch_size, len(handle)))
        logits = model.forward(handle.normalized(idx))
        correct += int((np.argmax(logits, axis=1) == handle.labels[idx]).sum())
    return correct / len(handle)


def position_stats_report(model: InferenceModel) -> list:
    """Rows (layer, std_overall, std_central, std_surrounding) per 3x3 conv."""
    rows = []
    for i, conv in enumerate(model.convs):
        if conv.kernel.shape[2:] == (3, 3):
            st = kernel_position_stats(conv.kernel)
            rows.append((f"conv{i}", st.std_overall, st.std_central,
                         st.std_surrounding))
    return rows
