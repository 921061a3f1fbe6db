"""Activation-scale calibration, per-weight saliency, and INT8 protection."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .budget import protected_count
from .store import WeightUnit


class CalibrationError(Exception):
    pass


@dataclass
class ActivationScales:
    """Per-input-channel mean absolute activation, keyed by tensor name."""

    scales: dict[str, np.ndarray]

    def for_tensor(self, name: str, cols: int) -> np.ndarray:
        if name not in self.scales:
            raise CalibrationError(f"no activation scales for tensor {name!r}")
        s = self.scales[name]
        if s.shape[0] != cols:
            raise CalibrationError(
                f"scales for {name!r} have length {s.shape[0]}, tensor has {cols} columns"
            )
        return s

    def for_unit(self, unit: WeightUnit) -> np.ndarray:
        if unit.tensor_name not in self.scales:
            raise CalibrationError(f"no activation scales for tensor {unit.tensor_name!r}")
        s = self.scales[unit.tensor_name]
        if s.shape[0] < unit.col_end:
            raise CalibrationError(
                f"scales for {unit.tensor_name!r} cover {s.shape[0]} columns, "
                f"unit needs {unit.col_end}"
            )
        return s[unit.col_start:unit.col_end]

    def save(self, path: str) -> None:
        payload = {name: [float(x) for x in vec] for name, vec in self.scales.items()}
        with open(path, "w") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ActivationScales":
        with open(path) as fh:
            payload = json.load(fh)
        return cls({name: np.asarray(vec, dtype=np.float64) for name, vec in payload.items()})


def collect_activation_scales(model, calib_tokens: np.ndarray) -> ActivationScales:
    """Mean |input activation| per input channel of every projection layer.

    `model` must expose calibration_pass(tokens) -> {name: (abs_sum, count)}.
    """
    if calib_tokens.size == 0:
        raise CalibrationError("empty calibration batch")
    sums = model.calibration_pass(calib_tokens)
    scales = {}
    for name, (abs_sum, count) in sums.items():
        scales[name] = np.asarray(abs_sum, dtype=np.float64) / max(count, 1)
    return ActivationScales(scales)


def saliency(unit: WeightUnit, scales: ActivationScales) -> np.ndarray:
    """|W(i,j)| * s(col_start + j), elementwise over the unit's slice."""
    s = scales.for_unit(unit)
    return np.abs(unit.weights.astype(np.float64)) * s[np.newaxis, :]


@dataclass
class ProtectionSet:
    """Flat indices of INT8-protected weights within one unit."""

    indices: np.ndarray  # sorted int64
    int8_scale: float

    @property
    def n_p(self) -> int:
        return int(self.indices.size)


def select_protected(unit: WeightUnit, sal: np.ndarray, rate: float) -> ProtectionSet:
    """Keep the round(rate*n) highest-saliency weights; ties go to the lower
    flat index. The INT8 scale is max|w| over the protected set / 127."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"protection rate {rate} outside [0, 1]")
    n = unit.n
    n_p = protected_count(n, rate)
    if n_p == 0:
        return ProtectionSet(np.empty(0, dtype=np.int64), 1.0)
    flat_sal = sal.ravel()
    order = np.argsort(-flat_sal, kind="stable")
    idx = np.sort(order[:n_p]).astype(np.int64)
    w = unit.weights.ravel()[idx].astype(np.float64)
    peak = float(np.abs(w).max())
    scale = peak / 127.0 if peak > 0.0 else 1.0
    return ProtectionSet(idx, scale)


def quantize_protected(unit: WeightUnit, prot: ProtectionSet) -> tuple[np.ndarray, np.ndarray]:
    """INT8 codes and dequantized values for the protected weights."""
    w = unit.weights.ravel()[prot.indices].astype(np.float64)
    codes = np.clip(np.round(w / prot.int8_scale), -127, 127).astype(np.int8)
    dequant = codes.astype(np.float64) * prot.int8_scale
    return codes, dequant
