"""Per-unit quantization operators: binary, ternary, and clamped-grid kernels.

Every fit is local to one unit: pick a scale from a coarse candidate scan,
then polish it with a short golden-section search on the reconstruction
error. The best iterate is always kept, so refinement never increases error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

_GOLD = (np.sqrt(5.0) - 1.0) / 2.0
_SCAN_SPAN = 6.0  # candidate scales cover [cap/6, cap]
_SCAN_POINTS = 12


class QuantizerKind(enum.Enum):
    Binary1 = 1.0
    Ternary158 = 1.58
    Two2 = 2.0
    Lsq3 = 3.0
    Lsq4 = 4.0
    Lsq8 = 8.0

    @property
    def nominal_bits(self) -> float:
        return self.value


# (low, high) integer code bounds per kind; binary is handled separately.
_LEVELS: dict[QuantizerKind, tuple[int, int]] = {
    QuantizerKind.Ternary158: (-1, 1),
    QuantizerKind.Two2: (-2, 1),  # signed two's-complement int2 range
    QuantizerKind.Lsq3: (-3, 3),
    QuantizerKind.Lsq4: (-7, 7),
    QuantizerKind.Lsq8: (-127, 127),
}

KIND_BY_BITS: dict[float, QuantizerKind] = {k.nominal_bits: k for k in QuantizerKind}

# Fallback escalates one rung up this ladder when the fit error is excessive.
LADDER: list[QuantizerKind] = [
    QuantizerKind.Binary1,
    QuantizerKind.Ternary158,
    QuantizerKind.Two2,
    QuantizerKind.Lsq3,
    QuantizerKind.Lsq4,
    QuantizerKind.Lsq8,
]

DEFAULT_FALLBACK_THRESHOLD = 0.95


@dataclass
class QuantResult:
    kind: QuantizerKind
    realized_kind: QuantizerKind
    scale: float
    codes: np.ndarray  # int8/int16 matrix, same shape as the input
    reconstructed: np.ndarray
    rel_error: float
    fitted_steps: int


def _rel_error(w: np.ndarray, recon: np.ndarray) -> float:
    denom = float(np.linalg.norm(w))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(recon - w) / denom)


def _grid_err(w: np.ndarray, s: float, lo: int, hi: int) -> float:
    c = np.clip(np.round(w / s), lo, hi)
    d = w - s * c
    return float(np.dot(d, d))


def _fit_scale(
    w: np.ndarray, lo: int, hi: int, extra: tuple[float, ...], steps: int
) -> tuple[float, int]:
    """Coarse log-spaced scan capped at the no-clipping scale, then a
    golden-section polish of the reconstruction error on log-scale."""
    aw = np.abs(w)
    hi_mag = float(max(abs(lo), abs(hi)))
    cap = float(aw.max()) / hi_mag
    if cap == 0.0:
        return 1.0, 0
    cands = [min(2.0 * float(aw.mean()) / np.sqrt(hi_mag), cap)]
    cands += [cap * (1.0 / _SCAN_SPAN) ** (k / (_SCAN_POINTS - 1.0)) for k in range(_SCAN_POINTS)]
    cands += [s for s in extra if s > 0.0]
    errs = [_grid_err(w, s, lo, hi) for s in cands]
    i = int(np.argmin(errs))
    best_s, best_e = cands[i], errs[i]
    if steps <= 0:
        return best_s, 0
    half = np.log(_SCAN_SPAN) / (_SCAN_POINTS - 1.0)
    a, b = np.log(best_s) - half, np.log(best_s) + half
    x1 = b - _GOLD * (b - a)
    x2 = a + _GOLD * (b - a)
    f1 = _grid_err(w, float(np.exp(x1)), lo, hi)
    f2 = _grid_err(w, float(np.exp(x2)), lo, hi)
    for x, f in ((x1, f1), (x2, f2)):
        if f < best_e:
            best_e, best_s = f, float(np.exp(x))
    for _ in range(max(steps - 2, 0)):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLD * (b - a)
            f1 = _grid_err(w, float(np.exp(x1)), lo, hi)
            if f1 < best_e:
                best_e, best_s = f1, float(np.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLD * (b - a)
            f2 = _grid_err(w, float(np.exp(x2)), lo, hi)
            if f2 < best_e:
                best_e, best_s = f2, float(np.exp(x2))
    return best_s, steps


def fit_binary(weights: np.ndarray, steps: int = 10) -> QuantResult:
    """Sign codes with a shared scale; alpha = mean|w| is the exact L2 optimum."""
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    codes = np.where(flat >= 0.0, 1, -1).astype(np.int8)
    alpha = float(np.abs(flat).mean())
    recon = (alpha * codes.astype(np.float64)).reshape(w.shape)
    return QuantResult(
        kind=QuantizerKind.Binary1,
        realized_kind=QuantizerKind.Binary1,
        scale=alpha,
        codes=codes.reshape(w.shape),
        reconstructed=recon,
        rel_error=_rel_error(w, recon),
        fitted_steps=0,
    )


def fit_ternary(weights: np.ndarray, steps: int = 10) -> QuantResult:
    """Codes in {-1, 0, +1}. Starts from the magnitude-threshold solution
    (t = 0.75*mean|w|, scale = mean|w| above t) and refines the scale with
    codes re-derived each step; keeps whichever parameterization wins."""
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    aw = np.abs(flat)
    t0 = 0.75 * float(aw.mean())
    sel = aw > t0
    s_init = float(aw[sel].mean()) if sel.any() else 1.0
    codes_init = (np.sign(flat) * sel).astype(np.int8)
    err_init = float(np.dot(flat - s_init * codes_init, flat - s_init * codes_init))

    s_fit, used = _fit_scale(flat, -1, 1, extra=(), steps=steps)
    err_fit = _grid_err(flat, s_fit, -1, 1)
    if err_fit < err_init:
        scale = s_fit
        codes = np.clip(np.round(flat / s_fit), -1, 1).astype(np.int8)
    else:
        scale, codes = s_init, codes_init
    recon = (scale * codes.astype(np.float64)).reshape(w.shape)
    return QuantResult(
        kind=QuantizerKind.Ternary158,
        realized_kind=QuantizerKind.Ternary158,
        scale=scale,
        codes=codes.reshape(w.shape),
        reconstructed=recon,
        rel_error=_rel_error(w, recon),
        fitted_steps=used,
    )


def fit_lsq(weights: np.ndarray, bits: int, steps: int = 10) -> QuantResult:
    """Clamped round-to-grid codes with a fitted step size.

    bits=2 uses the signed int2 level set {-2,-1,0,1}; 3/4/8 are symmetric
    with Q = 2^(bits-1) - 1.
    """
    if bits not in (2, 3, 4, 8):
        raise ValueError(f"unsupported lsq bit-width {bits}")
    kind = KIND_BY_BITS[float(bits)]
    lo, hi = _LEVELS[kind]
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    if not flat.any():
        codes = np.zeros(w.shape, dtype=np.int16)
        return QuantResult(kind, kind, 1.0, codes, np.zeros_like(w), 0.0, 0)
    scale, used = _fit_scale(flat, lo, hi, extra=(), steps=steps)
    codes = np.clip(np.round(flat / scale), lo, hi).astype(np.int16)
    recon = (scale * codes.astype(np.float64)).reshape(w.shape)
    return QuantResult(
        kind=kind,
        realized_kind=kind,
        scale=scale,
        codes=codes.reshape(w.shape),
        reconstructed=recon,
        rel_error=_rel_error(w, recon),
        fitted_steps=used,
    )


def fit_kind(weights: np.ndarray, kind: QuantizerKind, steps: int = 10) -> QuantResult:
    if kind is QuantizerKind.Binary1:
        return fit_binary(weights, steps)
    if kind is QuantizerKind.Ternary158:
        return fit_ternary(weights, steps)
    return fit_lsq(weights, int(kind.nominal_bits), steps)


def fit_unit(
    weights: np.ndarray,
    action_bits: float,
    protected_index: np.ndarray | None = None,
    protected_values: np.ndarray | None = None,
    fallback_threshold: float = DEFAULT_FALLBACK_THRESHOLD,
    steps: int = 10,
) -> QuantResult:
    """Quantize one unit at the selected bit-width with salient-weight protection.

    Protected flat indices keep their INT8 dequantized values; the remainder
    goes through the action's operator. If the operator's relative error on
    the non-protected weights exceeds `fallback_threshold`, the fit escalates
    one rung up the precision ladder and is redone once.
    """
    if action_bits not in KIND_BY_BITS:
        raise ValueError(f"unknown action bit-width {action_bits}")
    kind = KIND_BY_BITS[action_bits]
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    if protected_index is None:
        protected_index = np.empty(0, dtype=np.int64)
    mask = np.zeros(flat.size, dtype=bool)
    mask[protected_index] = True
    free = flat[~mask]
    if free.size == 0:
        recon = flat.copy()
        recon[mask] = protected_values
        return QuantResult(
            kind, kind, 1.0, np.zeros(w.shape, dtype=np.int16),
            recon.reshape(w.shape), 0.0, 0,
        )

    result = fit_kind(free, kind, steps)
    realized = kind
    if result.rel_error > fallback_threshold:
        pos = LADDER.index(kind)
        if pos + 1 < len(LADDER):
            realized = LADDER[pos + 1]
            result = fit_kind(free, realized, steps)

    recon = np.empty_like(flat)
    recon[~mask] = result.reconstructed.ravel()
    if protected_index.size:
        recon[mask] = protected_values
    codes = np.zeros(flat.size, dtype=np.int16)
    codes[~mask] = result.codes.ravel()
    return QuantResult(
        kind=kind,
        realized_kind=realized,
        scale=result.scale,
        codes=codes.reshape(w.shape),
        reconstructed=recon.reshape(w.shape),
        rel_error=result.rel_error,
        fitted_steps=result.fitted_steps,
    )
