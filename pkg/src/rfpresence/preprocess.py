"""Turn validated CSI windows into the real-valued images the classifier eats.

Magnitude route: |X| flattened per subcarrier to (I, n_f, n_r*n_t), divided
element-wise by its first frame, 2-D DFT over (frame, subcarrier) per
transceiver layer with the zero-frequency bin shifted to the center, cropped
to T center rows (magnitude taken), then log10(x + 1).

Phase route: per-frame phase of each receive antenna relative to antenna 0
(cancels CFO/STO, which are common across receive chains), flattened to
(I, n_f, (n_r-1)*n_t), unwrapped along time, 1-D DFT along time only,
same center crop and log scaling.

All operations accept an optional leading batch dimension; the documented
shapes apply to the trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import scipy.fft as _fft

CROP_ROWS_DEFAULT = 50


class PreprocessError(Exception):
    pass


class DivisionByZeroFrame(PreprocessError):
    """Frame 0 contains a zero magnitude; window should have been filtered."""


class ZeroReferenceEntry(PreprocessError):
    """Reference antenna has a zero coefficient; phase ratio undefined."""


class CropLargerThanInput(PreprocessError):
    pass


class NegativeInput(PreprocessError):
    pass


class PipelineVariant(str, Enum):
    """Input/preprocessing flavors; see make_input for what each produces."""

    WITH_DFT = "with-dft"
    NO_DFT = "no-dft"
    MAG_ONLY = "mag-only"
    PHASE_ONLY = "phase-only"
    STACKED_COMPLEX = "complex"
    SINGLE_CNN = "single-cnn"


@dataclass(frozen=True)
class InputImagePair:
    """Classifier input tensors; single-tensor variants fill only a_abs."""

    variant: PipelineVariant
    a_abs: Optional[np.ndarray] = None
    a_phase: Optional[np.ndarray] = None

    def tensors(self) -> tuple[np.ndarray, ...]:
        return tuple(t for t in (self.a_abs, self.a_phase) if t is not None)


def flatten_pairs(x: np.ndarray) -> np.ndarray:
    """Merge the trailing (rx, tx) axes into one transceiver-pair axis."""
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def normalize_magnitude(x_abs: np.ndarray) -> np.ndarray:
    """Element-wise division of every frame by frame 0 (time axis is -3)."""
    ref = x_abs[..., 0:1, :, :]
    if np.any(ref == 0):
        raise DivisionByZeroFrame("frame 0 contains zero magnitudes")
    return x_abs / ref


def dft2_shift(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the (frame, subcarrier) axes, center-shifted.

    For trailing shape (I, n_f, ...) the zero-frequency bin lands at index
    (I//2, n_f//2) of those two axes.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        return np.fft.fftshift(_fft.fft2(x))
    # transform with the spectral axes contiguous and last; strided FFTs
    # across a trailing layer axis are an order of magnitude slower
    moved = np.ascontiguousarray(np.moveaxis(x, -1, -3))
    out = np.fft.fftshift(_fft.fft2(moved, axes=(-2, -1)), axes=(-2, -1))
    return np.moveaxis(out, -3, -1)


def dft1_time(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along the time axis only, zero frequency at I//2."""
    x = np.asarray(x)
    if x.ndim < 3:
        return np.fft.fftshift(_fft.fft(x, axis=0), axes=0)
    moved = np.ascontiguousarray(np.moveaxis(x, -3, -1))
    out = np.fft.fftshift(_fft.fft(moved, axis=-1), axes=-1)
    return np.moveaxis(out, -1, -3)


def crop_time(shifted: np.ndarray, t: int) -> np.ndarray:
    """Keep the T center rows of the shifted spectrum and take magnitudes.

    Rows (I-T)/2 .. (I-T)/2 + T - 1 along the time axis (-3 for images);
    I and T must both be even.
    """
    x = np.asarray(shifted)
    axis = -3 if x.ndim >= 3 else 0
    n = x.shape[axis]
    if t > n:
        raise CropLargerThanInput(f"crop {t} exceeds input length {n}")
    if t % 2 or n % 2:
        raise ValueError(f"crop window and input length must be even, got {t} and {n}")
    lo = (n - t) // 2
    idx = [slice(None)] * x.ndim
    idx[axis if axis >= 0 else x.ndim + axis] = slice(lo, lo + t)
    return np.abs(x[tuple(idx)])


def phase_difference(x: np.ndarray) -> np.ndarray:
    """Phase of each receive antenna relative to antenna 0.

    Input trailing shape (I, n_f, n_r, n_t) complex; output
    (I, n_f, n_r - 1, n_t) real with values in (-pi, pi]. Any multiplier
    common to all receive antennas of a frame cancels exactly.
    """
    ref = x[..., 0:1, :]
    if np.any(ref == 0):
        raise ZeroReferenceEntry("reference antenna has zero coefficients")
    # angle(a / b) computed as angle(a * conj(b)): same angle, no division
    return np.angle(x[..., 1:, :] * np.conj(ref))


def unwrap_time(seq: np.ndarray, axis: int = 0) -> np.ndarray:
    """Unwrap phase along an axis so consecutive differences lie in (-pi, pi].

    The first element is kept; each raw difference is shifted by the integer
    multiple of 2*pi that lands it in (-pi, pi].
    """
    seq = np.asarray(seq)
    if not np.issubdtype(seq.dtype, np.floating):
        seq = seq.astype(np.float64)
    if seq.shape[axis] <= 1:
        return seq.copy()
    d = np.diff(seq, axis=axis)
    wrapped = d - 2 * np.pi * np.ceil((d - np.pi) / (2 * np.pi))
    out = np.cumsum(wrapped, axis=axis)
    first = np.take(seq, [0], axis=axis)
    return np.concatenate([first, first + out], axis=axis)


def log_scale(a: np.ndarray) -> np.ndarray:
    """Element-wise log10(x + 1) to tame the DFT's dynamic range."""
    a = np.asarray(a)
    if np.any(a < 0):
        raise NegativeInput("log scaling expects non-negative values")
    return np.log10(a + 1.0)


def _unwrap_image(x: np.ndarray) -> np.ndarray:
    return unwrap_time(x, axis=x.ndim - 3)


def _center_crop_indices(n: int, t: int) -> np.ndarray:
    """Raw-spectrum indices of the T center rows of the shifted spectrum."""
    if t > n:
        raise CropLargerThanInput(f"crop {t} exceeds input length {n}")
    if t % 2 or n % 2:
        raise ValueError(f"crop window and input length must be even, got {t} and {n}")
    lo = (n - t) // 2
    return (np.arange(lo, lo + t) - n // 2) % n


def magnitude_image(x: np.ndarray, t: int, dft: bool = True) -> np.ndarray:
    """|X| -> flattened, frame-0 normalized, optionally DFT + crop + log.

    Equals log_scale(crop_time(dft2_shift(...), t)) exactly; the crop is
    fused into an index gather on the raw spectrum so the shift never
    touches the rows that get thrown away.
    """
    norm = normalize_magnitude(flatten_pairs(np.abs(x)))
    if not dft:
        return norm
    if norm.ndim == 2:
        return log_scale(crop_time(dft2_shift(norm), t))
    moved = np.ascontiguousarray(np.moveaxis(norm, -1, -3))  # (..., J, I, K)
    raw = _fft.fft2(moved, axes=(-2, -1))
    rows = _center_crop_indices(raw.shape[-2], t)
    cols = (np.arange(raw.shape[-1]) - raw.shape[-1] // 2) % raw.shape[-1]
    cropped = raw[..., rows, :][..., :, cols]
    return np.moveaxis(log_scale(np.abs(cropped)), -3, -1)


def phase_image(x: np.ndarray, t: int, dft: bool = True) -> np.ndarray:
    """Antenna phase differences -> flattened, unwrapped, optionally DFT'd.

    Equals log_scale(crop_time(dft1_time(unwrap(...)), t)) exactly, with the
    same fused shift + crop as the magnitude route.
    """
    pd = flatten_pairs(phase_difference(x))
    if pd.ndim == 3 or not dft:
        un = _unwrap_image(pd)
        if not dft:
            return un
        return log_scale(crop_time(dft1_time(un), t))
    moved = np.ascontiguousarray(np.moveaxis(pd, -3, -1))  # (..., K, J, I)
    un = unwrap_time(moved, axis=moved.ndim - 1)
    raw = _fft.fft(un, axis=-1)
    rows = _center_crop_indices(raw.shape[-1], t)
    cropped = raw[..., rows]
    return np.moveaxis(log_scale(np.abs(cropped)), -1, -3)


def stacked_complex_image(x: np.ndarray) -> np.ndarray:
    """Frame-0 normalized complex window as stacked real/imag layers."""
    flat = flatten_pairs(np.asarray(x))
    ref = flat[..., 0:1, :, :]
    if np.any(ref == 0):
        raise DivisionByZeroFrame("frame 0 contains zero coefficients")
    norm = flat / ref
    return np.concatenate([norm.real, norm.imag], axis=-1)


def make_input_arrays(
    x: np.ndarray, t: int = CROP_ROWS_DEFAULT, variant: PipelineVariant = PipelineVariant.WITH_DFT
) -> tuple[np.ndarray, ...]:
    """Classifier input tensors for a window stack (leading batch dim allowed).

    with-dft    -> (T, n_f, n_r*n_t) and (T, n_f, (n_r-1)*n_t)
    no-dft      -> full-length normalized magnitude and unwrapped phase images
    mag-only    -> the with-dft magnitude tensor alone
    phase-only  -> the with-dft phase tensor alone
    complex     -> one (I, n_f, 2*n_r*n_t) tensor of normalized re/im parts
    single-cnn  -> the no-dft pair concatenated along the layer axis
    """
    if variant == PipelineVariant.WITH_DFT:
        return magnitude_image(x, t), phase_image(x, t)
    if variant == PipelineVariant.NO_DFT:
        return magnitude_image(x, t, dft=False), phase_image(x, t, dft=False)
    if variant == PipelineVariant.MAG_ONLY:
        return (magnitude_image(x, t),)
    if variant == PipelineVariant.PHASE_ONLY:
        return (phase_image(x, t),)
    if variant == PipelineVariant.STACKED_COMPLEX:
        return (stacked_complex_image(x),)
    if variant == PipelineVariant.SINGLE_CNN:
        mag = magnitude_image(x, t, dft=False)
        ph = phase_image(x, t, dft=False)
        return (np.concatenate([mag, ph], axis=-1),)
    raise ValueError(f"unknown variant {variant!r}")


def make_input(window, t: int = CROP_ROWS_DEFAULT, variant: PipelineVariant = PipelineVariant.WITH_DFT) -> InputImagePair:
    """Preprocess one validated CsiWindow (or bare window stack) into images."""
    x = window.x if hasattr(window, "x") else np.asarray(window)
    tensors = make_input_arrays(x, t, variant)
    if len(tensors) == 2:
        return InputImagePair(variant=variant, a_abs=tensors[0], a_phase=tensors[1])
    if variant == PipelineVariant.PHASE_ONLY:
        return InputImagePair(variant=variant, a_phase=tensors[0])
    return InputImagePair(variant=variant, a_abs=tensors[0])
