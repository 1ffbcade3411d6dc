"""Core CSI data types, window validation, and subcarrier down-selection.

A CSI frame is the complex channel array of one received WiFi frame, shaped
(n_sc, n_r, n_t) = (subcarriers, receive antennas, transmit antennas).
Detection operates on windows of I consecutive frames; a window is usable
only if every selected channel coefficient has non-zero magnitude and the
window duration stays close to its nominal span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Defaults matching a 3x3 MIMO, 20 MHz / 56-subcarrier link sampled at 10 ms.
N_F_DEFAULT = 14
WINDOW_FRAMES_DEFAULT = 128
NOMINAL_SPAN_S_DEFAULT = 1.27
SPAN_TOL_S_DEFAULT = 0.064


class CsiError(Exception):
    """Base class for CSI domain errors."""


class WindowRejected(CsiError):
    """A candidate window failed validation; subclass says which condition."""


class WrongFrameCount(WindowRejected):
    pass


class ZeroMagnitudeEntry(WindowRejected):
    """An erroneous CSI estimate: some selected coefficient has |h| == 0."""


class SpanOutOfTolerance(WindowRejected):
    """First-to-last timestamp span falls outside nominal +/- tolerance."""


class NonDivisibleSelection(CsiError):
    """Requested subcarrier count does not evenly divide the stream's count."""


@dataclass(frozen=True)
class StreamHeader:
    """Static description of one CSI stream (one collection run)."""

    n_sc: int
    n_r: int
    n_t: int
    sample_interval_ms: float = 10.0
    label: Optional[int] = None  # 0 = human free, 1 = human motion, None = unlabeled
    day_id: str = ""

    def __post_init__(self) -> None:
        if self.n_sc < N_F_DEFAULT:
            raise ValueError(f"n_sc must be >= {N_F_DEFAULT}, got {self.n_sc}")
        if self.n_r < 2:
            raise ValueError("n_r must be >= 2: phase differencing needs a reference antenna")
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0, 1 or None, got {self.label!r}")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.n_sc, self.n_r, self.n_t)


@dataclass(frozen=True)
class CsiFrame:
    """One channel estimate: timestamp plus the complex array h (n_sc, n_r, n_t)."""

    timestamp_us: int
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.h.ndim != 3:
            raise ValueError(f"h must be 3-D (n_sc, n_r, n_t), got shape {self.h.shape}")
        if not np.iscomplexobj(self.h):
            raise ValueError("h must be complex valued")


@dataclass(frozen=True)
class CsiWindow:
    """I validated frames with their down-selected stack x (I, n_f, n_r, n_t)."""

    frames: tuple[CsiFrame, ...]
    x: np.ndarray
    label: Optional[int] = None

    @property
    def span_s(self) -> float:
        return (self.frames[-1].timestamp_us - self.frames[0].timestamp_us) / 1e6

    @property
    def timestamps_us(self) -> np.ndarray:
        return np.array([f.timestamp_us for f in self.frames], dtype=np.int64)


@dataclass
class CsiStream:
    """One contiguous run: header plus per-frame timestamps and channel arrays.

    ``h`` has shape (n_frames, n_sc, n_r, n_t); timestamps are strictly
    increasing microseconds since stream start.
    """

    header: StreamHeader
    timestamps_us: np.ndarray
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.h.ndim != 4 or self.h.shape[1:] != self.header.frame_shape:
            raise ValueError(
                f"h shape {self.h.shape} does not match header {self.header.frame_shape}"
            )
        if len(self.timestamps_us) != len(self.h):
            raise ValueError("timestamp / frame count mismatch")
        ts = np.asarray(self.timestamps_us)
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing within a stream")

    @property
    def n_frames(self) -> int:
        return len(self.h)

    def frame(self, i: int) -> CsiFrame:
        return CsiFrame(int(self.timestamps_us[i]), self.h[i])

    def frames(self) -> list[CsiFrame]:
        return [self.frame(i) for i in range(self.n_frames)]


def subcarrier_indices(n_sc: int, n_f: int) -> np.ndarray:
    """Indices of the n_f evenly spaced subcarriers kept out of n_sc.

    The selection is {0, s, 2s, ...} with stride s = n_sc / n_f, so it depends
    only on the two counts, never on the data.
    """
    if n_f < 1 or n_f > n_sc:
        raise NonDivisibleSelection(f"n_f={n_f} must be in [1, n_sc={n_sc}]")
    if n_sc % n_f != 0:
        raise NonDivisibleSelection(f"n_f={n_f} does not divide n_sc={n_sc}")
    stride = n_sc // n_f
    return np.arange(n_f) * stride


def downselect_subcarriers(frame, n_f: int) -> np.ndarray:
    """Keep n_f evenly spaced subcarriers of a frame (or stacked frames).

    Accepts a CsiFrame or any array whose axis -3 is the subcarrier axis;
    returns the reduced array (new copy).
    """
    h = frame.h if isinstance(frame, CsiFrame) else np.asarray(frame)
    idx = subcarrier_indices(h.shape[-3], n_f)
    return np.ascontiguousarray(h.take(idx, axis=-3))


def stack_window(frames: Sequence) -> np.ndarray:
    """Stack I down-selected frames along a new leading time axis.

    Elements may be CsiFrames or plain (n_f, n_r, n_t) arrays; output is the
    complex 4-D array (I, n_f, n_r, n_t).
    """
    arrays = [f.h if isinstance(f, CsiFrame) else np.asarray(f) for f in frames]
    return np.stack(arrays, axis=0)


def validate_window(
    frames: Sequence[CsiFrame],
    nominal_span_s: float = NOMINAL_SPAN_S_DEFAULT,
    tol_s: float = SPAN_TOL_S_DEFAULT,
    *,
    n_frames: int = WINDOW_FRAMES_DEFAULT,
    n_f: Optional[int] = None,
    label: Optional[int] = None,
) -> CsiWindow:
    """Build a CsiWindow from consecutive frames, enforcing both validity rules.

    Rules: (1) every selected coefficient magnitude is strictly positive,
    (2) the last-minus-first timestamp span lies in nominal +/- tol seconds.
    Raises WrongFrameCount / ZeroMagnitudeEntry / SpanOutOfTolerance; the
    exception type tells the caller which condition failed.

    ``n_f`` selects evenly spaced subcarriers for the stacked array x
    (default: keep all).
    """
    if len(frames) != n_frames:
        raise WrongFrameCount(f"expected {n_frames} frames, got {len(frames)}")
    n_sc = frames[0].h.shape[0]
    if n_f is None:
        n_f = n_sc
    x = stack_window([downselect_subcarriers(f, n_f) for f in frames])
    if not np.all(np.abs(x) > 0):
        raise ZeroMagnitudeEntry("window contains a zero-magnitude channel coefficient")
    span = (frames[-1].timestamp_us - frames[0].timestamp_us) / 1e6
    if not (nominal_span_s - tol_s <= span <= nominal_span_s + tol_s):
        raise SpanOutOfTolerance(
            f"span {span:.4f}s outside {nominal_span_s}+/-{tol_s}s"
        )
    return CsiWindow(frames=tuple(frames), x=x, label=label)


def window_validity_mask(
    timestamps_us: np.ndarray,
    h_selected: np.ndarray,
    n_frames: int = WINDOW_FRAMES_DEFAULT,
    stride: int = 1,
    nominal_span_s: float = NOMINAL_SPAN_S_DEFAULT,
    tol_s: float = SPAN_TOL_S_DEFAULT,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized validity check over all windows of a stream.

    ``h_selected`` is the already down-selected frame stack
    (n, n_f, n_r, n_t). Windows start at 0, stride, 2*stride, ... and cover
    ``n_frames`` consecutive frames. Returns (start_indices, ok_mask,
    reason codes) where reason is 0 = valid, 1 = zero entry, 2 = bad span
    (zero entry wins when both fail, matching validate_window's check order).
    """
    n = len(h_selected)
    starts = np.arange(0, n - n_frames + 1, stride)
    if len(starts) == 0:
        return starts, np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int8)
    frame_has_zero = np.any(
        np.abs(h_selected.reshape(n, -1)) == 0, axis=1
    ).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(frame_has_zero)])
    zeros_in_window = csum[starts + n_frames] - csum[starts] > 0
    ts = np.asarray(timestamps_us, dtype=np.int64)
    span = (ts[starts + n_frames - 1] - ts[starts]) / 1e6
    span_bad = (span < nominal_span_s - tol_s) | (span > nominal_span_s + tol_s)
    reason = np.zeros(len(starts), dtype=np.int8)
    reason[span_bad] = 2
    reason[zeros_in_window] = 1
    ok = reason == 0
    return starts, ok, reason
