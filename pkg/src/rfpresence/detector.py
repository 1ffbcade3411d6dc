"""Online presence detection: sliding-window inference plus per-second voting.

Every new frame (after a 127-frame warm-up) closes a window that is
validated, preprocessed, and classified, so labels arrive at roughly the
CSI sampling rate. Each second is then split into five 200 ms subintervals;
a subinterval is positive when at least 10 window labels in it say motion,
and the second is declared occupied when at least three subintervals are
positive. Labels are attributed to the second containing the window's last
frame; second boundaries align to the stream-start epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .csi import CsiStream, window_validity_mask
from .csi import downselect_subcarriers
from .model import Model
from .preprocess import PipelineVariant, make_input_arrays

US_PER_S = 1_000_000


class DetectorError(Exception):
    pass


class VariantMismatch(DetectorError):
    """Model input shapes disagree with the stream / config geometry."""


@dataclass(frozen=True)
class DetectorConfig:
    window_len: int = 128
    stride: int = 1
    subinterval_ms: int = 200
    positives_per_subinterval: int = 10
    subintervals_per_second: int = 5
    subinterval_votes: int = 3
    nominal_span_s: float = 1.27
    span_tol_s: float = 0.064
    n_f: int = 14
    batch_windows: int = 256

    def __post_init__(self) -> None:
        if self.subintervals_per_second * self.subinterval_ms != 1000:
            raise ValueError("subintervals must tile one second exactly")
        if min(self.positives_per_subinterval, self.subinterval_votes, self.stride,
               self.window_len) < 1:
            raise ValueError("detector thresholds must be positive")


@dataclass(frozen=True)
class SecondRecord:
    second: int
    counts: tuple[int, ...]  # label-1 counts per subinterval
    decision: bool


@dataclass
class DetectionTimeline:
    records: list[SecondRecord] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def decisions(self) -> dict[int, bool]:
        return {r.second: r.decision for r in self.records}

    def positive_seconds(self) -> list[int]:
        return [r.second for r in self.records if r.decision]

    def verify(self, cfg: DetectorConfig) -> bool:
        """Re-apply the vote rule to the stored counts; True when consistent."""
        for r in self.records:
            positives = sum(c >= cfg.positives_per_subinterval for c in r.counts)
            if (positives >= cfg.subinterval_votes) != r.decision:
                return False
        return True

    def to_lines(self) -> list[str]:
        return [
            ",".join([str(r.second), *map(str, r.counts), str(int(r.decision))])
            for r in self.records
        ]

    @staticmethod
    def from_lines(lines: Iterable[str], n_sub: int = 5) -> "DetectionTimeline":
        records = []
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            records.append(SecondRecord(
                second=int(parts[0]),
                counts=tuple(int(c) for c in parts[1: 1 + n_sub]),
                decision=bool(int(parts[1 + n_sub])),
            ))
        return DetectionTimeline(records=records)


def _model_crop_rows(model: Model) -> int:
    return model.spec.branches[0].in_shape[0]


def check_model_stream(model: Model, header, cfg: DetectorConfig) -> None:
    """Raise VariantMismatch when the model cannot consume this stream."""
    variant = PipelineVariant(model.spec.variant)
    mag_ch = header.n_r * header.n_t
    ph_ch = (header.n_r - 1) * header.n_t
    expect = {
        PipelineVariant.WITH_DFT: (mag_ch, ph_ch),
        PipelineVariant.NO_DFT: (mag_ch, ph_ch),
        PipelineVariant.MAG_ONLY: (mag_ch,),
        PipelineVariant.PHASE_ONLY: (ph_ch,),
        PipelineVariant.STACKED_COMPLEX: (2 * mag_ch,),
        PipelineVariant.SINGLE_CNN: (mag_ch + ph_ch,),
    }[variant]
    got = tuple(b.in_shape[2] for b in model.spec.branches)
    if got != expect:
        raise VariantMismatch(
            f"model branches {got} do not match stream channels {expect} for {variant.value}"
        )
    for b in model.spec.branches:
        if b.in_shape[1] != cfg.n_f:
            raise VariantMismatch(f"model expects n_f={b.in_shape[1]}, config has {cfg.n_f}")
        if variant in (PipelineVariant.NO_DFT, PipelineVariant.STACKED_COMPLEX,
                       PipelineVariant.SINGLE_CNN) and b.in_shape[0] != cfg.window_len:
            raise VariantMismatch(
                f"model expects {b.in_shape[0]}-frame windows, config has {cfg.window_len}"
            )


def _infer_segment(
    model: Model,
    variant: PipelineVariant,
    crop_rows: int,
    ts: np.ndarray,
    ds: np.ndarray,
    cfg: DetectorConfig,
    stats: dict,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (label_timestamps, labels) batches for one contiguous frame block."""
    starts, ok, _reason = window_validity_mask(
        ts, ds, cfg.window_len, cfg.stride, cfg.nominal_span_s, cfg.span_tol_s
    )
    stats["n_windows"] = stats.get("n_windows", 0) + len(starts)
    stats["n_invalid"] = stats.get("n_invalid", 0) + int(np.sum(~ok))
    valid = starts[ok]
    for i in range(0, len(valid), cfg.batch_windows):
        batch_starts = valid[i: i + cfg.batch_windows]
        x = np.stack([ds[s: s + cfg.window_len] for s in batch_starts])
        tensors = make_input_arrays(x, crop_rows, variant)
        probs = model.forward(tensors, mode="infer")
        labels = (probs[:, 1] > probs[:, 0]).astype(np.int8)
        yield ts[batch_starts + cfg.window_len - 1], labels


def stream_infer(
    model: Model,
    source: Union[CsiStream, Sequence[CsiStream], Iterable],
    cfg: Optional[DetectorConfig] = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Classify every valid sliding window; returns (timestamps, labels, stats).

    ``source`` may be a CsiStream, a list of them, or an iterator of
    (segment_idx, header, ts, h) chunks as produced by
    streamio.iter_stream_chunks. Invalid windows emit no label and are
    counted in the stats.
    """
    cfg = cfg or DetectorConfig()
    variant = PipelineVariant(model.spec.variant)
    crop_rows = _model_crop_rows(model)
    stats: dict = {}
    ts_out: list[np.ndarray] = []
    lab_out: list[np.ndarray] = []

    def handle_block(ts: np.ndarray, ds: np.ndarray) -> None:
        for t, l in _infer_segment(model, variant, crop_rows, ts, ds, cfg, stats):
            ts_out.append(t)
            lab_out.append(l)

    if isinstance(source, CsiStream):
        source = [source]
    if isinstance(source, Sequence):
        for seg in source:
            check_model_stream(model, seg.header, cfg)
            ds = downselect_subcarriers(seg.h, cfg.n_f)
            handle_block(np.asarray(seg.timestamps_us), ds)
            stats["sample_interval_ms"] = seg.header.sample_interval_ms
    else:
        # Chunk iterator: a rolling (window_len - 1)-frame tail lets windows
        # straddle chunk boundaries but never segment boundaries. The last
        # window of a block starts len - window_len, so re-seeding the next
        # block with the final window_len - 1 frames continues seamlessly.
        if cfg.stride != 1:
            raise DetectorError("chunked input supports stride 1 only")
        cur_seg = None
        tail_ts = tail_ds = None
        keep = cfg.window_len - 1
        for seg_idx, header, ts, h in source:
            if seg_idx != cur_seg:
                cur_seg = seg_idx
                tail_ts = tail_ds = None
                check_model_stream(model, header, cfg)
                stats["sample_interval_ms"] = header.sample_interval_ms
            ds = downselect_subcarriers(h, cfg.n_f)
            if tail_ds is not None:
                ds = np.concatenate([tail_ds, ds])
                ts = np.concatenate([tail_ts, ts])
            handle_block(ts, ds)
            tail_ds, tail_ts = ds[-keep:], ts[-keep:]
    if ts_out:
        return np.concatenate(ts_out), np.concatenate(lab_out), stats
    return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8), stats


def vote_second(
    timestamps_us: np.ndarray,
    labels: np.ndarray,
    second: int,
    cfg: Optional[DetectorConfig] = None,
) -> tuple[bool, tuple[int, ...]]:
    """Apply the subinterval vote to the labels of one second.

    Returns (decision, per-subinterval label-1 counts). Timestamps must lie
    within [second, second + 1) seconds of the stream epoch.
    """
    cfg = cfg or DetectorConfig()
    ts = np.asarray(timestamps_us, dtype=np.int64)
    labels = np.asarray(labels)
    base = second * US_PER_S
    if len(ts) and (ts.min() < base or ts.max() >= base + US_PER_S):
        raise ValueError(f"timestamps outside second {second}")
    sub_us = cfg.subinterval_ms * 1000
    idx = (ts - base) // sub_us
    counts = np.bincount(
        idx[labels == 1].astype(np.int64), minlength=cfg.subintervals_per_second
    )
    positives = int(np.sum(counts >= cfg.positives_per_subinterval))
    return positives >= cfg.subinterval_votes, tuple(int(c) for c in counts)


def timeline_from_labels(
    timestamps_us: np.ndarray,
    labels: np.ndarray,
    cfg: Optional[DetectorConfig] = None,
    sample_interval_ms: float = 10.0,
    stats: Optional[dict] = None,
) -> DetectionTimeline:
    """Vote every whole second covered by the label stream."""
    cfg = cfg or DetectorConfig()
    timeline = DetectionTimeline(stats=dict(stats or {}))
    if len(timestamps_us) == 0:
        return timeline
    order = np.argsort(timestamps_us, kind="stable")
    ts = np.asarray(timestamps_us, dtype=np.int64)[order]
    labels = np.asarray(labels)[order]
    interval_us = int(round(sample_interval_ms * 1000))
    s_first = int(np.ceil(ts[0] / US_PER_S))
    s_last = (int(ts[-1]) + interval_us) // US_PER_S - 1
    for second in range(s_first, s_last + 1):
        lo = np.searchsorted(ts, second * US_PER_S, side="left")
        hi = np.searchsorted(ts, (second + 1) * US_PER_S, side="left")
        decision, counts = vote_second(ts[lo:hi], labels[lo:hi], second, cfg)
        timeline.records.append(SecondRecord(second, counts, decision))
    timeline.stats["n_labels"] = int(len(ts))
    return timeline


def run_detection(
    model: Model,
    source,
    cfg: Optional[DetectorConfig] = None,
) -> DetectionTimeline:
    """Full online pipeline: sliding inference then per-second voting."""
    cfg = cfg or DetectorConfig()
    ts, labels, stats = stream_infer(model, source, cfg)
    return timeline_from_labels(
        ts, labels, cfg, stats.get("sample_interval_ms", 10.0), stats
    )
