"""Dataset assembly with disjoint-day splits, training, and evaluation.

Collection days (day_id) are the split unit: train and test must come from
different days so the classifier cannot latch onto day-specific nuisances
like a particular CFO. Windows are cut per stream segment, validated, and
preprocessed into the chosen variant's tensors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn, streamio
from .csi import downselect_subcarriers, window_validity_mask
from .model import Model, ModelSpec, BranchSpec, _DFT_GEOM, _FULL_LEN_GEOM
from .preprocess import PipelineVariant, make_input_arrays

WINDOW_FRAMES = 128
N_F = 14
CROP_ROWS = 50


class PipelineError(Exception):
    pass


class NoValidWindows(PipelineError):
    pass


class UnlabeledStream(PipelineError):
    pass


class SingleClassTrainingSet(PipelineError):
    pass


@dataclass
class WindowSet:
    """Validated, down-selected windows plus their labels and day tags."""

    x: np.ndarray  # (n, window_frames, n_f, n_r, n_t) complex64
    labels: np.ndarray  # (n,) int8
    day_ids: np.ndarray  # (n,) unicode
    rejects: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.x)


def load_windows(
    paths: Iterable,
    stride: int = WINDOW_FRAMES,
    n_f: int = N_F,
    window_frames: int = WINDOW_FRAMES,
    nominal_span_s: float = 1.27,
    tol_s: float = 0.064,
    require_labels: bool = True,
) -> WindowSet:
    """Cut windows from every segment of every file; invalid ones are counted.

    Windows never span segment boundaries. Training uses the default
    non-overlapping stride; pass stride=1 for detection-style slicing.
    """
    xs, labels, days = [], [], []
    rejects = {"zero_entry": 0, "bad_span": 0}
    for path in paths:
        for seg in streamio.read_stream_file(path):
            if seg.header.label is None:
                if require_labels:
                    raise UnlabeledStream(f"{path}: segment '{seg.header.day_id}' has no label")
                continue
            ds = downselect_subcarriers(seg.h, n_f).astype(np.complex64, copy=False)
            starts, ok, reason = window_validity_mask(
                seg.timestamps_us, ds, window_frames, stride, nominal_span_s, tol_s
            )
            rejects["zero_entry"] += int(np.sum(reason == 1))
            rejects["bad_span"] += int(np.sum(reason == 2))
            for s in starts[ok]:
                xs.append(ds[s: s + window_frames])
            labels.extend([seg.header.label] * int(ok.sum()))
            days.extend([seg.header.day_id] * int(ok.sum()))
    if not xs:
        raise NoValidWindows(f"no valid windows in {list(paths)!r} (rejects: {rejects})")
    return WindowSet(
        x=np.stack(xs),
        labels=np.array(labels, dtype=np.int8),
        day_ids=np.array(days),
        rejects=rejects,
    )


@dataclass
class Dataset:
    """Preprocessed tensors, one array per model branch, plus split indices."""

    inputs: tuple[np.ndarray, ...]
    labels: np.ndarray
    day_ids: np.ndarray
    variant: PipelineVariant
    splits: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def days(self) -> list[str]:
        return sorted(set(self.day_ids.tolist()))

    def assign_splits(
        self,
        train_days: Sequence[str],
        test_days: Sequence[str],
        val_days: Sequence[str] = (),
    ) -> None:
        """Assign whole days to splits; any day overlap is an error."""
        groups = {"train": set(train_days), "test": set(test_days), "val": set(val_days)}
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = groups[a] & groups[b]
                if common:
                    raise PipelineError(f"days {sorted(common)} appear in both {a} and {b}")
        self.splits = {
            name: np.flatnonzero(np.isin(self.day_ids, sorted(days)))
            for name, days in groups.items()
            if days
        }

    def class_counts(self, split: str) -> dict[int, int]:
        idx = self.splits[split]
        values, counts = np.unique(self.labels[idx], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            inputs=tuple(t[indices] for t in self.inputs),
            labels=self.labels[indices],
            day_ids=self.day_ids[indices],
            variant=self.variant,
        )

    def subsample(self, n: int, seed: int) -> "Dataset":
        """Reproducible random subset (used for retraining-set augmentation)."""
        if n > self.n:
            raise ValueError(f"cannot subsample {n} of {self.n}")
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(self.n, size=n, replace=False)))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.variant != self.variant:
            raise PipelineError("cannot concatenate datasets of different variants")
        return Dataset(
            inputs=tuple(np.concatenate([a, b]) for a, b in zip(self.inputs, other.inputs)),
            labels=np.concatenate([self.labels, other.labels]),
            day_ids=np.concatenate([self.day_ids, other.day_ids]),
            variant=self.variant,
        )


def dataset_from_windows(
    windows: WindowSet,
    variant: PipelineVariant = PipelineVariant.WITH_DFT,
    crop_rows: int = CROP_ROWS,
    chunk: int = 256,
    dtype=np.float32,
) -> Dataset:
    """Preprocess a WindowSet into classifier tensors, in bounded chunks."""
    variant = PipelineVariant(variant)
    outs: Optional[list[np.ndarray]] = None
    for start in range(0, windows.n, chunk):
        tensors = make_input_arrays(windows.x[start: start + chunk], crop_rows, variant)
        if outs is None:
            outs = [
                np.empty((windows.n,) + t.shape[1:], dtype=dtype) for t in tensors
            ]
        for buf, t in zip(outs, tensors):
            buf[start: start + len(t)] = t
    assert outs is not None
    return Dataset(
        inputs=tuple(outs),
        labels=windows.labels.astype(np.int64),
        day_ids=windows.day_ids.copy(),
        variant=variant,
    )


def build_dataset(
    paths: Iterable,
    stride: int = WINDOW_FRAMES,
    variant: PipelineVariant = PipelineVariant.WITH_DFT,
    crop_rows: int = CROP_ROWS,
    **window_kwargs,
) -> Dataset:
    windows = load_windows(paths, stride=stride, **window_kwargs)
    return dataset_from_windows(windows, variant, crop_rows)


def spec_for_dataset(
    dataset: Dataset, conv1_out: int = 8, conv2_out: int = 16, fc_hidden: int = 64
) -> ModelSpec:
    """Model spec whose branch shapes come straight from the dataset tensors."""
    geom = _DFT_GEOM if dataset.variant in (
        PipelineVariant.WITH_DFT, PipelineVariant.MAG_ONLY, PipelineVariant.PHASE_ONLY
    ) else _FULL_LEN_GEOM
    branches = tuple(
        BranchSpec(in_shape=t.shape[1:], conv1_out=conv1_out, conv2_out=conv2_out, **geom)
        for t in dataset.inputs
    )
    spec = ModelSpec(variant=dataset.variant.value, branches=branches, fc_hidden=fc_hidden)
    for b in branches:
        b.shape_walk()
    return spec


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 1e-4  # applied to FC weight matrices only
    dtype: str = "float32"


@dataclass
class DayMetrics:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def fpr(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else float("nan")

    @property
    def fnr(self) -> float:
        pos = self.fn + self.tp
        return self.fn / pos if pos else float("nan")

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "fpr": self.fpr, "fnr": self.fnr,
        }


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)
    test_days: dict = field(default_factory=dict)  # day_id -> DayMetrics
    wall_seconds: float = 0.0

    def to_text(self) -> str:
        lines = ["epoch  loss      acc"]
        for i, (l, a) in enumerate(zip(self.epoch_loss, self.epoch_acc), 1):
            lines.append(f"{i:>5}  {l:<8.4f}  {a:.4f}")
        if self.test_days:
            lines.append("")
            lines.append("test day    acc     fpr     fnr     tp    fp    tn    fn")
            for day in sorted(self.test_days):
                m = self.test_days[day]
                lines.append(
                    f"{day:<10}  {m.accuracy:.4f}  {m.fpr:.4f}  {m.fnr:.4f}"
                    f"  {m.tp:>4}  {m.fp:>4}  {m.tn:>4}  {m.fn:>4}"
                )
        lines.append("")
        lines.append(f"wall seconds: {self.wall_seconds:.2f}")
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        recs = [
            {"kind": "epoch", "epoch": i + 1, "loss": l, "acc": a}
            for i, (l, a) in enumerate(zip(self.epoch_loss, self.epoch_acc))
        ]
        for day in sorted(self.test_days):
            recs.append({"kind": "test_day", "day": day, **self.test_days[day].as_dict()})
        recs.append({"kind": "summary", "wall_seconds": self.wall_seconds})
        return recs


def predict(model: Model, inputs: Sequence[np.ndarray], batch: int = 512) -> np.ndarray:
    """Infer-mode hard labels; argmax ties break toward 0 (no presence)."""
    n = len(inputs[0])
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch):
        chunk = [t[start: start + batch] for t in inputs]
        probs = model.forward(chunk, mode="infer")
        out[start: start + len(probs)] = (probs[:, 1] > probs[:, 0]).astype(np.int64)
    return out


def evaluate(model: Model, dataset: Dataset, split: str = "test", batch: int = 512) -> dict:
    """Per-day accuracy/FPR/FNR on a split; returns {"days": ..., "overall": ...}."""
    idx = dataset.splits.get(split)
    if idx is None or len(idx) == 0:
        raise PipelineError(f"split {split!r} is empty")
    inputs = tuple(t[idx] for t in dataset.inputs)
    labels = dataset.labels[idx]
    days = dataset.day_ids[idx]
    preds = predict(model, inputs, batch=batch)
    per_day: dict[str, DayMetrics] = {}
    overall = DayMetrics()
    for day in sorted(set(days.tolist())):
        m = days == day
        dm = DayMetrics(
            tp=int(np.sum((preds == 1) & (labels == 1) & m)),
            fp=int(np.sum((preds == 1) & (labels == 0) & m)),
            tn=int(np.sum((preds == 0) & (labels == 0) & m)),
            fn=int(np.sum((preds == 0) & (labels == 1) & m)),
        )
        per_day[day] = dm
        overall.tp += dm.tp
        overall.fp += dm.fp
        overall.tn += dm.tn
        overall.fn += dm.fn
    return {"days": per_day, "overall": overall}


def train(
    dataset: Dataset,
    spec: Optional[ModelSpec] = None,
    config: Optional[TrainConfig] = None,
    seed: int = 0,
) -> tuple[Model, TrainReport]:
    """Adam + cross-entropy training on the train split; deterministic per seed."""
    config = config or TrainConfig()
    t_start = time.perf_counter()
    idx = dataset.splits.get("train")
    if idx is None or len(idx) == 0:
        raise PipelineError("train split is empty")
    labels = dataset.labels[idx]
    if len(np.unique(labels)) < 2:
        raise SingleClassTrainingSet("train split holds a single class")
    spec = spec or spec_for_dataset(dataset)
    ss = np.random.SeedSequence(seed)
    model_seed, shuffle_seed = ss.spawn(2)
    model = Model(spec, seed=model_seed, dtype=np.dtype(config.dtype))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    opt = nn.Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    inputs = tuple(t[idx] for t in dataset.inputs)
    report = TrainReport()
    n = len(labels)
    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        losses, hits, seen = [], 0, 0
        for start in range(0, n, config.batch_size):
            take = perm[start: start + config.batch_size]
            if len(take) < 2:  # batch norm needs at least two samples
                continue
            xb = [t[take] for t in inputs]
            yb = labels[take]
            probs = model.forward(xb, mode="train")
            loss = nn.cross_entropy(probs, yb) + nn.l2_penalty(
                [w.value for w in model.fc_weights()], config.l2_lambda
            )
            opt.zero_grad()
            model.backward(nn.softmax_xent_grad(probs, yb))
            for w in model.fc_weights():
                w.grad += 2.0 * config.l2_lambda * w.value
            opt.step()
            losses.append(loss * len(take))
            hits += int(np.sum((probs[:, 1] > probs[:, 0]).astype(np.int64) == yb))
            seen += len(take)
        report.epoch_loss.append(float(np.sum(losses) / seen))
        report.epoch_acc.append(hits / seen)
    if "test" in dataset.splits and len(dataset.splits["test"]):
        report.test_days = evaluate(model, dataset, "test")["days"]
    report.wall_seconds = time.perf_counter() - t_start
    return model, report
