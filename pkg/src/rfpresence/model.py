"""The two-branch CNN classifier: spec, construction, and file format.

Each branch runs Conv -> BN -> ReLU -> AvgPool twice, is flattened, and the
branch outputs are concatenated into FC -> BN -> ReLU -> Dropout -> FC with
a softmax over the two classes (0 = human free, 1 = motion). Variants that
skip the spectral preprocessing see longer inputs and use a taller first
kernel and taller pools; single-input variants simply have one branch.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .preprocess import PipelineVariant

MODEL_MAGIC = b"RFPM"
MODEL_VERSION = 1

_VARIANT_TAGS = {v: i for i, v in enumerate(PipelineVariant)}
_TAG_VARIANTS = {i: v for v, i in _VARIANT_TAGS.items()}


class ModelFileError(Exception):
    pass


@dataclass(frozen=True)
class BranchSpec:
    in_shape: tuple[int, int, int]  # (rows, cols, channels)
    conv1_out: int = 8
    k1: tuple[int, int] = (3, 3)
    pool1: tuple[int, int] = (2, 1)
    conv2_out: int = 16
    k2: tuple[int, int] = (3, 3)
    pool2: tuple[int, int] = (3, 1)

    def shape_walk(self) -> list[tuple[int, int, int]]:
        """Spatial shapes after each stage; raises if any dimension collapses."""
        h, w, _ = self.in_shape
        shapes = []
        for (kh, kw), (ph, pw), c_out in ((self.k1, self.pool1, self.conv1_out),
                                          (self.k2, self.pool2, self.conv2_out)):
            h, w = h - kh + 1, w - kw + 1
            if h < 1 or w < 1:
                raise nn.KernelLargerThanInput(f"kernel {kh}x{kw} collapses input to {h}x{w}")
            shapes.append((h, w, c_out))
            h, w = h // ph, w // pw
            if h < 1 or w < 1:
                raise nn.PoolLargerThanInput(f"pool {ph}x{pw} collapses input to {h}x{w}")
            shapes.append((h, w, c_out))
        return shapes

    def flat_size(self) -> int:
        h, w, c = self.shape_walk()[-1]
        return h * w * c


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    branches: tuple[BranchSpec, ...]
    fc_hidden: int = 64
    n_classes: int = 2
    dropout_p: float = 0.5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def concat_size(self) -> int:
        return sum(b.flat_size() for b in self.branches)


_DFT_GEOM = dict(k1=(3, 3), pool1=(2, 1), k2=(3, 3), pool2=(3, 1))
_FULL_LEN_GEOM = dict(k1=(5, 3), pool1=(4, 1), k2=(3, 3), pool2=(4, 1))


def build_model_spec(
    variant: PipelineVariant,
    n_f: int = 14,
    crop_rows: int = 50,
    window_frames: int = 128,
    n_r: int = 3,
    n_t: int = 3,
    conv1_out: int = 8,
    conv2_out: int = 16,
    fc_hidden: int = 64,
) -> ModelSpec:
    """Per-variant architecture with kernel/pool sizes matched to input length."""
    variant = PipelineVariant(variant)
    mag_ch = n_r * n_t
    ph_ch = (n_r - 1) * n_t
    widths = dict(conv1_out=conv1_out, conv2_out=conv2_out)
    if variant == PipelineVariant.WITH_DFT:
        branches = (
            BranchSpec(in_shape=(crop_rows, n_f, mag_ch), **_DFT_GEOM, **widths),
            BranchSpec(in_shape=(crop_rows, n_f, ph_ch), **_DFT_GEOM, **widths),
        )
    elif variant == PipelineVariant.NO_DFT:
        branches = (
            BranchSpec(in_shape=(window_frames, n_f, mag_ch), **_FULL_LEN_GEOM, **widths),
            BranchSpec(in_shape=(window_frames, n_f, ph_ch), **_FULL_LEN_GEOM, **widths),
        )
    elif variant == PipelineVariant.MAG_ONLY:
        branches = (BranchSpec(in_shape=(crop_rows, n_f, mag_ch), **_DFT_GEOM, **widths),)
    elif variant == PipelineVariant.PHASE_ONLY:
        branches = (BranchSpec(in_shape=(crop_rows, n_f, ph_ch), **_DFT_GEOM, **widths),)
    elif variant == PipelineVariant.STACKED_COMPLEX:
        branches = (BranchSpec(in_shape=(window_frames, n_f, 2 * mag_ch), **_FULL_LEN_GEOM, **widths),)
    elif variant == PipelineVariant.SINGLE_CNN:
        branches = (BranchSpec(in_shape=(window_frames, n_f, mag_ch + ph_ch), **_FULL_LEN_GEOM, **widths),)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    spec = ModelSpec(variant=variant.value, branches=branches, fc_hidden=fc_hidden)
    for b in spec.branches:
        b.shape_walk()
    return spec


def count_params(spec: ModelSpec) -> int:
    """Exact count of trainable scalars; BN running stats are excluded."""
    total = 0
    for b in spec.branches:
        c_in = b.in_shape[2]
        total += b.k1[0] * b.k1[1] * c_in * b.conv1_out + b.conv1_out
        total += 2 * b.conv1_out
        total += b.k2[0] * b.k2[1] * b.conv1_out * b.conv2_out + b.conv2_out
        total += 2 * b.conv2_out
    total += spec.concat_size() * spec.fc_hidden + spec.fc_hidden
    total += 2 * spec.fc_hidden
    total += spec.fc_hidden * spec.n_classes + spec.n_classes
    return total


class Model:
    """Parallel-branch CNN built from a ModelSpec; owns all parameters."""

    def __init__(self, spec: ModelSpec, seed=0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_seed, drop_seed = ss.spawn(2)
        rng = np.random.Generator(np.random.PCG64(init_seed))
        self.branches: list[list[nn.Layer]] = []
        for bi, b in enumerate(spec.branches):
            c_in = b.in_shape[2]
            layers: list[nn.Layer] = [
                nn.Conv2d(c_in, b.conv1_out, *b.k1, rng=rng, dtype=dtype, name=f"b{bi}.conv1"),
                nn.BatchNorm(b.conv1_out, spec.bn_momentum, spec.bn_eps, dtype=dtype, name=f"b{bi}.bn1"),
                nn.ReLU(),
                nn.AvgPool2d(*b.pool1),
                nn.Conv2d(b.conv1_out, b.conv2_out, *b.k2, rng=rng, dtype=dtype, name=f"b{bi}.conv2"),
                nn.BatchNorm(b.conv2_out, spec.bn_momentum, spec.bn_eps, dtype=dtype, name=f"b{bi}.bn2"),
                nn.ReLU(),
                nn.AvgPool2d(*b.pool2),
                nn.Flatten(),
            ]
            self.branches.append(layers)
        self.dropout = nn.Dropout(spec.dropout_p)
        self.dropout.rng = np.random.Generator(np.random.PCG64(drop_seed))
        self.head: list[nn.Layer] = [
            nn.Dense(spec.concat_size(), spec.fc_hidden, rng=rng, dtype=dtype, name="fc1"),
            nn.BatchNorm(spec.fc_hidden, spec.bn_momentum, spec.bn_eps, dtype=dtype, name="fc1.bn"),
            nn.ReLU(),
            self.dropout,
            nn.Dense(spec.fc_hidden, spec.n_classes, rng=rng, dtype=dtype, name="fc2"),
        ]
        self._split_sizes = [b.flat_size() for b in spec.branches]

    # -- forward / backward -------------------------------------------------

    def forward(self, inputs: Sequence[np.ndarray], mode: str = "train") -> np.ndarray:
        """Class probabilities (N, n_classes) for a batch of branch inputs."""
        if len(inputs) != len(self.branches):
            raise nn.ShapeMismatch(
                f"model has {len(self.branches)} branches, got {len(inputs)} inputs"
            )
        feats = []
        for layers, x, b in zip(self.branches, inputs, self.spec.branches):
            x = np.asarray(x, dtype=self.dtype)
            if x.shape[1:] != b.in_shape:
                raise nn.ShapeMismatch(f"branch expects {b.in_shape}, got {x.shape[1:]}")
            for layer in layers:
                x = layer.forward(x, mode)
            feats.append(x)
        z = np.concatenate(feats, axis=1)
        for layer in self.head:
            z = layer.forward(z, mode)
        return nn.softmax(z)

    def backward(self, dlogits: np.ndarray) -> list[np.ndarray]:
        """Backpropagate a logit gradient; returns per-branch input gradients."""
        g = dlogits
        for layer in reversed(self.head):
            g = layer.backward(g)
        grads = []
        offset = 0
        for layers, size in zip(self.branches, self._split_sizes):
            gb = g[:, offset: offset + size]
            offset += size
            for layer in reversed(layers):
                gb = layer.backward(gb)
            grads.append(gb)
        return grads

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[nn.Param]:
        out: list[nn.Param] = []
        for layers in self.branches:
            for layer in layers:
                out.extend(layer.params())
        for layer in self.head:
            out.extend(layer.params())
        return out

    def fc_weights(self) -> list[nn.Param]:
        """Weight matrices of the fully connected layers (the L2 target)."""
        return [l.weight for l in self.head if isinstance(l, nn.Dense)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def state_tensors(self) -> list[np.ndarray]:
        """All persisted tensors (trainable + BN running stats) in file order."""
        out: list[np.ndarray] = []
        for layers in list(self.branches) + [self.head]:
            for layer in layers:
                if isinstance(layer, (nn.Conv2d, nn.Dense)):
                    out.extend(p.value for p in layer.params())
                elif isinstance(layer, nn.BatchNorm):
                    out.extend([layer.gamma.value, layer.beta.value,
                                layer.running_mean, layer.running_var])
        return out

    def load_state_tensors(self, tensors: list[np.ndarray]) -> None:
        expected = self.state_tensors()
        if len(tensors) != len(expected):
            raise ModelFileError(f"expected {len(expected)} tensors, got {len(tensors)}")
        it = iter(tensors)
        for layers in list(self.branches) + [self.head]:
            for layer in layers:
                if isinstance(layer, (nn.Conv2d, nn.Dense)):
                    for p in layer.params():
                        p.value = self._take(it, p.value.shape)
                elif isinstance(layer, nn.BatchNorm):
                    layer.gamma.value = self._take(it, layer.gamma.value.shape)
                    layer.beta.value = self._take(it, layer.beta.value.shape)
                    layer.running_mean = self._take(it, layer.running_mean.shape)
                    layer.running_var = self._take(it, layer.running_var.shape)
        for p in self.parameters():
            p.grad = np.zeros_like(p.value)

    def _take(self, it, shape) -> np.ndarray:
        t = next(it)
        if t.shape != shape:
            raise ModelFileError(f"tensor shape {t.shape} does not match model {shape}")
        return t.astype(self.dtype)


def model_forward(model: Model, inputs, mode: str = "infer") -> np.ndarray:
    """Convenience wrapper accepting unbatched inputs; returns (2,) or (N, 2)."""
    if isinstance(inputs, np.ndarray):
        inputs = (inputs,)
    else:
        inputs = tuple(inputs)
    unbatched = inputs[0].ndim == 3
    if unbatched:
        inputs = tuple(x[None] for x in inputs)
    probs = model.forward(inputs, mode=mode)
    return probs[0] if unbatched else probs


# -- persistence -------------------------------------------------------------


def _spec_to_json(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["branches"] = [asdict(b) for b in spec.branches]
    return d


def _spec_from_json(d: dict) -> ModelSpec:
    branches = tuple(
        BranchSpec(
            in_shape=tuple(b["in_shape"]),
            conv1_out=b["conv1_out"],
            k1=tuple(b["k1"]),
            pool1=tuple(b["pool1"]),
            conv2_out=b["conv2_out"],
            k2=tuple(b["k2"]),
            pool2=tuple(b["pool2"]),
        )
        for b in d["branches"]
    )
    return ModelSpec(
        variant=d["variant"],
        branches=branches,
        fc_hidden=d["fc_hidden"],
        n_classes=d["n_classes"],
        dropout_p=d["dropout_p"],
        bn_momentum=d["bn_momentum"],
        bn_eps=d["bn_eps"],
    )


def save_model(path, model: Model, run_config: Optional[dict] = None) -> None:
    """Write the model file: RFPM magic, version, variant tag, spec JSON,
    tensors as f32 with shape headers, and a trailing CRC32 of the payload."""
    payload = io.BytesIO()
    payload.write(struct.pack("<H", MODEL_VERSION))
    payload.write(struct.pack("<B", _VARIANT_TAGS[PipelineVariant(model.spec.variant)]))
    meta = {
        "spec": _spec_to_json(model.spec),
        "dtype": model.dtype.name,
        "run_config": run_config or {},
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload.write(struct.pack("<I", len(blob)))
    payload.write(blob)
    for t in model.state_tensors():
        payload.write(struct.pack("<H", t.ndim))
        payload.write(struct.pack(f"<{t.ndim}H", *t.shape))
        payload.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_model(path) -> tuple[Model, dict]:
    """Read a model file back; returns (model, run_config)."""
    raw = open(path, "rb").read()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFileError(f"{path}: checksum mismatch")
    buf = io.BytesIO(body)
    (version,) = struct.unpack("<H", buf.read(2))
    if version != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    (tag,) = struct.unpack("<B", buf.read(1))
    if tag not in _TAG_VARIANTS:
        raise ModelFileError(f"{path}: unknown variant tag {tag}")
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    spec = _spec_from_json(meta["spec"])
    if spec.variant != _TAG_VARIANTS[tag].value:
        raise ModelFileError(f"{path}: variant tag disagrees with spec")
    tensors = []
    while True:
        head = buf.read(2)
        if head == b"":
            break
        (rank,) = struct.unpack("<H", head)
        dims = struct.unpack(f"<{rank}H", buf.read(2 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = buf.read(4 * n)
        if len(data) != 4 * n:
            raise ModelFileError(f"{path}: truncated tensor data")
        tensors.append(np.frombuffer(data, dtype="<f4").reshape(dims).copy())
    model = Model(spec, seed=0, dtype=np.dtype(meta.get("dtype", "float32")))
    model.load_state_tensors(tensors)
    return model, meta.get("run_config", {})
