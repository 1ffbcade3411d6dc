"""Synthetic labeled CSI streams from a multipath scene model.

The channel for frame i is a sum over propagation paths
h_k = sum_l a_l * exp(-j*2*pi*f_k*tau_l(i)), with subcarrier frequencies
f_k = f_c + (k - n_sc/2)*delta_f. Static paths have fixed delays/gains and
fixed antenna phases; an optional human is one specular reflection off a
moving scatterer whose two-segment path length (tx -> scatterer -> rx)
drives both delay and Doppler. Antennas form uniform linear arrays with
half-wavelength spacing, so a path arriving with direction sine s puts a
phase of pi*q*s on antenna q.

Hardware impairments are applied on top of the clean channel: a residual
CFO rotation common to all antennas and subcarriers, a per-frame sampling
time offset rotating each subcarrier by exp(-j*2*pi*f_k*sto_i) (common to
all antennas), additive complex Gaussian estimation noise, and a slow
per-stream gain factor.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import streamio
from .csi import CsiStream, StreamHeader

SPEED_OF_LIGHT = 299792458.0
F_C_DEFAULT = 2.437e9  # 2.4 GHz band, channel 6
DELTA_F_DEFAULT = 312.5e3  # 20 MHz OFDM subcarrier spacing
MAX_SCATTERER_SPEED_MPS = 2.5
DELAY_GUARD_S = 800e-9

TX_POS_M = np.array([0.0, 0.0])
RX_POS_M = np.array([3.0, 0.0])
ROOM_X_M = (-1.0, 4.0)
ROOM_Y_M = (0.5, 4.0)


class SynthError(Exception):
    pass


class EmptyScene(SynthError):
    """A scene with zero propagation paths was requested."""


@dataclass
class SimConfig:
    """Knobs for scene generation and stream synthesis."""

    paths: tuple[int, int] = (4, 7)  # static path count range, inclusive
    delay_ns_max: float = 800.0
    gain_range: tuple[float, float] = (0.2, 1.0)
    reflection_gain_range: tuple[float, float] = (0.15, 0.5)
    speed_mps: float = 1.2  # fastest scatterer speed drawn
    cfo_hz: float = 2000.0  # residual CFO drawn from +/- this
    sto_ns_walk: float = 0.1  # per-frame STO random walk step
    noise_std: float = 0.03  # std of the complex estimation noise
    frames: int = 6400  # frames per synthesized run
    interval_ms: float = 10.0
    seed: int = 0
    n_sc: int = 56
    n_r: int = 3
    n_t: int = 3
    f_c: float = F_C_DEFAULT
    delta_f: float = DELTA_F_DEFAULT

    @property
    def frame_interval_s(self) -> float:
        return self.interval_ms / 1000.0

    def header(self, label: Optional[int] = None, day_id: str = "") -> StreamHeader:
        return StreamHeader(
            n_sc=self.n_sc,
            n_r=self.n_r,
            n_t=self.n_t,
            sample_interval_ms=self.interval_ms,
            label=label,
            day_id=day_id,
        )


def parse_config(path) -> SimConfig:
    """Read a plain key = value config file; unknown keys are rejected.

    Keys: paths (count or "lo-hi"), delay_ns_max, speed_mps, cfo_hz,
    sto_ns_walk, noise_std, frames, interval_ms, seed.
    """
    cfg = SimConfig()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SynthError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "paths":
            lo, _, hi = value.partition("-")
            cfg.paths = (int(lo), int(hi) if hi else int(lo))
        elif key in ("delay_ns_max", "speed_mps", "cfo_hz", "sto_ns_walk", "noise_std", "interval_ms"):
            setattr(cfg, key, float(value))
        elif key in ("frames", "seed"):
            setattr(cfg, key, int(value))
        else:
            raise SynthError(f"{path}:{lineno}: unknown key {key!r}")
    return cfg


@dataclass(frozen=True)
class PathSet:
    """Static multipath geometry of one scene."""

    gains: np.ndarray  # complex (L,)
    delays_s: np.ndarray  # (L,), in [0, guard)
    aoa_sin: np.ndarray  # direction sine at the rx array, (L,)
    aod_sin: np.ndarray  # direction sine at the tx array, (L,)
    f_c: float = F_C_DEFAULT
    delta_f: float = DELTA_F_DEFAULT

    def __post_init__(self) -> None:
        if len(self.gains) < 1:
            raise EmptyScene("a scene needs at least one static path")
        if np.any(self.delays_s < 0) or np.any(self.delays_s >= DELAY_GUARD_S):
            raise ValueError(f"path delays must lie in [0, {DELAY_GUARD_S*1e9:.0f} ns)")


@dataclass(frozen=True)
class Trajectory:
    """Scatterer positions sampled at frame times, plus the link geometry."""

    positions_m: np.ndarray  # (n, 2)
    tx_pos_m: np.ndarray
    rx_pos_m: np.ndarray
    reflection_gain: float
    frame_interval_s: float

    def __post_init__(self) -> None:
        step = np.linalg.norm(np.diff(self.positions_m, axis=0), axis=1)
        if step.size and step.max() > MAX_SCATTERER_SPEED_MPS * self.frame_interval_s * (1 + 1e-9):
            raise ValueError(
                f"scatterer speed {step.max() / self.frame_interval_s:.2f} m/s exceeds "
                f"{MAX_SCATTERER_SPEED_MPS} m/s"
            )

    def path_length_m(self) -> np.ndarray:
        d_tx = np.linalg.norm(self.positions_m - self.tx_pos_m, axis=1)
        d_rx = np.linalg.norm(self.positions_m - self.rx_pos_m, axis=1)
        return d_tx + d_rx


@dataclass(frozen=True)
class Impairments:
    """Receiver-side nuisances; sto_s may be a per-frame array."""

    cfo_hz: float = 0.0
    sto_s: Union[float, np.ndarray] = 0.0
    noise_std: float = 0.0
    amp_drift: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def subcarrier_freqs(n_sc: int, f_c: float = F_C_DEFAULT, delta_f: float = DELTA_F_DEFAULT) -> np.ndarray:
    return f_c + (np.arange(n_sc) - n_sc / 2) * delta_f


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_static_scene(config: SimConfig, rng_seed) -> PathSet:
    """Draw a random static scene; deterministic for a given seed."""
    rng = _as_rng(rng_seed)
    lo, hi = config.paths
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        raise EmptyScene("requested a scene with 0 paths")
    # Strongest path first with the shortest delay, echoing a decaying profile.
    mags = np.sort(rng.uniform(*config.gain_range, n))[::-1]
    phases = rng.uniform(-np.pi, np.pi, n)
    delays = np.sort(rng.uniform(0, config.delay_ns_max * 1e-9, n))
    return PathSet(
        gains=mags * np.exp(1j * phases),
        delays_s=delays,
        aoa_sin=rng.uniform(-1, 1, n),
        aod_sin=rng.uniform(-1, 1, n),
        f_c=config.f_c,
        delta_f=config.delta_f,
    )


def gen_trajectory(
    config: SimConfig,
    n_frames: int,
    rng_seed,
    tx_pos_m: np.ndarray = TX_POS_M,
    rx_pos_m: np.ndarray = RX_POS_M,
) -> Trajectory:
    """Random-waypoint walk inside the room box, sampled at frame times."""
    rng = _as_rng(rng_seed)
    dt = config.frame_interval_s
    lo = np.array([ROOM_X_M[0], ROOM_Y_M[0]])
    hi = np.array([ROOM_X_M[1], ROOM_Y_M[1]])
    pos = rng.uniform(lo, hi)
    out = np.empty((n_frames, 2))
    i = 0
    while i < n_frames:
        target = rng.uniform(lo, hi)
        speed = rng.uniform(0.3, max(0.31, config.speed_mps))
        leg = target - pos
        dist = float(np.linalg.norm(leg))
        steps = max(1, int(np.ceil(dist / (speed * dt))))
        step_vec = leg / steps
        for _ in range(min(steps, n_frames - i)):
            pos = pos + step_vec
            out[i] = pos
            i += 1
            if i == n_frames:
                break
    return Trajectory(
        positions_m=out,
        tx_pos_m=np.asarray(tx_pos_m, dtype=float),
        rx_pos_m=np.asarray(rx_pos_m, dtype=float),
        reflection_gain=float(rng.uniform(*config.reflection_gain_range)),
        frame_interval_s=dt,
    )


def make_impairments(config: SimConfig, n_frames: int, rng_seed, cfo_hz: Optional[float] = None) -> Impairments:
    rng = _as_rng(rng_seed)
    if cfo_hz is None:
        cfo_hz = float(rng.uniform(-config.cfo_hz, config.cfo_hz))
    sto = np.cumsum(rng.normal(0.0, config.sto_ns_walk * 1e-9, n_frames))
    return Impairments(
        cfo_hz=cfo_hz,
        sto_s=sto,
        noise_std=config.noise_std,
        amp_drift=float(rng.uniform(0.7, 1.3)),
    )


def _static_channel(paths: PathSet, n_sc: int, n_r: int, n_t: int) -> np.ndarray:
    f_k = subcarrier_freqs(n_sc, paths.f_c, paths.delta_f)
    delay_ph = np.exp(-2j * np.pi * paths.delays_s[:, None] * f_k[None, :])  # (L, n_sc)
    q = np.arange(n_r)
    p = np.arange(n_t)
    spatial = np.exp(
        1j * np.pi * (q[None, :, None] * paths.aoa_sin[:, None, None]
                      + p[None, None, :] * paths.aod_sin[:, None, None])
    )  # (L, n_r, n_t)
    return np.einsum("l,lk,lqp->kqp", paths.gains, delay_ph, spatial)


def _human_channel(
    paths: PathSet, traj: Trajectory, frame_slice: slice, n_sc: int, n_r: int, n_t: int
) -> np.ndarray:
    pos = traj.positions_m[frame_slice]
    f_k = subcarrier_freqs(n_sc, paths.f_c, paths.delta_f)
    to_tx = pos - traj.tx_pos_m
    to_rx = pos - traj.rx_pos_m
    d_tx = np.linalg.norm(to_tx, axis=1)
    d_rx = np.linalg.norm(to_rx, axis=1)
    tau = (d_tx + d_rx) / SPEED_OF_LIGHT
    if np.any(tau >= DELAY_GUARD_S):
        raise SynthError("scatterer path delay exceeds the guard assumption")
    delay_ph = np.exp(-2j * np.pi * tau[:, None] * f_k[None, :])  # (n, n_sc)
    # Arrays lie along the x axis: direction sine = x component of the unit vector.
    sin_rx = to_rx[:, 0] / d_rx
    sin_tx = to_tx[:, 0] / d_tx
    q = np.arange(n_r)
    p = np.arange(n_t)
    spatial = np.exp(
        1j * np.pi * (q[None, :, None] * sin_rx[:, None, None]
                      + p[None, None, :] * sin_tx[:, None, None])
    )  # (n, n_r, n_t)
    return traj.reflection_gain * delay_ph[:, :, None, None] * spatial[:, None, :, :]


def synth_frames(
    paths: PathSet,
    traj: Optional[Trajectory],
    imp: Impairments,
    timestamps_us: np.ndarray,
    frame_slice: slice,
    header: StreamHeader,
    rng: Optional[np.random.Generator],
    active_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Channel arrays for a contiguous slice of frames (chunked synthesis)."""
    n_sc, n_r, n_t = header.frame_shape
    n = len(timestamps_us)
    h = np.broadcast_to(_static_channel(paths, n_sc, n_r, n_t), (n, n_sc, n_r, n_t)).copy()
    if traj is not None:
        human = _human_channel(paths, traj, frame_slice, n_sc, n_r, n_t)
        if active_mask is not None:
            human = human * np.asarray(active_mask, dtype=float)[:, None, None, None]
        h += human
    t_s = np.asarray(timestamps_us, dtype=np.float64) / 1e6
    if imp.cfo_hz != 0.0:
        h *= np.exp(2j * np.pi * imp.cfo_hz * t_s)[:, None, None, None]
    sto = np.asarray(imp.sto_s, dtype=np.float64)
    if np.any(sto != 0.0):
        sto_frames = sto[frame_slice] if sto.ndim else np.full(n, float(sto))
        f_k = subcarrier_freqs(n_sc, paths.f_c, paths.delta_f)
        h *= np.exp(-2j * np.pi * f_k[None, :] * sto_frames[:, None])[:, :, None, None]
    if imp.noise_std > 0.0:
        if rng is None:
            raise SynthError("noise_std > 0 requires an rng")
        scale = imp.noise_std / np.sqrt(2.0)
        h += scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    if imp.amp_drift != 1.0:
        h *= imp.amp_drift
    return h


def synth_csi_series(
    paths: PathSet,
    traj: Optional[Trajectory],
    imp: Impairments,
    n_frames: int,
    frame_interval_s: float,
    header: StreamHeader,
    rng_seed=None,
    t0_us: int = 0,
    active_mask: Optional[np.ndarray] = None,
) -> CsiStream:
    """Synthesize one labeled run; label is 1 iff a trajectory is present."""
    rng = _as_rng(rng_seed) if rng_seed is not None else None
    iv_us = int(round(frame_interval_s * 1e6))
    ts = t0_us + np.arange(n_frames, dtype=np.int64) * iv_us
    h = synth_frames(paths, traj, imp, ts, slice(0, n_frames), header, rng, active_mask)
    hdr = dataclasses.replace(header, label=0 if traj is None else 1)
    return CsiStream(header=hdr, timestamps_us=ts, h=h)


def synth_stream_to_file(
    fh,
    paths: PathSet,
    traj: Optional[Trajectory],
    imp: Impairments,
    n_frames: int,
    frame_interval_s: float,
    header: StreamHeader,
    rng_seed=None,
    t0_us: int = 0,
    active_mask: Optional[np.ndarray] = None,
    chunk_frames: int = 10000,
) -> int:
    """Chunked synthesis straight to an open file; returns the last timestamp."""
    rng = _as_rng(rng_seed) if rng_seed is not None else None
    iv_us = int(round(frame_interval_s * 1e6))
    hdr = dataclasses.replace(header, label=0 if traj is None else 1)
    streamio.write_segment_header(fh, hdr, n_frames)
    last_ts = t0_us
    for start in range(0, n_frames, chunk_frames):
        stop = min(start + chunk_frames, n_frames)
        ts = t0_us + np.arange(start, stop, dtype=np.int64) * iv_us
        mask = active_mask[start:stop] if active_mask is not None else None
        h = synth_frames(paths, traj, imp, ts, slice(start, stop), hdr, rng, mask)
        streamio.write_frames(fh, hdr, ts, h)
        last_ts = int(ts[-1])
    return last_ts


def gen_dataset(
    out_dir,
    scenes: int,
    windows_per_label: int,
    config: SimConfig,
    seed: int,
    window_frames: int = 128,
    windows_per_run: int = 50,
    run_gap_s: float = 2.0,
) -> list[Path]:
    """Write one stream file per scene with alternating label-0/label-1 runs.

    Each scene gets fresh geometry and impairments plus a unique day_id, so
    scenes act as disjoint collection days for train/test splits. Counts are
    exact: every file holds windows_per_label non-overlapping windows per
    label. Deterministic (byte-identical files) for a given seed.
    """
    if scenes < 1 or windows_per_label < 1:
        raise ValueError("scenes and windows_per_label must be positive")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(exist_ok=True)  # parent must exist; surface a clear error
    except OSError as exc:
        raise SynthError(f"cannot create output directory {out_dir}: {exc}") from exc
    paths_out: list[Path] = []
    for s in range(scenes):
        rng = np.random.default_rng([seed, s])
        day_id = f"day{s:02d}"
        scene = gen_static_scene(config, rng)
        base_cfo = float(rng.uniform(-config.cfo_hz, config.cfo_hz))
        day_amp = float(rng.uniform(0.7, 1.3))
        # Runs alternate human-free / human-motion, mirroring collection days.
        remaining = {0: windows_per_label, 1: windows_per_label}
        t0 = 0
        path = out_dir / f"{day_id}.csi"
        with open(path, "wb") as fh:
            while remaining[0] > 0 or remaining[1] > 0:
                for label in (0, 1):
                    take = min(windows_per_run, remaining[label])
                    if take == 0:
                        continue
                    n = take * window_frames
                    # CFO drifts slowly across runs; constant within one.
                    imp = Impairments(
                        cfo_hz=base_cfo + float(rng.uniform(-25.0, 25.0)),
                        sto_s=np.cumsum(rng.normal(0.0, config.sto_ns_walk * 1e-9, n)),
                        noise_std=config.noise_std,
                        amp_drift=day_amp * float(rng.uniform(0.97, 1.03)),
                    )
                    traj = gen_trajectory(config, n, rng) if label else None
                    stream = synth_csi_series(
                        scene, traj, imp, n, config.frame_interval_s,
                        config.header(day_id=day_id), rng_seed=rng, t0_us=t0,
                    )
                    streamio.write_segment(fh, stream)
                    t0 = int(stream.timestamps_us[-1]) + int(run_gap_s * 1e6)
                    remaining[label] -= take
        paths_out.append(path)
    return paths_out
