"""Reading and writing the canonical binary CSI stream format.

File layout (little-endian), one or more segments back to back:

    magic   "CSI1"
    u16     n_sc
    u16     n_r
    u16     n_t
    u16     flags          bit0 = label present, bit1 = frame count present
    u8      label          0 / 1 / 255 (255 = unlabeled)
    u16+s   day_id         length-prefixed UTF-8
    [u32    frame_count]   only when flags bit1 is set
    frames  u64 timestamp_us, then n_sc*n_r*n_t coefficients as (f32 re,
            f32 im) pairs, subcarrier-major, then rx antenna, then tx antenna

A file without the frame-count field holds a single segment running to EOF.
Writers here always emit the count so several runs (alternating labels on
one collection day) can share a file unambiguously.

A JSON-lines import path carries the same fields: one header object
(n_sc/n_r/n_t/sample_interval_ms/label/day_id) starts each segment, followed
by one object per frame with "timestamp_us" and "h" as a flat list of
[re, im] pairs in the binary coefficient order.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO, Iterable, Iterator, Optional

import numpy as np

from .csi import CsiStream, StreamHeader

MAGIC = b"CSI1"
FLAG_LABEL = 0x01
FLAG_COUNT = 0x02
UNLABELED = 255


class ParseError(Exception):
    """Malformed stream file; message carries file offset context."""


def _frame_dtype(n_sc: int, n_r: int, n_t: int) -> np.dtype:
    return np.dtype([("ts", "<u8"), ("h", "<c8", (n_sc, n_r, n_t))])


def _infer_interval_ms(timestamps_us: np.ndarray) -> float:
    if len(timestamps_us) < 2:
        return 10.0
    return float(np.median(np.diff(timestamps_us[: min(len(timestamps_us), 64)])) / 1000.0)


def write_segment_header(
    fh: BinaryIO, hdr: StreamHeader, frame_count: Optional[int] = None
) -> None:
    flags = 0
    label = UNLABELED
    if hdr.label is not None:
        flags |= FLAG_LABEL
        label = int(hdr.label)
    if frame_count is not None:
        flags |= FLAG_COUNT
    day = hdr.day_id.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<HHHHB", hdr.n_sc, hdr.n_r, hdr.n_t, flags, label))
    fh.write(struct.pack("<H", len(day)))
    fh.write(day)
    if frame_count is not None:
        fh.write(struct.pack("<I", frame_count))


def write_frames(fh: BinaryIO, hdr: StreamHeader, timestamps_us: np.ndarray, h: np.ndarray) -> None:
    rec = np.empty(len(h), dtype=_frame_dtype(hdr.n_sc, hdr.n_r, hdr.n_t))
    rec["ts"] = np.asarray(timestamps_us, dtype=np.uint64)
    rec["h"] = h.astype(np.complex64, copy=False)
    fh.write(rec.tobytes())


def write_segment(fh: BinaryIO, stream: CsiStream, include_count: bool = True) -> None:
    write_segment_header(fh, stream.header, stream.n_frames if include_count else None)
    write_frames(fh, stream.header, stream.timestamps_us, stream.h)


def write_stream_file(path, streams: Iterable[CsiStream], include_count: bool = True) -> None:
    with open(path, "wb") as fh:
        for s in streams:
            write_segment(fh, s, include_count=include_count)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated file: wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def read_header(fh: BinaryIO, magic: Optional[bytes] = None) -> tuple[StreamHeader, int, Optional[int]]:
    """Parse one segment header; returns (header, flags, frame_count or None).

    ``magic`` may be passed in when the caller already consumed it while
    probing for a segment boundary.
    """
    if magic is None:
        magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r} (expected {MAGIC!r})")
    n_sc, n_r, n_t, flags, label = struct.unpack("<HHHHB", _read_exact(fh, 9, "header"))
    (day_len,) = struct.unpack("<H", _read_exact(fh, 2, "day_id length"))
    day_id = _read_exact(fh, day_len, "day_id").decode("utf-8")
    count = None
    if flags & FLAG_COUNT:
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "frame count"))
    lbl = label if (flags & FLAG_LABEL) and label != UNLABELED else None
    try:
        header = StreamHeader(n_sc=n_sc, n_r=n_r, n_t=n_t, label=lbl, day_id=day_id)
    except ValueError as exc:
        raise ParseError(f"invalid header at offset {fh.tell()}: {exc}") from exc
    return header, flags, count


def _records_to_stream(header: StreamHeader, rec: np.ndarray) -> CsiStream:
    ts = rec["ts"].astype(np.int64)
    hdr = StreamHeader(
        n_sc=header.n_sc,
        n_r=header.n_r,
        n_t=header.n_t,
        sample_interval_ms=_infer_interval_ms(ts),
        label=header.label,
        day_id=header.day_id,
    )
    try:
        return CsiStream(header=hdr, timestamps_us=ts, h=rec["h"])
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def iter_streams(fh: BinaryIO) -> Iterator[CsiStream]:
    """Yield every segment of an open stream file in order."""
    while True:
        magic = fh.read(4)
        if magic == b"":
            return
        header, flags, count = read_header(fh, magic=magic)
        dtype = _frame_dtype(header.n_sc, header.n_r, header.n_t)
        if count is not None:
            buf = _read_exact(fh, count * dtype.itemsize, f"{count} frames")
            rec = np.frombuffer(buf, dtype=dtype)
        else:
            buf = fh.read()
            if len(buf) % dtype.itemsize != 0:
                raise ParseError(
                    f"trailing {len(buf) % dtype.itemsize} bytes do not form a whole frame"
                )
            rec = np.frombuffer(buf, dtype=dtype)
        yield _records_to_stream(header, rec)


def read_stream_file(path) -> list[CsiStream]:
    with open(path, "rb") as fh:
        try:
            return list(iter_streams(fh))
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from None


def iter_stream_chunks(
    fh: BinaryIO, chunk_frames: int = 4096
) -> Iterator[tuple[int, StreamHeader, np.ndarray, np.ndarray]]:
    """Stream a file in bounded chunks: yields (segment_idx, header, ts, h).

    Suitable for very long segments and for live ingestion from a pipe; the
    header repeats on every chunk of the same segment.
    """
    seg = -1
    while True:
        magic = fh.read(4)
        if magic == b"":
            return
        seg += 1
        header, flags, count = read_header(fh, magic=magic)
        dtype = _frame_dtype(header.n_sc, header.n_r, header.n_t)
        remaining = count
        while remaining is None or remaining > 0:
            want = chunk_frames if remaining is None else min(chunk_frames, remaining)
            buf = fh.read(want * dtype.itemsize)
            if len(buf) == 0:
                break
            if len(buf) % dtype.itemsize != 0:
                raise ParseError("truncated frame in chunked read")
            rec = np.frombuffer(buf, dtype=dtype)
            if remaining is not None:
                remaining -= len(rec)
            yield seg, header, rec["ts"].astype(np.int64), rec["h"]
            if remaining is None and len(rec) < want:
                break


def read_jsonl_stream(path) -> list[CsiStream]:
    """Import the JSON-lines flavor of the canonical format."""
    streams: list[CsiStream] = []
    header: Optional[StreamHeader] = None
    ts_acc: list[int] = []
    h_acc: list[np.ndarray] = []

    def flush() -> None:
        nonlocal ts_acc, h_acc
        if header is None:
            return
        if not ts_acc:
            raise ParseError(f"{path}: segment with no frames")
        streams.append(
            CsiStream(
                header=header,
                timestamps_us=np.array(ts_acc, dtype=np.int64),
                h=np.stack(h_acc).astype(np.complex64),
            )
        )
        ts_acc, h_acc = [], []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if "n_sc" in obj:
                flush()
                try:
                    header = StreamHeader(
                        n_sc=int(obj["n_sc"]),
                        n_r=int(obj["n_r"]),
                        n_t=int(obj["n_t"]),
                        sample_interval_ms=float(obj.get("sample_interval_ms", 10.0)),
                        label=obj.get("label"),
                        day_id=str(obj.get("day_id", "")),
                    )
                except (KeyError, ValueError) as exc:
                    raise ParseError(f"{path}:{lineno}: bad header: {exc}") from None
            elif "timestamp_us" in obj:
                if header is None:
                    raise ParseError(f"{path}:{lineno}: frame before any header line")
                pairs = np.asarray(obj["h"], dtype=np.float64)
                expect = header.n_sc * header.n_r * header.n_t
                if pairs.shape != (expect, 2):
                    raise ParseError(
                        f"{path}:{lineno}: expected {expect} [re, im] pairs, got {pairs.shape}"
                    )
                h = (pairs[:, 0] + 1j * pairs[:, 1]).reshape(header.frame_shape)
                ts_acc.append(int(obj["timestamp_us"]))
                h_acc.append(h)
            else:
                raise ParseError(f"{path}:{lineno}: line is neither header nor frame")
    flush()
    if not streams:
        raise ParseError(f"{path}: no segments found")
    return streams


def dump_tensors(path, tensors: Iterable[np.ndarray]) -> None:
    """Debug dump: per tensor a shape header (rank u16, dims u16 each) then f32 data."""
    with open(path, "wb") as fh:
        for t in tensors:
            t = np.asarray(t)
            fh.write(struct.pack("<H", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}H", *t.shape))
            fh.write(t.astype("<f4", copy=False).tobytes())


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if head == b"":
                return out
            (rank,) = struct.unpack("<H", head)
            dims = struct.unpack(f"<{rank}H", _read_exact(fh, 2 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            buf = _read_exact(fh, 4 * n, "tensor data")
            out.append(np.frombuffer(buf, dtype="<f4").reshape(dims).copy())
