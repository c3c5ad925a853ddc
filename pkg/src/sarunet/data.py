"""Dataset container, frame selection, window assembly, normalization, and a
deterministic synthetic generator of advecting rain blobs.

Frame series are stored as a single ``[T, H, W]`` float32 array with interval
and unit metadata. Units: ``raw`` (accumulation per frame interval in
hundredths of a millimeter), ``binary`` (cloud masks in {0, 1}), ``norm``
(dimensionless, used for exported heatmaps).

The on-disk container ("NWDS") is bit-exact: magic ``NWDS``, u32
interval_minutes, u8 unit code (0=raw, 1=binary, 2=norm), u64 frame count,
then one T4v1 record of shape ``[1,1,H,W]`` per frame. Little-endian
throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, UsageError
from .tensor import Tensor4, read_t4, tensor, write_t4

__all__ = [
    "FrameSeries", "WindowSpec", "SampleBatch", "Window", "WindowDataset",
    "select_rainy", "crop_center", "crop_series", "make_windows",
    "normalization_scale", "normalize_array", "denormalize_array",
    "chronological_split", "synth_generate", "save_nwds", "load_nwds",
    "export_window_manifest",
]

_UNIT_CODES = {"raw": 0, "binary": 1, "norm": 2}
_CODE_UNITS = {v: k for k, v in _UNIT_CODES.items()}

# background cutoff for the synthetic generator: keeps radar-like true zeros
_SYNTH_FLOOR = 0.01


@dataclass
class FrameSeries:
    """Ordered single-channel frames with physical-unit metadata."""

    frames: np.ndarray                  # [T, H, W]
    interval_minutes: int
    unit: str
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise DimensionError(f"frames must be [T,H,W], got shape {self.frames.shape}")
        if self.unit not in _UNIT_CODES:
            raise UsageError(f"unit must be one of {sorted(_UNIT_CODES)}, got {self.unit!r}")
        if self.frames.size and self.frames.min() < 0:
            raise DataError("frame values must be >= 0")
        if self.unit == "binary":
            vals = np.unique(self.frames)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise DataError("binary series may contain only {0, 1}")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps)
            if ts.shape != (len(self.frames),) or np.any(np.diff(ts) <= 0):
                raise DataError("timestamps must be one strictly increasing value per frame")
            self.timestamps = ts

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, i: int) -> Tensor4:
        return tensor(self.frames[i][None, None])


@dataclass
class WindowSpec:
    """Input length and target offsets, both in frames."""

    input_frames: int
    target_offsets: tuple[int, ...]
    stride: int = 1

    def __post_init__(self):
        self.target_offsets = tuple(int(o) for o in self.target_offsets)
        if self.input_frames < 1:
            raise UsageError("input_frames must be >= 1")
        if not self.target_offsets or min(self.target_offsets) < 1:
            raise UsageError("target offsets must be positive")
        if self.stride < 1:
            raise UsageError("stride must be >= 1")


Window = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class SampleBatch:
    """Normalized input/target stacks sharing one scale factor."""

    inputs: Tensor4                     # [n, input_frames, H, W]
    targets: Tensor4                    # [n, len(offsets), H, W]
    scale: float
    unit: str


def select_rainy(series: FrameSeries, fraction: float = 0.5) -> np.ndarray:
    """Indices of frames where the share of strictly positive pixels is at
    least ``fraction`` (pixel comparison strict, fraction comparison >=)."""
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"fraction must lie in [0,1], got {fraction}")
    h, w = series.frame_shape
    share = (series.frames > 0).sum(axis=(1, 2)) / float(h * w)
    return np.flatnonzero(share >= fraction)


def crop_center(frame: Tensor4, size: int = 288) -> Tensor4:
    """Center crop with floor((dim - size)/2) offsets."""
    n, c, h, w = frame.shape
    if h < size or w < size:
        raise DimensionError(f"cannot crop {h}x{w} frame to {size}x{size}")
    oy = (h - size) // 2
    ox = (w - size) // 2
    return Tensor4(frame.data[:, :, oy:oy + size, ox:ox + size].copy(), _checked=True)


def crop_series(series: FrameSeries, size: int) -> FrameSeries:
    t, h, w = series.frames.shape
    if h < size or w < size:
        raise DimensionError(f"cannot crop {h}x{w} frames to {size}x{size}")
    oy = (h - size) // 2
    ox = (w - size) // 2
    return FrameSeries(series.frames[:, oy:oy + size, ox:ox + size].copy(),
                       series.interval_minutes, series.unit, series.timestamps)


def make_windows(series: FrameSeries, spec: WindowSpec,
                 selected: Optional[Iterable[int]] = None, *,
                 gate_inputs: bool = False, strict: bool = False) -> list[Window]:
    """Enumerate (input indices, target indices) windows.

    A window anchored at frame ``i`` consumes inputs ``i-input_frames+1 .. i``
    and targets ``i + offset`` for each offset; anchors advance by ``stride``.
    A window is kept iff all its target frames are selected (and, with
    ``gate_inputs``, all input frames too). ``selected=None`` keeps everything.
    ``strict`` raises instead of returning an empty list.
    """
    t = len(series)
    sel = None if selected is None else frozenset(int(i) for i in selected)
    max_off = max(spec.target_offsets)
    out: list[Window] = []
    for anchor in range(spec.input_frames - 1, t - max_off, spec.stride):
        targets = tuple(anchor + o for o in spec.target_offsets)
        if sel is not None:
            if not all(ti in sel for ti in targets):
                continue
            if gate_inputs and not all(ii in sel for ii in
                                       range(anchor - spec.input_frames + 1, anchor + 1)):
                continue
        inputs = tuple(range(anchor - spec.input_frames + 1, anchor + 1))
        out.append((inputs, targets))
    if strict and not out:
        raise DataError("window assembly produced an empty dataset "
                        f"(series length {t}, spec {spec})")
    return out


def normalization_scale(train_series: FrameSeries) -> float:
    """Scale factor from the training split only: max raw value (1.0 for
    binary data)."""
    if train_series.unit == "binary":
        return 1.0
    if len(train_series) == 0:
        raise DataError("cannot derive a normalization scale from an empty split")
    s = float(train_series.frames.max())
    if s <= 0.0:
        raise DataError("training split max is zero; data is degenerate")
    return s


def normalize_array(arr: np.ndarray, scale: float) -> np.ndarray:
    return (arr / np.float32(scale)).astype(np.float32)


def denormalize_array(arr: np.ndarray, scale: float) -> np.ndarray:
    return (arr * np.float32(scale)).astype(np.float32)


def chronological_split(series: FrameSeries,
                        ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
                        ) -> tuple[FrameSeries, FrameSeries, FrameSeries]:
    """Time-ordered train/val/test split (no shuffling across time)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"split ratios must sum to 1, got {ratios}")
    t = len(series)
    n_train = int(t * ratios[0])
    n_val = int(t * ratios[1])
    if n_train == 0 or n_val == 0 or t - n_train - n_val == 0:
        raise DataError(f"series of {t} frames is too short for a {ratios} split")
    parts = []
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, t)]
    for lo, hi in bounds:
        ts = series.timestamps[lo:hi] if series.timestamps is not None else None
        parts.append(FrameSeries(series.frames[lo:hi].copy(), series.interval_minutes,
                                 series.unit, ts))
    return tuple(parts)


class WindowDataset:
    """Windows over a series, materialized as normalized batches on demand."""

    def __init__(self, series: FrameSeries, windows: Sequence[Window], scale: float):
        if scale <= 0:
            raise DataError(f"normalization scale must be positive, got {scale}")
        self.series = series
        self.windows = list(windows)
        self.scale = float(scale)

    def __len__(self) -> int:
        return len(self.windows)

    def batch(self, idxs: Sequence[int]) -> SampleBatch:
        frames = self.series.frames
        xs = np.stack([frames[list(self.windows[i][0])] for i in idxs])
        ys = np.stack([frames[list(self.windows[i][1])] for i in idxs])
        return SampleBatch(
            inputs=Tensor4(normalize_array(xs, self.scale), _checked=True),
            targets=Tensor4(normalize_array(ys, self.scale), _checked=True),
            scale=self.scale, unit=self.series.unit)


# -- synthetic generator -------------------------------------------------------

def synth_generate(seed: int, n_frames: int, height: int, width: int,
                   n_blobs: int = 3, wind: tuple[float, float] = (1.0, 0.0),
                   growth: float = 1.0, jitter: float = 0.0,
                   amplitude: float = 120.0, interval_minutes: int = 5) -> FrameSeries:
    """Sum of Gaussian blobs advected by ``wind`` (px/frame, toroidal wrap)
    with multiplicative intensity drift ``growth`` per frame.

    Per-blob position, size and amplitude are jittered from the seeded
    generator; ``jitter > 0`` additionally perturbs each blob's per-frame
    displacement (and changes the draw sequence). Values below a fixed floor
    are clamped to zero so the background holds true zeros. Same seed, same
    arguments: bitwise identical output.
    """
    if height < 32 or width < 32:
        raise UsageError(f"synthetic frames must be at least 32x32, got {height}x{width}")
    if n_frames < 1 or n_blobs < 1:
        raise UsageError("n_frames and n_blobs must be >= 1")
    rng = np.random.default_rng(seed)
    cx = rng.uniform(0.15 * width, 0.85 * width, size=n_blobs)
    cy = rng.uniform(0.15 * height, 0.85 * height, size=n_blobs)
    sigma = rng.uniform(min(height, width) / 16.0, min(height, width) / 9.0, size=n_blobs)
    amp = rng.uniform(0.5, 1.5, size=n_blobs) * amplitude
    if jitter > 0.0:
        steps = rng.normal(0.0, jitter, size=(n_frames, n_blobs, 2))

    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    frames = np.empty((n_frames, height, width), dtype=np.float32)
    px, py = cx.copy(), cy.copy()
    gain = 1.0
    for t in range(n_frames):
        if t > 0:
            px = px + wind[0]
            py = py + wind[1]
            if jitter > 0.0:
                px = px + steps[t, :, 0]
                py = py + steps[t, :, 1]
            px %= width
            py %= height
            gain *= growth
        acc = np.zeros((height, width), dtype=np.float64)
        for b in range(n_blobs):
            r2 = (xs - px[b]) ** 2 + (ys - py[b]) ** 2
            acc += amp[b] * gain * np.exp(-r2 / (2.0 * sigma[b] ** 2))
        frame = acc.astype(np.float32)
        frame[frame < _SYNTH_FLOOR] = 0.0
        frames[t] = frame
    return FrameSeries(frames, interval_minutes, "raw")


# -- NWDS container --------------------------------------------------------------

_NWDS_MAGIC = b"NWDS"


def save_nwds(path, series: FrameSeries) -> None:
    with open(path, "wb") as f:
        f.write(_NWDS_MAGIC)
        f.write(struct.pack("<IBQ", series.interval_minutes,
                            _UNIT_CODES[series.unit], len(series)))
        for i in range(len(series)):
            write_t4(f, series.frames[i][None, None])


def load_nwds(path) -> FrameSeries:
    with open(path, "rb") as f:
        if f.read(4) != _NWDS_MAGIC:
            raise UsageError(f"{path}: not an NWDS container")
        interval, code, count = struct.unpack("<IBQ", f.read(13))
        if code not in _CODE_UNITS:
            raise UsageError(f"{path}: unknown unit code {code}")
        frames = [read_t4(f)[0, 0] for _ in range(count)]
    if not frames:
        raise DataError(f"{path}: container holds no frames")
    return FrameSeries(np.stack(frames), interval, _CODE_UNITS[code])


def export_window_manifest(windows: Sequence[Window], path) -> None:
    """CSV audit listing of assembled windows."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("window,input_start,input_end,target_indices\n")
        for i, (inp, tgt) in enumerate(windows):
            f.write(f"{i},{inp[0]},{inp[-1]},{';'.join(str(t) for t in tgt)}\n")
