"""Stream front end: primary band-pass filter, frame shaper, channel adaptation.

The shaper cuts each channel's sample stream into overlapping frames of
``frame_size`` samples.  Frame ``n`` starts at ``n * frame_size /
overlap_factor`` and spans ``frame_size`` samples, so ``overlap_factor=1``
tiles the stream and larger factors slide the window in fractional steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

from . import SAMPLE_RATE_HZ, NYQUIST_HZ
from .errors import ConfigurationError


@dataclass
class IntensityStream:
    """Channel-major sample matrix in ADC digital levels (DL)."""

    samples: np.ndarray  # (channels, n_samples) float64
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_count(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class FrameShaperConfig:
    frame_size: int = 2048   # ~1.23 s at 1666 Hz
    overlap_factor: int = 2

    def __post_init__(self):
        if self.frame_size <= 0:
            raise ConfigurationError("frame_size must be positive")
        if self.overlap_factor not in range(1, 9):
            raise ConfigurationError("overlap_factor must be an integer in 1..8")
        if self.frame_size % self.overlap_factor != 0:
            raise ConfigurationError("frame_size must be divisible by overlap_factor")

    @property
    def step(self) -> int:
        return self.frame_size // self.overlap_factor


@dataclass
class IntensityFrame:
    frame_index: int
    channel_index: int
    samples: np.ndarray  # (frame_size,)


@dataclass(frozen=True)
class ChannelAdaptState:
    """Per-channel running mean/variance, updated by exponential averaging.

    ``decay`` is the per-frame EMA weight; 0 freezes the statistics.  The
    first update after construction snaps to the observed frame statistics
    so cold starts do not pass a long transient downstream.
    """

    mean: float = 0.0
    var: float = 1.0
    decay: float = 0.05
    warm: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigurationError("decay must lie in [0, 1]")
        if self.var < 0.0:
            raise ConfigurationError("variance must be non-negative")


VAR_EPS = 1e-12


def frame_bounds(n: int, cfg: FrameShaperConfig) -> tuple[int, int]:
    """First and last sample index covered by frame ``n``."""
    k_b = n * cfg.step
    return k_b, k_b + cfg.frame_size - 1


def frame_count(n_samples: int, cfg: FrameShaperConfig) -> int:
    if n_samples < cfg.frame_size:
        return 0
    return (n_samples - cfg.frame_size) // cfg.step + 1


def primary_filter(stream: IntensityStream, band=(5.0, 800.0)) -> IntensityStream:
    """Zero-phase band-pass over every channel.

    Forward-backward second-order sections keep the output aligned with the
    input, so frame boundaries stay consistent with ground-truth marks.
    """
    f_lo, f_hi = band
    if not (0.0 <= f_lo < f_hi <= NYQUIST_HZ):
        raise ConfigurationError(
            f"band must satisfy 0 <= lo < hi <= {NYQUIST_HZ:.0f} Hz, got {band}"
        )
    sos = signal.butter(4, [f_lo, f_hi], btype="bandpass",
                        fs=stream.sample_rate_hz, output="sos")
    filtered = signal.sosfiltfilt(sos, stream.samples, axis=1)
    return IntensityStream(filtered, stream.sample_rate_hz)


def shape_frames(stream: IntensityStream, cfg: FrameShaperConfig) -> list[list[IntensityFrame]]:
    """Cut every channel into frames; returns ``frames[channel][n]``.

    Streams shorter than one frame yield empty per-channel lists.
    """
    total = frame_count(stream.sample_count, cfg)
    out = []
    for l in range(stream.channel_count):
        row = stream.samples[l]
        frames = []
        for n in range(total):
            k_b, k_e = frame_bounds(n, cfg)
            frames.append(IntensityFrame(n, l, row[k_b:k_e + 1]))
        out.append(frames)
    return out


def frame_matrix(stream: IntensityStream, cfg: FrameShaperConfig) -> np.ndarray:
    """All frames of all channels as one array of shape (channels, n_frames, frame_size).

    View-based companion to :func:`shape_frames` for batch feature work.
    """
    total = frame_count(stream.sample_count, cfg)
    if total == 0:
        return np.empty((stream.channel_count, 0, cfg.frame_size))
    windows = np.lib.stride_tricks.sliding_window_view(
        stream.samples, cfg.frame_size, axis=1)
    return windows[:, ::cfg.step][:, :total]


def adapt_normalize(frame: IntensityFrame, state: ChannelAdaptState):
    """Standardize a frame by its channel's running statistics.

    Returns the normalized frame and the updated state.  A channel whose
    running variance collapses below ``VAR_EPS`` yields zeros but still
    updates, so it recovers once real signal returns.
    """
    x = np.asarray(frame.samples, dtype=np.float64)
    m = float(x.mean())
    v = float(x.var())
    if state.decay == 0.0:
        new = state
    elif not state.warm:
        new = replace(state, mean=m, var=v, warm=True)
    else:
        d = state.decay
        new = replace(state,
                      mean=(1.0 - d) * state.mean + d * m,
                      var=(1.0 - d) * state.var + d * v)
    if new.var < VAR_EPS:
        out = np.zeros_like(x)
    else:
        out = (x - new.mean) / np.sqrt(new.var)
    return IntensityFrame(frame.frame_index, frame.channel_index, out), new


def adapt_channel(frames: np.ndarray, decay: float = 0.05) -> np.ndarray:
    """Run the adaptation filter over one channel's frame matrix (n_frames, frame_size)."""
    state = ChannelAdaptState(decay=decay)
    out = np.empty_like(frames, dtype=np.float64)
    for n in range(frames.shape[0]):
        f, state = adapt_normalize(IntensityFrame(n, 0, frames[n]), state)
        out[n] = f.samples
    return out
