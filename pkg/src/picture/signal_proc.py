"""RF frames and their 3-channel (RF, quadrature, envelope) representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RfFrame:
    """Raw RF data, rows are axial samples and columns are A-lines."""

    samples: np.ndarray
    sampling_freq: float = 40.0  # MHz
    center_freq: float = 8.0  # MHz
    lateral_pitch: float = 1.0  # mm

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("RF samples must be a 2D raster")
        if not np.all(np.isfinite(s)):
            raise ValueError("RF samples must be finite")
        if not self.sampling_freq > 2 * self.center_freq:
            raise ValueError(
                f"sampling frequency {self.sampling_freq} MHz does not resolve "
                f"a {self.center_freq} MHz carrier"
            )
        object.__setattr__(self, "samples", s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape


@dataclass(frozen=True)
class MultiChannelFrame:
    ch_rf: np.ndarray
    ch_imag: np.ndarray
    ch_env: np.ndarray
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ch_rf.shape

    def stack(self) -> np.ndarray:
        """Channels as one ``(3, rows, cols)`` array."""
        return np.stack([self.ch_rf, self.ch_imag, self.ch_env])

    @classmethod
    def from_stack(cls, arr, scale=(1.0, 1.0, 1.0)) -> "MultiChannelFrame":
        return cls(arr[0], arr[1], arr[2], tuple(scale))


def _one_sided_weights(n: int) -> np.ndarray:
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return h


def analytic_signal(x, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of the analytic signal along ``axis``.

    The spectrum is made one-sided (DC and Nyquist bins kept, positive bins
    doubled, negative bins zeroed) without zero padding, so the output has
    the input length and the real part is the input itself.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n < 4:
        raise ValueError(f"signal length {n} < 4")
    spec = np.fft.fft(x, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n
    z = np.fft.ifft(spec * _one_sided_weights(n).reshape(shape), axis=axis)
    return x.copy(), z.imag


def _p99_scale(ch: np.ndarray) -> float:
    if not np.any(ch):
        return 1.0
    return float(max(np.percentile(np.abs(ch), 99.0), 1e-12))


def build_channels(f: RfFrame, norm="p99") -> MultiChannelFrame:
    """Column-wise analytic signal of ``f`` as a normalized 3-channel frame.

    ``norm`` is either ``"p99"`` (divide each channel by its own 99th
    percentile absolute value), ``None`` (no scaling) or an explicit
    ``(rf, imag, env)`` triple of scales, e.g. taken from the pre-compression
    frame so that both frames of a pair share one scaling.
    """
    rf, imag = analytic_signal(f.samples, axis=0)
    env = np.hypot(rf, imag)
    if norm is None:
        scale = (1.0, 1.0, 1.0)
    elif isinstance(norm, str):
        if norm != "p99":
            raise ValueError(f"unknown normalization {norm!r}")
        scale = (_p99_scale(rf), _p99_scale(imag), _p99_scale(env))
    else:
        scale = tuple(float(s) for s in norm)
        if len(scale) != 3 or min(scale) <= 0:
            raise ValueError("explicit scales must be three positive numbers")
    return MultiChannelFrame(rf / scale[0], imag / scale[1], env / scale[2], scale)
