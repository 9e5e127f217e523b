"""Dual-domain feature extraction: log-STFT images and Welch-PSD images.

A complex baseband signal becomes two fixed-size single-channel images in
[0, 1]: a time-frequency image (log-magnitude spectrogram, bicubic-resized)
and a rasterized Welch power-spectral-density curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import ComplexSignal

LOG_EPSILON = 1e-12
CLAMP_DB = 80.0

_STFT_WINDOWS = ("hann", "rectangular")
_WELCH_WINDOWS = ("hamming", "rectangular")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 128
    hop: int = 10
    fft_size: int = 4096
    window_kind: str = "hann"

    def __post_init__(self) -> None:
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if not 1 <= self.hop <= self.window_len:
            raise ValueError("hop must be in [1, window_len]")
        if self.fft_size < self.window_len:
            raise ValueError("fft_size must be >= window_len")
        if not _is_power_of_two(self.fft_size):
            raise ValueError("fft_size must be a power of two")
        if self.window_kind not in _STFT_WINDOWS:
            raise ValueError(f"window_kind must be one of {_STFT_WINDOWS}")


@dataclass(frozen=True)
class WelchConfig:
    segment_len: int = 2048
    overlap_fraction: float = 0.5
    fft_size: int = 4096
    window_kind: str = "hamming"

    def __post_init__(self) -> None:
        if self.segment_len < 2:
            raise ValueError("segment_len must be >= 2")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.fft_size < self.segment_len:
            raise ValueError("fft_size must be >= segment_len")
        if self.window_kind not in _WELCH_WINDOWS:
            raise ValueError(f"window_kind must be one of {_WELCH_WINDOWS}")

    @property
    def step(self) -> int:
        return max(1, round(self.segment_len * (1.0 - self.overlap_fraction)))


@dataclass
class Spectrogram:
    """Log-magnitude STFT in dB, frames along rows, bins along columns."""

    values_db: np.ndarray
    frame_times_s: np.ndarray
    bin_freqs_hz: np.ndarray


@dataclass
class PsdEstimate:
    """Two-sided Welch density over a monotonic frequency grid (W/Hz)."""

    power_density: np.ndarray
    freqs_hz: np.ndarray


@dataclass
class FeatureImage:
    """H x W single-channel image with values in [0, 1]."""

    pixels: np.ndarray
    kind: str  # "tfi" or "psd"

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D matrix")
        if self.kind not in ("tfi", "psd"):
            raise ValueError("kind must be 'tfi' or 'psd'")


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann taper 0.5*(1 - cos(2*pi*k/(n-1))), k = 0..n-1."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming taper 0.54 - 0.46*cos(2*pi*k/(n-1))."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def _make_window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        return hann_window(n)
    if kind == "hamming":
        return hamming_window(n)
    if kind == "rectangular":
        return np.ones(n)
    raise ValueError(f"unknown window kind {kind!r}")


def frame_count(num_samples: int, window_len: int, hop: int) -> int:
    return (num_samples - window_len) // hop + 1


def stft(sig: ComplexSignal, cfg: StftConfig, window: np.ndarray = None) -> np.ndarray:
    """Complex STFT matrix [frames x fft_size].

    Each row is the zero-padded DFT of one hop-strided windowed slice.
    ``window`` overrides the configured taper (used for oracle tests).
    """
    x = sig.samples
    if len(x) < cfg.window_len:
        raise ValueError(
            f"signal length {len(x)} is shorter than one window ({cfg.window_len})"
        )
    if window is None:
        window = _make_window(cfg.window_kind, cfg.window_len)
    elif len(window) != cfg.window_len:
        raise ValueError("window override length must equal window_len")
    frames = frame_count(len(x), cfg.window_len, cfg.hop)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(frames)[:, None]
    segments = x[idx] * window[None, :]
    return np.fft.fft(segments, n=cfg.fft_size, axis=1)


def log_magnitude(
    stft_matrix: np.ndarray,
    epsilon: float = LOG_EPSILON,
    frame_times_s: np.ndarray = None,
    bin_freqs_hz: np.ndarray = None,
) -> Spectrogram:
    """10*log10(|X|^2 + epsilon); the floor keeps every value finite."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    values = 10.0 * np.log10(np.abs(stft_matrix) ** 2 + epsilon)
    m, k = values.shape
    if frame_times_s is None:
        frame_times_s = np.arange(m, dtype=np.float64)
    if bin_freqs_hz is None:
        bin_freqs_hz = np.arange(k, dtype=np.float64)
    return Spectrogram(values, np.asarray(frame_times_s), np.asarray(bin_freqs_hz))


def _stft_log_magnitude_chunked(
    sig: ComplexSignal, cfg: StftConfig, epsilon: float, chunk: int = 256
) -> np.ndarray:
    """Log-magnitude STFT computed in frame blocks to bound peak memory."""
    x = sig.samples
    window = _make_window(cfg.window_kind, cfg.window_len)
    frames = frame_count(len(x), cfg.window_len, cfg.hop)
    out = np.empty((frames, cfg.fft_size), dtype=np.float64)
    base = np.arange(cfg.window_len)
    for start in range(0, frames, chunk):
        stop = min(start + chunk, frames)
        idx = base[None, :] + cfg.hop * np.arange(start, stop)[:, None]
        block = np.fft.fft(x[idx] * window[None, :], n=cfg.fft_size, axis=1)
        out[start:stop] = 10.0 * np.log10(np.abs(block) ** 2 + epsilon)
    return out


def welch_psd(sig: ComplexSignal, cfg: WelchConfig) -> PsdEstimate:
    """Welch estimate: averaged modified periodograms of overlapping segments.

    Density is normalized so the two-sided integral equals signal power
    for white input, independent of window shape or amplitude.
    """
    x = sig.samples
    fs = sig.clock.sample_rate_hz
    m = cfg.segment_len
    if len(x) < m:
        raise ValueError(f"signal length {len(x)} fits no full segment of {m}")
    window = _make_window(cfg.window_kind, m)
    norm = float(np.mean(np.abs(window) ** 2))  # absorbs window amplitude scaling
    step = cfg.step
    count = (len(x) - m) // step + 1
    idx = np.arange(m)[None, :] + step * np.arange(count)[:, None]
    spectra = np.fft.fft(x[idx] * window[None, :], n=cfg.fft_size, axis=1)
    density = np.mean(np.abs(spectra) ** 2, axis=0) / (m * norm * fs)
    freqs = np.fft.fftfreq(cfg.fft_size, d=1.0 / fs)
    order = np.fft.fftshift(np.arange(cfg.fft_size))
    return PsdEstimate(density[order], freqs[order])


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom weights (a = -0.5) for the 4 taps around offset t in [0,1)."""
    a = -0.5
    d = np.stack([1.0 + t, t, 1.0 - t, 2.0 - t])
    w = np.where(
        d <= 1.0,
        (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0,
        a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a,
    )
    return w


def _resample_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    src_len = arr.shape[axis]
    if src_len == out_len:
        return arr
    if out_len == 1:
        pos = np.array([(src_len - 1) / 2.0])
    else:
        pos = np.arange(out_len) * (src_len - 1) / (out_len - 1)
    base = np.floor(pos).astype(np.int64)
    t = pos - base
    weights = _cubic_weights(t)
    moved = np.moveaxis(arr, axis, 0)
    out = np.zeros((out_len,) + moved.shape[1:], dtype=np.float64)
    for tap in range(4):
        idx = np.clip(base + tap - 1, 0, src_len - 1)
        w = weights[tap].reshape((-1,) + (1,) * (moved.ndim - 1))
        out += w * moved[idx]
    return np.moveaxis(out, 0, axis)


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize with corner-aligned sampling."""
    if image.ndim != 2:
        raise ValueError("expected a 2-D image")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    return _resample_axis(_resample_axis(image, out_h, 0), out_w, 1)


def _normalize_clamped(values: np.ndarray, clamp_db: float) -> np.ndarray:
    """Min-max normalize to [0,1] after clamping to (max - clamp_db).

    A constant input (zero dynamic range) maps to a uniform 0.5.
    """
    vmax = float(values.max())
    clamped = np.maximum(values, vmax - clamp_db)
    vmin = float(clamped.min())
    if vmax == vmin:
        return np.full_like(values, 0.5, dtype=np.float64)
    return (clamped - vmin) / (vmax - vmin)


def spectrogram_to_image(
    spec: Spectrogram, side: int, clamp_db: float = CLAMP_DB
) -> FeatureImage:
    """Normalize and bicubic-resize to side x side.

    Rows run from the last frequency bin down to the first (so with a
    centered-spectrum input, high frequencies sit at the top); columns
    are time frames.
    """
    if spec.values_db.size == 0:
        raise ValueError("spectrogram is empty")
    normalized = _normalize_clamped(spec.values_db, clamp_db)
    oriented = normalized.T[::-1]
    pixels = np.clip(bicubic_resize(oriented, side, side), 0.0, 1.0)
    return FeatureImage(pixels, kind="tfi")


def psd_to_image(psd: PsdEstimate, side: int, clamp_db: float = CLAMP_DB) -> FeatureImage:
    """Rasterize the dB-scaled density as a connected 1-pixel polyline.

    Bins map linearly onto image columns (per-column max when several bins
    share a column); adjacent column heights are joined with vertical
    segments, so the curve is connected across the full width.
    """
    nbins = len(psd.power_density)
    if nbins == 0:
        raise ValueError("PSD estimate is empty")
    if nbins < side:
        raise ValueError(f"need at least {side} PSD bins to fill {side} columns")
    db = 10.0 * np.log10(np.maximum(psd.power_density, 0.0) + 1e-30)
    heights = _normalize_clamped(db, clamp_db)
    cols = (np.arange(nbins) * side) // nbins
    col_height = np.zeros(side)
    np.maximum.at(col_height, cols, heights)
    rows = np.rint((1.0 - col_height) * (side - 1)).astype(np.int64)
    pixels = np.zeros((side, side), dtype=np.float64)
    pixels[rows[0], 0] = 1.0
    for c in range(1, side):
        lo = min(rows[c - 1], rows[c])
        hi = max(rows[c - 1], rows[c])
        pixels[lo : hi + 1, c] = 1.0
    return FeatureImage(pixels, kind="psd")


def signal_features(
    sig: ComplexSignal,
    stft_cfg: StftConfig,
    welch_cfg: WelchConfig,
    side: int,
    epsilon: float = LOG_EPSILON,
    clamp_db: float = CLAMP_DB,
) -> tuple:
    """Full dual-domain pipeline: (TFI image, PSD image) for one signal."""
    log_mag = _stft_log_magnitude_chunked(sig, stft_cfg, epsilon)
    centered = np.fft.fftshift(log_mag, axes=1)
    frames = centered.shape[0]
    times = np.arange(frames) * stft_cfg.hop / sig.clock.sample_rate_hz
    freqs = np.fft.fftshift(
        np.fft.fftfreq(stft_cfg.fft_size, d=1.0 / sig.clock.sample_rate_hz)
    )
    tfi = spectrogram_to_image(Spectrogram(centered, times, freqs), side, clamp_db)
    psd = psd_to_image(welch_psd(sig, welch_cfg), side, clamp_db)
    return tfi, psd
