"""Calibrated complex-baseband jamming synthesis.

Five jamming primitives (single tone, multi tone, linear chirp, gated
pulse train, partial-band noise), pairwise compound mixing with a power
ratio, and AWGN injection at a target jamming-to-noise ratio.  All
outputs are complex baseband sample sequences with exactly calibrated
power so downstream JNR levels mean what they say.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import signal as sp_signal


@dataclass(frozen=True)
class SampleClock:
    """Sampling grid shared by every signal in a run."""

    sample_rate_hz: float
    num_samples: int

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.num_samples < 2:
            raise ValueError(f"num_samples must be >= 2, got {self.num_samples}")

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2.0


@dataclass
class ComplexSignal:
    """Fixed-length complex baseband IQ sequence on a known clock."""

    samples: np.ndarray
    clock: SampleClock

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or len(self.samples) != self.clock.num_samples:
            raise ValueError(
                f"expected {self.clock.num_samples} samples, got shape {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples.view(np.float64))):
            raise ValueError("signal contains non-finite samples")


@dataclass(frozen=True)
class SingleTone:
    """Continuous-wave tone: constant amplitude at a fixed carrier offset."""

    power: float
    carrier_offset_hz: float
    phase_rad: float = 0.0

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be >= 0")


@dataclass(frozen=True)
class MultiTone:
    """Superposition of equal-power tones at distinct frequencies."""

    power: float
    tones: tuple  # of (freq_hz, phase_rad) pairs

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if len(self.tones) == 0:
            raise ValueError("tone list must be nonempty")
        freqs = [f for f, _ in self.tones]
        if len(set(freqs)) != len(freqs):
            raise ValueError("tone frequencies must be pairwise distinct")


@dataclass(frozen=True)
class LinearChirp:
    """Periodic linear frequency sweep (sawtooth chirp)."""

    power: float
    start_freq_hz: float
    sweep_bandwidth_hz: float
    sweep_period_s: float

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if self.sweep_bandwidth_hz <= 0:
            raise ValueError("sweep_bandwidth_hz must be > 0")
        if self.sweep_period_s <= 0:
            raise ValueError("sweep_period_s must be > 0")

    @property
    def chirp_rate_hz_per_s(self) -> float:
        return self.sweep_bandwidth_hz / self.sweep_period_s


@dataclass(frozen=True)
class PulseTrain:
    """Gated sinusoid: carrier on for pw samples out of every pri samples.

    ``power`` is the on-interval (peak) power; average power is
    power * pw / pri.
    """

    power: float
    carrier_offset_hz: float
    pri_samples: int
    pw_samples: int

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if self.pri_samples < 1 or self.pw_samples < 1:
            raise ValueError("pri_samples and pw_samples must be positive")
        if self.pw_samples > self.pri_samples:
            raise ValueError(
                f"pulse width {self.pw_samples} exceeds repetition interval {self.pri_samples}"
            )

    @property
    def duty_cycle(self) -> float:
        return self.pw_samples / self.pri_samples


@dataclass(frozen=True)
class PartialBandNoise:
    """Band-limited Gaussian noise: shaped white noise at a center offset."""

    power: float
    center_offset_hz: float
    bandwidth_hz: float
    filter_order: int = 6

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be > 0")
        if self.filter_order < 1:
            raise ValueError("filter_order must be >= 1")


PrimitiveSpec = Union[SingleTone, MultiTone, LinearChirp, PulseTrain, PartialBandNoise]

# Canonical nine compound classes: (label, primary kind, secondary kind).
COMPOUND_CLASSES = (
    "STJ_LFM",
    "STJ_Pulse",
    "STJ_PBNJ",
    "MTJ_LFM",
    "MTJ_Pulse",
    "MTJ_PBNJ",
    "LFM_Pulse",
    "LFM_PBNJ",
    "Pulse_PBNJ",
)

_KIND_CODES = {
    SingleTone: "STJ",
    MultiTone: "MTJ",
    LinearChirp: "LFM",
    PulseTrain: "Pulse",
    PartialBandNoise: "PBNJ",
}


def class_component_codes(class_label: str) -> tuple:
    """Split a compound class label into its (primary, secondary) codes."""
    if class_label not in COMPOUND_CLASSES:
        raise ValueError(f"unknown compound class {class_label!r}")
    primary, secondary = class_label.split("_", 1)
    return primary, secondary


@dataclass(frozen=True)
class CompoundSpec:
    """Two unit-power primitives mixed at a secondary/primary power ratio."""

    primary: PrimitiveSpec
    secondary: PrimitiveSpec
    power_ratio_db: float
    class_label: str

    def __post_init__(self) -> None:
        if not math.isfinite(self.power_ratio_db):
            raise ValueError("power_ratio_db must be finite")
        expect = class_component_codes(self.class_label)
        got = (_KIND_CODES[type(self.primary)], _KIND_CODES[type(self.secondary)])
        if got != expect:
            raise ValueError(
                f"class {self.class_label!r} expects components {expect}, got {got}"
            )


@dataclass(frozen=True)
class NoiseSpec:
    """AWGN level relative to the jamming power, in dB.  +inf disables noise."""

    jnr_db: float

    def __post_init__(self) -> None:
        if math.isnan(self.jnr_db):
            raise ValueError("jnr_db must not be NaN")


def _check_nyquist(freq_hz: float, clock: SampleClock, what: str) -> None:
    if abs(freq_hz) >= clock.nyquist_hz:
        raise ValueError(
            f"{what} {freq_hz} Hz is outside the alias-free band "
            f"(+/-{clock.nyquist_hz} Hz)"
        )


def synth_single_tone(spec: SingleTone, clock: SampleClock) -> ComplexSignal:
    """Complex exponential sqrt(P) * exp(i(2*pi*f*n/Fs + phi))."""
    _check_nyquist(spec.carrier_offset_hz, clock, "carrier offset")
    n = np.arange(clock.num_samples)
    phase = 2.0 * np.pi * spec.carrier_offset_hz * n / clock.sample_rate_hz + spec.phase_rad
    samples = math.sqrt(spec.power) * np.exp(1j * phase)
    return ComplexSignal(samples, clock)


def synth_multi_tone(spec: MultiTone, clock: SampleClock) -> ComplexSignal:
    """Sum of K tones, each carrying power/K."""
    n = np.arange(clock.num_samples)
    amp = math.sqrt(spec.power / len(spec.tones))
    samples = np.zeros(clock.num_samples, dtype=np.complex128)
    for freq_hz, phase_rad in spec.tones:
        _check_nyquist(freq_hz, clock, "tone frequency")
        samples += amp * np.exp(
            1j * (2.0 * np.pi * freq_hz * n / clock.sample_rate_hz + phase_rad)
        )
    return ComplexSignal(samples, clock)


def synth_chirp(spec: LinearChirp, clock: SampleClock) -> ComplexSignal:
    """Sawtooth linear sweep; the sweep phase resets every sweep period."""
    t = np.arange(clock.num_samples) / clock.sample_rate_hz
    tau = np.mod(t, spec.sweep_period_s)
    rate = spec.chirp_rate_hz_per_s
    phase = 2.0 * np.pi * (spec.start_freq_hz * tau + 0.5 * rate * tau * tau)
    samples = math.sqrt(spec.power) * np.exp(1j * phase)
    return ComplexSignal(samples, clock)


def synth_pulse_train(spec: PulseTrain, clock: SampleClock) -> ComplexSignal:
    """Carrier gated by an exact rectangular pulse train (off means zero)."""
    _check_nyquist(spec.carrier_offset_hz, clock, "carrier offset")
    n = np.arange(clock.num_samples)
    gate = (n % spec.pri_samples) < spec.pw_samples
    phase = 2.0 * np.pi * spec.carrier_offset_hz * n / clock.sample_rate_hz
    samples = np.where(gate, math.sqrt(spec.power) * np.exp(1j * phase), 0.0 + 0.0j)
    return ComplexSignal(samples, clock)


def synth_band_noise(
    spec: PartialBandNoise, clock: SampleClock, rng: np.random.Generator
) -> ComplexSignal:
    """White complex noise shaped by a low-pass filter, shifted, renormalized.

    The shaping filter is a Butterworth low-pass at cutoff bandwidth/2
    applied forward-only; the explicit final renormalization makes the
    filter's passband gain irrelevant to power calibration.
    """
    if spec.bandwidth_hz >= clock.sample_rate_hz:
        raise ValueError("bandwidth_hz must be below the sampling rate")
    _check_nyquist(spec.center_offset_hz, clock, "center offset")
    n = clock.num_samples
    white = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    cutoff_norm = (spec.bandwidth_hz / 2.0) / clock.nyquist_hz
    b, a = sp_signal.butter(spec.filter_order, cutoff_norm, btype="low")
    shaped = sp_signal.lfilter(b, a, white)
    if spec.center_offset_hz != 0.0:
        k = np.arange(n)
        shaped = shaped * np.exp(
            2j * np.pi * spec.center_offset_hz * k / clock.sample_rate_hz
        )
    realized = float(np.mean(np.abs(shaped) ** 2))
    if realized == 0.0:
        raise ValueError("shaped noise collapsed to zero power")
    samples = shaped * math.sqrt(spec.power / realized)
    return ComplexSignal(samples, clock)


def synth_primitive(
    spec: PrimitiveSpec, clock: SampleClock, rng: Optional[np.random.Generator] = None
) -> ComplexSignal:
    """Dispatch to the primitive synthesizer; rng is required only for noise."""
    if isinstance(spec, SingleTone):
        return synth_single_tone(spec, clock)
    if isinstance(spec, MultiTone):
        return synth_multi_tone(spec, clock)
    if isinstance(spec, LinearChirp):
        return synth_chirp(spec, clock)
    if isinstance(spec, PulseTrain):
        return synth_pulse_train(spec, clock)
    if isinstance(spec, PartialBandNoise):
        if rng is None:
            raise ValueError("partial-band noise synthesis requires an rng")
        return synth_band_noise(spec, clock, rng)
    raise TypeError(f"unknown primitive spec {type(spec).__name__}")


def measure_power(sig: ComplexSignal) -> float:
    """Time-averaged power (1/N) * sum(|x[n]|^2) in watts."""
    if len(sig.samples) == 0:
        raise ValueError("cannot measure power of an empty signal")
    return float(np.mean(np.abs(sig.samples) ** 2))


def pr_to_amplitude(pr_db: float) -> float:
    """Secondary/primary amplitude ratio for a power ratio in dB."""
    return 10.0 ** (pr_db / 20.0)


def mix_compound(
    spec: CompoundSpec, clock: SampleClock, rng: np.random.Generator
) -> ComplexSignal:
    """Normalized superposition (j1 + alpha*j2) / gamma at exactly unit power.

    Both components are synthesized at unit power before weighting; gamma
    is measured from the realized sum so the output power is unit even
    for correlated components.
    """
    primary = dataclasses.replace(spec.primary, power=1.0)
    secondary = dataclasses.replace(spec.secondary, power=1.0)
    j1 = synth_primitive(primary, clock, rng)
    j2 = synth_primitive(secondary, clock, rng)
    alpha = pr_to_amplitude(spec.power_ratio_db)
    mixture = j1.samples + alpha * j2.samples
    gamma = math.sqrt(float(np.mean(np.abs(mixture) ** 2)))
    if gamma == 0.0:
        raise ValueError("mixture has zero power; cannot normalize")
    return ComplexSignal(mixture / gamma, clock)


def add_awgn(
    sig: ComplexSignal, noise: NoiseSpec, rng: np.random.Generator
) -> ComplexSignal:
    """Add circularly symmetric complex Gaussian noise at the target JNR.

    Noise variance is P_J / 10^(JNR/10) with P_J measured from the input;
    jnr_db = +inf returns the signal unchanged.
    """
    if math.isinf(noise.jnr_db) and noise.jnr_db > 0:
        return ComplexSignal(sig.samples.copy(), sig.clock)
    power = measure_power(sig)
    if power <= 0.0:
        raise ValueError("JNR is undefined for a zero-power signal")
    sigma2 = power / (10.0 ** (noise.jnr_db / 10.0))
    n = sig.clock.num_samples
    awgn = math.sqrt(sigma2 / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return ComplexSignal(sig.samples + awgn, sig.clock)


# Randomization ranges for per-sample parameter draws.
TONE_OFFSET_MAX_HZ = 9.5e6
MTJ_TONE_COUNT_RANGE = (3, 6)
MTJ_TONE_SPACING_HZ = (1.5e6, 3.0e6)
CHIRP_BANDWIDTH_HZ = 10e6
CHIRP_PERIOD_S = 1e-3
PULSE_DUTY_CYCLE = 0.30
PULSE_PRI_DIVISOR = 6
NOISE_BANDWIDTH_FRACTION = (0.10, 0.25)


def draw_primitive(
    code: str, clock: SampleClock, rng: np.random.Generator
) -> PrimitiveSpec:
    """Draw one primitive spec with randomized parameters (unit power).

    Draw order within each branch is fixed so that a given rng state
    always yields the same spec.
    """
    if code == "STJ":
        carrier = rng.uniform(-TONE_OFFSET_MAX_HZ, TONE_OFFSET_MAX_HZ)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return SingleTone(power=1.0, carrier_offset_hz=carrier, phase_rad=phase)
    if code == "MTJ":
        count = int(rng.integers(MTJ_TONE_COUNT_RANGE[0], MTJ_TONE_COUNT_RANGE[1] + 1))
        spacing = rng.uniform(*MTJ_TONE_SPACING_HZ)
        span = (count - 1) * spacing
        max_center = TONE_OFFSET_MAX_HZ - span / 2.0
        center = rng.uniform(-max_center, max_center)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
        tones = tuple(
            (center + (k - (count - 1) / 2.0) * spacing, float(phases[k]))
            for k in range(count)
        )
        return MultiTone(power=1.0, tones=tones)
    if code == "LFM":
        return LinearChirp(
            power=1.0,
            start_freq_hz=-CHIRP_BANDWIDTH_HZ / 2.0,
            sweep_bandwidth_hz=CHIRP_BANDWIDTH_HZ,
            sweep_period_s=CHIRP_PERIOD_S,
        )
    if code == "Pulse":
        carrier = rng.uniform(-TONE_OFFSET_MAX_HZ, TONE_OFFSET_MAX_HZ)
        pri = max(1, clock.num_samples // PULSE_PRI_DIVISOR)
        pw = max(1, round(PULSE_DUTY_CYCLE * pri))
        return PulseTrain(
            power=1.0, carrier_offset_hz=carrier, pri_samples=pri, pw_samples=pw
        )
    if code == "PBNJ":
        frac = rng.uniform(*NOISE_BANDWIDTH_FRACTION)
        return PartialBandNoise(
            power=1.0, center_offset_hz=0.0, bandwidth_hz=frac * clock.sample_rate_hz
        )
    raise ValueError(f"unknown primitive code {code!r}")


def draw_compound(
    class_label: str,
    clock: SampleClock,
    rng: np.random.Generator,
    pr_range_db: tuple = (-3.0, 3.0),
) -> CompoundSpec:
    """Draw a full compound spec: both components plus a uniform PR draw."""
    primary_code, secondary_code = class_component_codes(class_label)
    primary = draw_primitive(primary_code, clock, rng)
    secondary = draw_primitive(secondary_code, clock, rng)
    pr_db = float(rng.uniform(pr_range_db[0], pr_range_db[1]))
    return CompoundSpec(
        primary=primary, secondary=secondary, power_ratio_db=pr_db, class_label=class_label
    )
