"""Synthesis calibration: exact powers, exact gating, exact mixing."""

import math

import numpy as np
import pytest

from jamlab import signals as S
from jamlab.seeding import derive_seed, make_rng

FS = 20e6
CLOCK = S.SampleClock(FS, 20000)


def small_clock(n=4):
    return S.SampleClock(FS, n)


class TestSampleClock:
    def test_duration_is_quotient(self):
        assert CLOCK.duration_s == 20000 / FS

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            S.SampleClock(0.0, 100)
        with pytest.raises(ValueError):
            S.SampleClock(FS, 1)


class TestSingleTone:
    def test_zero_frequency_identity(self):
        sig = S.synth_single_tone(S.SingleTone(4.0, 0.0, 0.0), small_clock(4))
        np.testing.assert_allclose(sig.samples, [2, 2, 2, 2], atol=1e-15)

    def test_quarter_rate_symmetry(self):
        sig = S.synth_single_tone(S.SingleTone(1.0, FS / 4, 0.0), small_clock(4))
        np.testing.assert_allclose(sig.samples, [1, 1j, -1, -1j], atol=1e-12)

    def test_power_and_dft_peak(self):
        sig = S.synth_single_tone(S.SingleTone(1.0, 3.7e6, 1.1), CLOCK)
        assert abs(S.measure_power(sig) - 1.0) < 1e-12
        spectrum = np.abs(np.fft.fft(sig.samples))
        peak_bin = int(np.argmax(spectrum))
        expected_bin = int(round(3.7e6 * CLOCK.num_samples / FS))
        assert peak_bin == expected_bin

    def test_rejects_aliased_carrier(self):
        with pytest.raises(ValueError, match="alias"):
            S.synth_single_tone(S.SingleTone(1.0, FS / 2, 0.0), CLOCK)


class TestMultiTone:
    def test_single_tone_degenerate(self):
        mtj = S.synth_multi_tone(S.MultiTone(2.0, ((1e6, 0.5),)), CLOCK)
        stj = S.synth_single_tone(S.SingleTone(2.0, 1e6, 0.5), CLOCK)
        np.testing.assert_allclose(mtj.samples, stj.samples, atol=1e-12)

    def test_conjugate_pair_cosine(self):
        spec = S.MultiTone(2.0, ((FS / 4, 0.0), (-FS / 4, 0.0)))
        sig = S.synth_multi_tone(spec, small_clock(8))
        expected = 2.0 * np.cos(np.pi * np.arange(8) / 2)
        np.testing.assert_allclose(sig.samples.real, expected, atol=1e-12)
        np.testing.assert_allclose(sig.samples.imag, 0.0, atol=1e-12)

    def test_integer_bin_power(self):
        # four tones on exact DFT bins: cross terms average to zero
        bins = [100, 300, 801, 1600]
        tones = tuple((b * FS / CLOCK.num_samples, 0.1 * k) for k, b in enumerate(bins))
        sig = S.synth_multi_tone(S.MultiTone(1.0, tones), CLOCK)
        assert abs(S.measure_power(sig) - 1.0) < 1e-10

    def test_duplicate_frequencies_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            S.MultiTone(1.0, ((1e6, 0.0), (1e6, 1.0)))

    def test_nyquist_energy_concentration(self):
        bins = [50, 207, 1333]
        tones = tuple((b * FS / CLOCK.num_samples, 0.0) for b in bins)
        sig = S.synth_multi_tone(S.MultiTone(1.0, tones), CLOCK)
        spectrum = np.abs(np.fft.fft(sig.samples)) ** 2
        in_bins = sum(spectrum[b] for b in bins)
        assert in_bins / spectrum.sum() >= 0.999


class TestChirp:
    def test_zero_bandwidth_limit_matches_tone(self):
        # vanishing sweep slope: phase reduces to a pure tone at the start freq
        chirp = S.synth_chirp(S.LinearChirp(1.0, 2e6, 1e-3, 1.0), CLOCK)
        tone = S.synth_single_tone(S.SingleTone(1.0, 2e6, 0.0), CLOCK)
        np.testing.assert_allclose(chirp.samples, tone.samples, atol=1e-6)

    def test_instantaneous_frequency_at_half_period(self):
        spec = S.LinearChirp(1.0, -5e6, 10e6, 1e-3)
        sig = S.synth_chirp(spec, CLOCK)
        phase = np.unwrap(np.angle(sig.samples))
        mid = CLOCK.num_samples // 2
        inst_freq = (phase[mid + 1] - phase[mid - 1]) / 2 * FS / (2 * np.pi)
        assert abs(inst_freq) < 1e3

    def test_constant_modulus(self):
        sig = S.synth_chirp(S.LinearChirp(2.5, -5e6, 10e6, 1e-3), CLOCK)
        np.testing.assert_allclose(np.abs(sig.samples), math.sqrt(2.5), atol=1e-12)

    def test_sweep_wraps_each_period(self):
        clock = S.SampleClock(FS, 4000)
        spec = S.LinearChirp(1.0, -5e6, 10e6, 1e-4)  # 2000 samples per period
        sig = S.synth_chirp(spec, clock)
        np.testing.assert_allclose(sig.samples[:2000], sig.samples[2000:], atol=1e-9)


class TestPulseTrain:
    def test_full_duty_matches_tone(self):
        pulse = S.synth_pulse_train(S.PulseTrain(1.0, 1e6, 10, 10), CLOCK)
        tone = S.synth_single_tone(S.SingleTone(1.0, 1e6, 0.0), CLOCK)
        np.testing.assert_allclose(pulse.samples, tone.samples, atol=1e-12)

    def test_exact_gating(self):
        sig = S.synth_pulse_train(S.PulseTrain(1.0, 0.0, 10, 3), small_clock(20))
        nonzero = np.flatnonzero(sig.samples)
        assert nonzero.tolist() == [0, 1, 2, 10, 11, 12]
        assert np.all(sig.samples[3:10] == 0.0)

    def test_duty_cycle_on_sample_count(self):
        pri = CLOCK.num_samples // 6
        pw = round(0.30 * pri)
        sig = S.synth_pulse_train(S.PulseTrain(1.0, 1e6, pri, pw), CLOCK)
        nonzero = int(np.count_nonzero(sig.samples))
        assert abs(nonzero - 0.30 * CLOCK.num_samples) <= pri

    def test_peak_power_semantics(self):
        sig = S.synth_pulse_train(S.PulseTrain(4.0, 0.0, 10, 3), small_clock(20))
        on = sig.samples[np.abs(sig.samples) > 0]
        np.testing.assert_allclose(np.abs(on) ** 2, 4.0, atol=1e-12)
        assert abs(S.measure_power(sig) - 4.0 * 0.3) < 1e-12

    def test_pw_longer_than_pri_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            S.PulseTrain(1.0, 0.0, 10, 11)


class TestBandNoise:
    def test_power_normalized_exactly(self):
        spec = S.PartialBandNoise(1.0, 0.0, 0.25 * FS)
        sig = S.synth_band_noise(spec, CLOCK, make_rng(1, "pbnj"))
        assert abs(S.measure_power(sig) - 1.0) < 1e-10

    def test_in_band_energy_fraction(self):
        spec = S.PartialBandNoise(1.0, 0.0, 0.25 * FS)
        sig = S.synth_band_noise(spec, CLOCK, make_rng(2, "pbnj"))
        spectrum = np.abs(np.fft.fft(sig.samples)) ** 2
        freqs = np.fft.fftfreq(CLOCK.num_samples, d=1.0 / FS)
        in_band = spectrum[np.abs(freqs) <= 2.5e6].sum()
        assert in_band / spectrum.sum() >= 0.90

    def test_seeded_determinism(self):
        spec = S.PartialBandNoise(1.0, 1e6, 3e6)
        a = S.synth_band_noise(spec, CLOCK, make_rng(7, "x"))
        b = S.synth_band_noise(spec, CLOCK, make_rng(7, "x"))
        assert np.array_equal(a.samples, b.samples)

    def test_zero_bandwidth_rejected(self):
        with pytest.raises(ValueError):
            S.PartialBandNoise(1.0, 0.0, 0.0)


class TestMeasurePower:
    def test_zero_signal(self):
        assert S.measure_power(S.ComplexSignal(np.zeros(4), small_clock(4))) == 0.0

    def test_unit_modulus(self):
        sig = S.ComplexSignal(np.array([1, 1j, -1, -1j]), small_clock(4))
        assert S.measure_power(sig) == 1.0

    def test_gaussian_variance(self):
        rng = make_rng(5, "power")
        samples = math.sqrt(2.0 / 2.0) * (
            rng.standard_normal(20000) + 1j * rng.standard_normal(20000)
        )
        sig = S.ComplexSignal(samples, CLOCK)
        assert abs(S.measure_power(sig) - 2.0) / 2.0 < 0.05


def make_compound(pr_db, class_label="STJ_LFM"):
    return S.CompoundSpec(
        primary=S.SingleTone(1.0, 2e6, 0.3),
        secondary=S.LinearChirp(1.0, -5e6, 10e6, 1e-3),
        power_ratio_db=pr_db,
        class_label=class_label,
    )


class TestMixCompound:
    def test_equal_power_normalization(self):
        sig = S.mix_compound(make_compound(0.0), CLOCK, make_rng(1, "mix"))
        assert abs(S.measure_power(sig) - 1.0) < 1e-12

    def test_amplitude_ratio_closed_form(self):
        assert abs(S.pr_to_amplitude(6.0206) - 2.0) < 1e-6
        assert abs(S.pr_to_amplitude(20 * math.log10(2.0)) - 2.0) < 1e-12

    def test_dominance_limit_correlation(self):
        sig = S.mix_compound(make_compound(-60.0), CLOCK, make_rng(1, "mix"))
        pure = S.synth_single_tone(S.SingleTone(1.0, 2e6, 0.3), CLOCK)
        corr = abs(np.vdot(sig.samples, pure.samples)) / (
            np.linalg.norm(sig.samples) * np.linalg.norm(pure.samples)
        )
        assert corr > 0.999

    def test_unit_power_across_pr_sweep(self):
        for pr_db in (-60.0, -12.5, 0.0, 3.0, 27.1, 60.0):
            sig = S.mix_compound(make_compound(pr_db), CLOCK, make_rng(3, "mix", pr_db))
            assert abs(S.measure_power(sig) - 1.0) < 1e-12

    def test_label_kind_mismatch_rejected(self):
        with pytest.raises(ValueError, match="expects components"):
            make_compound(0.0, class_label="STJ_Pulse")


class TestAddAwgn:
    def unit_tone(self):
        return S.synth_single_tone(S.SingleTone(1.0, 1e6, 0.0), CLOCK)

    def test_infinite_jnr_is_identity(self):
        sig = self.unit_tone()
        out = S.add_awgn(sig, S.NoiseSpec(math.inf), make_rng(1, "awgn"))
        assert np.array_equal(out.samples, sig.samples)

    def test_noise_power_at_0db(self):
        sig = self.unit_tone()
        out = S.add_awgn(sig, S.NoiseSpec(0.0), make_rng(2, "awgn"))
        residual = out.samples - sig.samples
        noise_power = float(np.mean(np.abs(residual) ** 2))
        assert abs(noise_power - 1.0) < 0.05

    def test_total_power_at_minus20db(self):
        sig = self.unit_tone()
        out = S.add_awgn(sig, S.NoiseSpec(-20.0), make_rng(3, "awgn"))
        total = S.measure_power(out)
        assert abs(total - 101.0) / 101.0 < 0.05

    def test_zero_power_rejected(self):
        silent = S.ComplexSignal(np.zeros(CLOCK.num_samples), CLOCK)
        with pytest.raises(ValueError, match="zero-power"):
            S.add_awgn(silent, S.NoiseSpec(10.0), make_rng(4, "awgn"))


class TestDeterminism:
    def test_identical_seed_identical_sample(self):
        for label in ("STJ_PBNJ", "LFM_Pulse", "Pulse_PBNJ"):
            seed = derive_seed(42, "sample", label, 0, 0)
            outs = []
            for _ in range(2):
                rng = np.random.Generator(np.random.PCG64(seed))
                spec = S.draw_compound(label, CLOCK, rng, (-3.0, 3.0))
                mixed = S.mix_compound(spec, CLOCK, rng)
                noisy = S.add_awgn(mixed, S.NoiseSpec(5.0), rng)
                outs.append(noisy.samples)
            assert np.array_equal(outs[0], outs[1])


class TestDrawCompound:
    def test_all_classes_synthesize_at_unit_power(self):
        for label in S.COMPOUND_CLASSES:
            rng = make_rng(9, "draw", label)
            spec = S.draw_compound(label, CLOCK, rng, (-3.0, 3.0))
            assert spec.class_label == label
            assert -3.0 <= spec.power_ratio_db <= 3.0
            sig = S.mix_compound(spec, CLOCK, rng)
            assert abs(S.measure_power(sig) - 1.0) < 1e-12

    def test_ranges_respected(self):
        for i in range(50):
            rng = make_rng(11, "ranges", i)
            stj = S.draw_primitive("STJ", CLOCK, rng)
            assert abs(stj.carrier_offset_hz) <= 9.5e6
            mtj = S.draw_primitive("MTJ", CLOCK, rng)
            assert 3 <= len(mtj.tones) <= 6
            freqs = sorted(f for f, _ in mtj.tones)
            gaps = np.diff(freqs)
            assert np.all(gaps >= 1.5e6 - 1e-6) and np.all(gaps <= 3.0e6 + 1e-6)
            assert all(abs(f) <= 9.5e6 for f in freqs)
            pbnj = S.draw_primitive("PBNJ", CLOCK, rng)
            assert 0.10 * FS <= pbnj.bandwidth_hz <= 0.25 * FS
            pulse = S.draw_primitive("Pulse", CLOCK, rng)
            assert pulse.pri_samples == CLOCK.num_samples // 6
            assert abs(pulse.duty_cycle - 0.30) < 0.01
