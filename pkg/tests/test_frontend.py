import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwspot import frontend
from kwspot.errors import (
    AudioTooLong,
    InvalidBandEdges,
    NonFiniteInput,
    ParseError,
    TooShort,
    WrongSampleRate,
)
from kwspot.frontend import (
    AudioBuffer,
    compute_log_mel,
    filter_center_frequencies,
    hz_to_mel,
    load_melf,
    mel_filterbank,
    mel_to_hz,
    num_frames,
    read_wav,
    save_melf,
    write_wav,
)


def buffer(samples):
    return AudioBuffer(samples=np.asarray(samples, dtype=np.float64))


class TestAudioBuffer:
    def test_rejects_nan(self):
        with pytest.raises(NonFiniteInput):
            buffer([0.0, np.nan, 0.1])

    def test_rejects_over_30s(self):
        with pytest.raises(AudioTooLong):
            buffer(np.zeros(480_001))

    def test_wrong_rate_rejected_by_frontend(self):
        audio = AudioBuffer(samples=np.zeros(8000), sample_rate_hz=8000)
        with pytest.raises(WrongSampleRate):
            compute_log_mel(audio)

    def test_too_short(self):
        with pytest.raises(TooShort):
            compute_log_mel(buffer(np.zeros(399)))


class TestFrameCount:
    def test_one_second(self):
        mel = compute_log_mel(buffer(np.zeros(16000)))
        assert mel.frames.shape == (98, 80)

    @settings(max_examples=80, deadline=None)
    @given(n=st.integers(400, 480_000))
    def test_frame_count_law(self, n):
        assert num_frames(n) == (n - 400) // 160 + 1

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(400, 50_000))
    def test_actual_frames_match_law(self, n):
        rng = np.random.default_rng(n)
        mel = compute_log_mel(buffer(rng.uniform(-0.5, 0.5, n)))
        assert mel.frames.shape == ((n - 400) // 160 + 1, 80)


class TestSilence:
    def test_silence_constant_before_standardization(self):
        raw = compute_log_mel(buffer(np.zeros(16000)), standardize=False)
        assert np.all(raw.frames == raw.frames[0, 0])
        assert raw.frames[0, 0] == np.float32(np.log10(1e-10))

    def test_silence_zero_after_standardization(self):
        mel = compute_log_mel(buffer(np.zeros(16000)))
        assert np.all(mel.frames == 0.0)


class TestSineOracle:
    def test_1khz_peak_matches_analytic_mel_center(self):
        # oracle: the filter whose center is nearest 1000 Hz in Mel units
        t = np.arange(16000) / 16000.0
        audio = buffer(0.5 * np.sin(2 * np.pi * 1000.0 * t))
        mel = compute_log_mel(audio)
        centers_mel = hz_to_mel(filter_center_frequencies())
        expected = int(np.argmin(np.abs(centers_mel - hz_to_mel(1000.0))))
        argmaxes = mel.frames.argmax(axis=1)
        assert np.all(argmaxes == expected)

    def test_energy_monotone_in_amplitude(self):
        rng = np.random.default_rng(3)
        base = rng.uniform(-0.3, 0.3, 8000)
        lo = compute_log_mel(buffer(base), standardize=False)
        hi = compute_log_mel(buffer(2.0 * base), standardize=False)
        assert np.all(hi.frames >= lo.frames)


class TestFilterbank:
    def test_shape(self):
        assert mel_filterbank().shape == (80, 201)

    def test_row_sums_positive(self):
        assert np.all(mel_filterbank().sum(axis=1) > 0)

    def test_weights_nonnegative(self):
        assert np.all(mel_filterbank() >= 0)

    def test_centers_monotone(self):
        centers = filter_center_frequencies()
        assert np.all(np.diff(centers) > 0)

    def test_centers_match_closed_form(self):
        # every center is the inverse-Mel of its uniformly spaced Mel point
        top = hz_to_mel(8000.0)
        centers = filter_center_frequencies()
        for m in range(80):
            expected = mel_to_hz((m + 1) * top / 81.0)
            assert centers[m] == pytest.approx(float(expected), rel=1e-12)
        # the Mel-range midpoint falls between filters 39 and 40, exactly
        # half a Mel step from filter 40's center
        step = top / 81.0
        gap = float(hz_to_mel(centers[40]) - top / 2.0)
        assert gap == pytest.approx(step / 2.0, rel=1e-9)
        assert np.abs(hz_to_mel(centers) - top / 2.0).min() == pytest.approx(step / 2.0, rel=1e-9)

    def test_interior_bins_covered(self):
        fb = mel_filterbank()
        interior = slice(1, 200)  # bins strictly inside (0, 8000) Hz
        assert np.all(fb[:, interior].sum(axis=0) > 0)

    def test_adjacent_filters_overlap(self):
        # continuous supports [e_m, e_(m+2)] always interleave
        top = hz_to_mel(8000.0)
        edges = np.linspace(0.0, top, 82)
        for m in range(79):
            assert edges[m + 2] > edges[m + 1]  # filter m extends past m+1's start
        # and on the discrete bin grid wherever filters are wider than a bin
        fb = mel_filterbank()
        for m in range(40, 79):
            assert np.any((fb[m] > 0) & (fb[m + 1] > 0))

    def test_invalid_edges(self):
        with pytest.raises(InvalidBandEdges):
            mel_filterbank(f_min=100, f_max=50)
        with pytest.raises(InvalidBandEdges):
            mel_filterbank(f_max=9000)


class TestDeterminismAndRoundTrip:
    def test_bit_identical_across_runs(self):
        rng = np.random.default_rng(11)
        samples = rng.uniform(-0.9, 0.9, 12_345)
        a = compute_log_mel(buffer(samples)).frames
        b = compute_log_mel(buffer(samples.copy())).frames
        assert np.array_equal(a, b)

    def test_melf_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        mel = compute_log_mel(buffer(rng.uniform(-0.5, 0.5, 9000)))
        path = tmp_path / "cache.melf"
        save_melf(path, mel)
        loaded = load_melf(path)
        assert np.array_equal(loaded.frames, mel.frames)

    def test_melf_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.melf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_melf(path)

    def test_wav_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        samples = (rng.integers(-20000, 20000, 8000) / 32768.0).astype(np.float64)
        path = tmp_path / "tone.wav"
        write_wav(path, AudioBuffer(samples=samples))
        loaded = read_wav(path)
        assert loaded.sample_rate_hz == 16000
        np.testing.assert_allclose(loaded.samples, samples, atol=1.0 / 32768.0)

    def test_wav_wrong_rate(self, tmp_path):
        import wave

        path = tmp_path / "slow.wav"
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(8000)
            w.writeframes(b"\x00\x00" * 800)
        with pytest.raises(WrongSampleRate):
            read_wav(path)
