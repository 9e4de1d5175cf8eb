import os
import tempfile
import unittest

import numpy as np
import numpy.testing as npt
from scipy import signal

from src.channel import (ChannelModel, ChannelStream, NoiseProfile, apply, distance_attenuation_db,
                         load_impulse_response, load_noise, make_nonreciprocal_pair, noise_power_for, notch_depth_db,
                         snr_at_distance, time_varying)
from src.dsp import SampleBuffer, band_energy, synthesize_symbol, write_wav
from src.errors import ConfigError, SignalError
from src.modem_config import ModemConfig
from src.modem_enums import Mobility


def ofdm_burst(cfg, n_symbols, rng):
    values = np.exp(2j * np.pi * rng.random((n_symbols, cfg.n_bins)))
    return np.concatenate([synthesize_symbol(row, cfg.band_bins, cfg) for row in values])


class TestStaticChannel(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.rng = np.random.default_rng(31)
        self.x = ofdm_burst(self.cfg, 6, self.rng)

    def test_identity(self) -> None:
        npt.assert_allclose(self.x, apply(self.x, ChannelModel(), self.cfg), atol=1e-12)

    def test_single_delayed_tap(self) -> None:
        y = apply(self.x, ChannelModel(taps=((10, 0.5),)), self.cfg)
        self.assertEqual(self.x.size + 10, y.size)
        npt.assert_allclose(0.5 * self.x, y[10:], atol=1e-12)
        npt.assert_allclose(np.zeros(10), y[:10], atol=1e-12)

    def test_in_band_snr(self) -> None:
        for snr in (0.0, 10.0, 25.0):
            model = ChannelModel(snr_db=snr, seed=4)
            clean = apply(self.x, ChannelModel(), self.cfg)
            noise = apply(self.x, model, self.cfg) - clean
            rate = self.cfg.sample_rate
            measured = 10 * np.log10(band_energy(clean, 1000, 4000, rate) / band_energy(noise, 1000, 4000, rate))
            self.assertAlmostEqual(snr, measured, delta=0.5)

    def test_linear_without_noise(self) -> None:
        model = ChannelModel.random(seed=3)
        other = ofdm_burst(self.cfg, 6, self.rng)
        combined = apply(2.0 * self.x - 0.5 * other, model, self.cfg)
        npt.assert_allclose(2.0 * apply(self.x, model, self.cfg) - 0.5 * apply(other, model, self.cfg), combined,
                            atol=1e-9)

    def test_same_seed_same_output(self) -> None:
        model = ChannelModel.random(seed=8, snr_db=5.0)
        npt.assert_array_equal(apply(self.x, model, self.cfg), apply(self.x, model, self.cfg))

    def test_doppler_compresses(self) -> None:
        y = apply(self.x, ChannelModel(doppler_hz=4.0), self.cfg)
        self.assertAlmostEqual(self.x.size / 1.001, y.size, delta=2)

    def test_noise_power_for(self) -> None:
        self.assertEqual(0.0, noise_power_for(ChannelModel(), self.cfg))
        self.assertAlmostEqual(0.25 ** 2 / 10.0, noise_power_for(ChannelModel(snr_db=10.0), self.cfg))


class TestMultipathDraws(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()

    def test_single_echo_notch_depth(self) -> None:
        depths = [notch_depth_db(ChannelModel.random(seed=s, n_taps=(2, 2)), self.cfg) for s in range(41)]
        self.assertTrue(10.0 <= float(np.median(depths)) <= 20.0)

    def test_random_taps_structure(self) -> None:
        model = ChannelModel.random(seed=12)
        self.assertEqual((0, 1.0), model.taps[0])
        self.assertTrue(3 <= len(model.taps) <= 8)
        self.assertTrue(all(0 < d <= 480 for d, _ in model.taps[1:]))

    def test_reciprocal_pair_is_shared(self) -> None:
        model = ChannelModel.random(seed=2)
        forward, backward = make_nonreciprocal_pair(model, seed=7)
        self.assertIs(forward, backward)

    def test_nonreciprocal_pair_differs(self) -> None:
        model = ChannelModel.random(seed=2, reciprocal=False)
        forward, backward = make_nonreciprocal_pair(model, seed=7)
        self.assertNotEqual(forward.taps, backward.taps)
        again = make_nonreciprocal_pair(model, seed=7)
        self.assertEqual(forward.taps, again[0].taps)

    def test_attenuation_grows_with_range(self) -> None:
        self.assertAlmostEqual(15.0, distance_attenuation_db(10.0), delta=0.1)
        self.assertGreater(snr_at_distance(60.0, 10.0), snr_at_distance(60.0, 30.0))
        with self.assertRaises(SignalError):
            distance_attenuation_db(0.0)


class TestChannelFromDict(unittest.TestCase):

    def test_explicit_taps(self) -> None:
        model = ChannelModel.from_dict({"taps": [[0, 1.0], [40, -0.3]], "snr_db": 12.0})
        self.assertEqual(((0, 1.0), (40, -0.3)), model.taps)
        self.assertEqual(12.0, model.snr_db)

    def test_random_taps_follow_seed(self) -> None:
        a = ChannelModel.from_dict({"seed": 5})
        b = ChannelModel.from_dict({"seed": 5})
        self.assertEqual(a.taps, b.taps)

    def test_site_preset(self) -> None:
        model = ChannelModel.from_dict({"site": "beach", "snr_db": 20.0})
        self.assertEqual(11.0, model.effective_snr_db)

    def test_errors(self) -> None:
        with self.assertRaises(ConfigError):
            ChannelModel.from_dict({"site": "harbour"})
        with self.assertRaises(ConfigError):
            ChannelModel.from_dict({"taps": [[0, 1.0]], "colour": "pink"})
        with self.assertRaises(ConfigError):
            ChannelModel.from_dict({"schema_version": 2})
        with self.assertRaises(ConfigError):
            ChannelModel(taps=())
        with self.assertRaises(ConfigError):
            ChannelModel(taps=((-1, 1.0),))


class TestTimeVarying(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.model = ChannelModel.random(seed=6)

    def test_static_process(self) -> None:
        process = time_varying(self.model, Mobility.STATIC, self.cfg)
        self.assertEqual([(float(d), float(g)) for d, g in self.model.taps], process.taps_at(1000))
        x = ofdm_burst(self.cfg, 2, np.random.default_rng(0))
        npt.assert_allclose(apply(x, self.model, self.cfg), process.apply(x))

    def test_slow_channel_is_coherent_over_a_symbol(self) -> None:
        process = time_varying(self.model, Mobility.SLOW, self.cfg)
        a = process.response_at(48000)
        b = process.response_at(48000 + self.cfg.symbol_len)
        coherence = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
        self.assertGreater(coherence, 0.99)

    def test_fast_channel_drifts(self) -> None:
        process = time_varying(self.model, Mobility.FAST, self.cfg)
        a = process.response_at(0)
        b = process.response_at(4 * 48000)
        self.assertFalse(np.allclose(a, b))

    def test_horizon(self) -> None:
        process = time_varying(self.model, Mobility.SLOW, self.cfg, duration_s=1.0)
        with self.assertRaises(SignalError):
            process.taps_at(48000)
        with self.assertRaises(SignalError):
            process.apply(np.zeros(48000))


class TestChannelStream(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.model = ChannelModel.random(seed=1)
        self.x = np.random.default_rng(2).standard_normal(5000)

    def test_chunked_push_matches_one_filter(self) -> None:
        stream = ChannelStream(self.model, self.cfg, np.random.default_rng(0), delay_samples=25)
        out = np.concatenate([stream.push(self.x[i:i + 700]) for i in range(0, self.x.size, 700)])
        taps = np.concatenate([np.zeros(25), self.model.impulse_response()])
        npt.assert_allclose(signal.lfilter(taps, 1.0, self.x), out, atol=1e-10)

    def test_for_model_delay(self) -> None:
        stream = ChannelStream.for_model(ChannelModel(), self.cfg, np.random.default_rng(0), distance_m=10.0)
        out = stream.push(self.x)
        npt.assert_allclose(self.x[:-320], out[320:], atol=1e-12)

    def test_noise_is_added(self) -> None:
        stream = ChannelStream(ChannelModel(), self.cfg, np.random.default_rng(0), noise_power=1e-3)
        self.assertGreater(float(np.max(np.abs(stream.push(np.zeros(2000))))), 0.0)


class TestImpulseResponseFile(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "ir.wav")

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_sparse_taps(self) -> None:
        response = np.zeros(200)
        response[[10, 50, 70]] = [0.8, -0.4, 0.001]
        write_wav(self.path, SampleBuffer(response, 48000))
        taps = load_impulse_response(self.path, self.cfg)
        self.assertEqual([0, 40], [d for d, _ in taps])
        self.assertAlmostEqual(1.0, taps[0][1])
        self.assertAlmostEqual(-0.5, taps[1][1], delta=1e-3)

    def test_all_zero(self) -> None:
        write_wav(self.path, SampleBuffer(np.zeros(100), 48000))
        with self.assertRaises(SignalError):
            load_impulse_response(self.path, self.cfg)


class TestNoiseRecording(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "ambient.wav")
        # 2500 Hz hum, a whole number of cycles so the replay wraps without a step
        t = np.arange(48000) / 48000
        write_wav(self.path, SampleBuffer(0.3 * np.sin(2 * np.pi * 2500 * t), 48000))
        self.model = ChannelModel(noise_profile=NoiseProfile(recording=self.path))

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def _peak_hz(self, samples):
        spectrum = np.abs(np.fft.rfft(samples))
        return float(np.fft.rfftfreq(len(samples), 1 / 48000)[np.argmax(spectrum)])

    def test_loaded_once(self) -> None:
        first = load_noise(self.path, self.cfg)
        self.assertEqual(48000, first.size)
        self.assertIs(first, load_noise(self.path, self.cfg))

    def test_apply_replays_recording(self) -> None:
        rx = apply(np.zeros(9600), self.model, self.cfg, np.random.default_rng(2), noise_power=1e-2)
        in_band = band_energy(rx, 1000, 4000, 48000) / rx.size
        self.assertAlmostEqual(1e-2, in_band, delta=1e-4)
        self.assertEqual(2500.0, self._peak_hz(rx))

    def test_stream_replays_recording(self) -> None:
        stream = ChannelStream(self.model, self.cfg, np.random.default_rng(3), noise_power=1e-2)
        out = np.concatenate([stream.push(np.zeros(4800)), stream.push(np.zeros(4800))])
        self.assertAlmostEqual(1e-2, band_energy(out, 1000, 4000, 48000) / out.size, delta=5e-4)
        self.assertEqual(2500.0, self._peak_hz(out))

    def test_channel_file_names_recording(self) -> None:
        model = ChannelModel.from_dict({"taps": [[0, 1.0]], "snr_db": 10.0, "noise": {"recording": self.path}})
        self.assertEqual(self.path, model.noise_profile.recording)
        rx = apply(np.zeros(9600), model, self.cfg, np.random.default_rng(4), noise_power=1e-3)
        self.assertEqual(2500.0, self._peak_hz(rx))

    def test_silent_recording_rejected(self) -> None:
        quiet = os.path.join(self.tmp.name, "quiet.wav")
        write_wav(quiet, SampleBuffer(np.zeros(4800), 48000))
        model = ChannelModel(noise_profile=NoiseProfile(recording=quiet))
        with self.assertRaises(SignalError):
            apply(np.zeros(1000), model, self.cfg, np.random.default_rng(5), noise_power=1e-3)
