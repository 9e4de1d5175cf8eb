import csv
import os
import tempfile
import unittest

import numpy as np

from src.adapt import full_band
from src.beacon import BeaconConfig, beacon_encode
from src.channel import ChannelModel, apply
from src.dsp import band_energy
from src.errors import ConfigError, SignalError
from src.experiments import (ExperimentSpec, LinkReport, _frame_bit_errors, beacon_noise_power, estimate_from_preamble,
                             export_wav, import_wav, run_band_adapt, run_beacon, run_ber_sweep, run_link, run_mac,
                             run_mobility, run_spacing, run_stability, simulate_packet, trial_channel)
from src.modem_config import ModemConfig, load_profile
from src.modem_enums import Mobility, Scheme
from src.phy import demodulate_frame, modulate_frame
from src.preamble import PreambleSpec, build_preamble
from src.utils import bpsk_ber_theory

CLEAN = {"taps": [[0, 1.0]]}


class TestExperimentSpec(unittest.TestCase):

    def setUp(self) -> None:
        self.profile = load_profile(profile="test")

    def test_from_test_profile(self) -> None:
        spec = ExperimentSpec.from_profile(self.profile, "ber_sweep")
        self.assertEqual(5, spec.trials)
        self.assertEqual(42, spec.seed)
        self.assertEqual((4.0, 8.0), spec.snr_grid)
        self.assertEqual(30, spec.mac.packet_budget)
        self.assertTrue(spec.randomize_channel)

    def test_overrides_win(self) -> None:
        spec = ExperimentSpec.from_profile(self.profile, "link", channel=CLEAN, trials=2, seed=None,
                                           scheme=Scheme.FIXED_1K5)
        self.assertEqual(2, spec.trials)
        self.assertEqual(42, spec.seed)
        self.assertEqual(Scheme.FIXED_1K5, spec.scheme)
        self.assertFalse(spec.randomize_channel)

    def test_rejections(self) -> None:
        with self.assertRaises(ConfigError):
            ExperimentSpec("teleport")
        with self.assertRaises(ConfigError):
            ExperimentSpec("link", trials=0)
        with self.assertRaises(ConfigError):
            ExperimentSpec.from_profile({"experiment": {"warp": 9}}, "link")
        with self.assertRaises(ConfigError):
            ExperimentSpec.from_profile({"experiment": {"mobility": ["sideways"]}}, "mobility")

    def test_trial_channels_are_paired(self) -> None:
        spec = ExperimentSpec.from_profile(self.profile, "link")
        self.assertEqual(trial_channel(spec, 3).taps, trial_channel(spec, 3).taps)
        self.assertNotEqual(trial_channel(spec, 3).taps, trial_channel(spec, 4).taps)
        self.assertEqual(5.0, trial_channel(spec, 3, snr_db=5.0).snr_db)


class TestLinkExperiment(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_clean_link_delivers(self) -> None:
        out = os.path.join(self.tmp.name, "link.csv")
        spec = ExperimentSpec.from_profile({"channel": CLEAN}, "link", trials=2, out=out)
        report = run_link(spec)

        self.assertIsInstance(report, LinkReport)
        self.assertEqual(2, len(report.rows))
        self.assertTrue(all(r["packet_ok"] and r["delivered"] for r in report.rows))
        self.assertEqual(0.0, report.packet_error_rate())
        self.assertEqual("0-59", report.rows[0]["selected_band"])
        self.assertEqual([(1869.5, 1.0)], report.bitrate_cdf())

        with open(out, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(2, len(rows))
        self.assertEqual(out, report.path)

    def test_simulated_packet_on_clean_channel(self) -> None:
        cfg = ModemConfig()
        payload = np.array([1, 0] * 8, dtype=np.uint8)
        outcome = simulate_packet(ChannelModel(), cfg, np.random.default_rng(0), payload)
        self.assertTrue(outcome.detected)
        self.assertTrue(outcome.ok)
        self.assertEqual((0, 59), (outcome.selection.m, outcome.selection.n))

    def test_nothing_in_silence(self) -> None:
        self.assertIsNone(estimate_from_preamble(np.zeros(20000), ModemConfig()))


class TestBerAndBeaconExperiments(unittest.TestCase):

    def test_uncoded_ber_tracks_theory(self) -> None:
        cfg = ModemConfig()
        rng = np.random.default_rng(11)
        errors = total = 0
        for _ in range(20):
            e, n = _frame_bit_errors(4.0, cfg, rng, 10)
            errors += e
            total += n
        self.assertEqual(20 * 10 * cfg.n_bins, total)
        theory = float(bpsk_ber_theory(4.0))
        self.assertGreater(errors / total, theory / 3)
        self.assertLess(errors / total, theory * 3)

    def test_high_snr_frames_are_clean(self) -> None:
        errors, _ = _frame_bit_errors(20.0, ModemConfig(), np.random.default_rng(12), 10)
        self.assertEqual(0, errors)

    def test_beacon_at_short_range(self) -> None:
        spec = ExperimentSpec.from_profile({"channel": CLEAN}, "beacon", trials=3, distances=(5.0,),
                                           beacon_rates=(10.0,))
        report = run_beacon(spec)
        self.assertEqual(3, len(report.rows))
        self.assertTrue(all(r["detected"] for r in report.rows))
        self.assertEqual(0.0, report.summary["10 bps BER"])

    def test_beacon_snr_matches_label(self) -> None:
        cfg = ModemConfig()
        bcfg = BeaconConfig()
        burst = beacon_encode(21, bcfg)
        for taps in (((0, 1.0),), ((0, 1.0), (37, 0.5))):
            model = ChannelModel(taps=taps, snr_db=5.0)
            rx = apply(burst, model, cfg, np.random.default_rng(8), beacon_noise_power(model, cfg, bcfg, burst))
            clean = apply(burst, ChannelModel(taps=taps), cfg)
            noise = rx - clean
            noise_power = band_energy(noise, 1000.0, 4000.0, 48000) / noise.size
            measured = 10 * np.log10(np.mean(clean ** 2) / noise_power)
            self.assertAlmostEqual(5.0, measured, delta=0.5)


class TestStudyOrderings(unittest.TestCase):
    """Small-trial runs of each study, checked for the direction of their headline result"""

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.cfg = ModemConfig()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_ber_sweep_falls_with_snr(self) -> None:
        spec = ExperimentSpec.from_profile({}, "ber_sweep", trials=2, snr_grid=(0.0, 10.0), min_bits=3000)
        low, high = run_ber_sweep(spec).rows
        self.assertGreater(low["ber"], low["theory_ber"] / 3)
        self.assertLess(low["ber"], low["theory_ber"] * 3)
        self.assertLess(high["ber"], low["ber"])
        self.assertEqual(0.0, high["per"])

    def test_adaptive_band_beats_the_full_fixed_band(self) -> None:
        out = os.path.join(self.tmp.name, "band.csv")
        spec = ExperimentSpec.from_profile(load_profile(profile="test"), "band_adapt",
                                           channel={"site": "lake", "snr_db": 15.0, "seed": 42}, trials=4, out=out)
        report = run_band_adapt(spec)
        self.assertEqual(4 * len(Scheme), len(report.rows))
        self.assertLessEqual(report.packet_error_rate(Scheme.ADAPTIVE), report.packet_error_rate(Scheme.FIXED_4K))
        self.assertTrue(os.path.exists(report.summary["bitrate_cdf_path"]))

    def test_differential_survives_motion(self) -> None:
        spec = ExperimentSpec.from_profile({"channel": {"site": "bridge", "snr_db": 20.0}}, "mobility",
                                           trials=2, mobility=(Mobility.STATIC, Mobility.FAST))
        summary = run_mobility(spec).summary
        self.assertLess(summary["static differential"], 0.01)
        self.assertLessEqual(summary["fast differential"], summary["fast coherent"])

    def test_narrow_spacing_handles_long_echo(self) -> None:
        # a 250-sample echo fits the 10 Hz cyclic prefix but not the 50 Hz one
        spec = ExperimentSpec.from_profile({"channel": {"taps": [[0, 1.0], [250, 0.7]]}}, "spacing",
                                           trials=4, distances=(10.0,), spacings=(50.0, 25.0, 10.0), equalize=False)
        report = run_spacing(spec)
        self.assertEqual(12, len(report.rows))
        self.assertTrue(all(r["detected"] for r in report.rows))
        self.assertLessEqual(report.summary["10 Hz PER"], report.summary["50 Hz PER"])
        self.assertLessEqual(report.summary["25 Hz PER"], report.summary["50 Hz PER"])

    def test_static_band_holds_at_least_as_well(self) -> None:
        spec = ExperimentSpec.from_profile({"channel": {"site": "bridge", "snr_db": 20.0}}, "stability",
                                           trials=3, mobility=(Mobility.FAST,))
        report = run_stability(spec)

        def below(mobility: Mobility) -> int:
            return int(report.summary[f"{mobility.value} below 4 dB"].split("/")[0])

        self.assertLessEqual(below(Mobility.STATIC), below(Mobility.FAST))
        for row in report.rows:
            if row["mobility"] == "static" and row["selected_band"]:
                self.assertLess(abs(row["min_snr_first_db"] - row["min_snr_second_db"]), 6.0)

    def _frame_errors(self, model: ChannelModel, seed: int, equalize: bool = True) -> tuple:
        sel = full_band(self.cfg)
        rng = np.random.default_rng(seed)
        grid = rng.integers(0, 2, size=(10, sel.width)).astype(np.uint8)
        preamble = build_preamble(PreambleSpec.from_config(self.cfg), self.cfg)
        quiet = np.zeros(self.cfg.symbol_len)
        rx = apply(np.concatenate([quiet, preamble, modulate_frame(grid, sel, self.cfg), quiet]), model, self.cfg, rng)
        estimate = estimate_from_preamble(rx, self.cfg)
        self.assertIsNotNone(estimate)
        soft = demodulate_frame(rx, estimate.sync + len(preamble), 10, sel, self.cfg, equalize=equalize,
                                noise_var=estimate.noise_var)
        return int(np.sum((soft < 0) != grid.astype(bool))), grid.size

    def test_equalizer_reduces_errors_over_long_spread(self) -> None:
        model = ChannelModel(taps=((0, 1.0), (120, 0.4), (300, 0.3)), snr_db=25.0)
        on = sum(self._frame_errors(model, seed, equalize=True)[0] for seed in range(3))
        off = sum(self._frame_errors(model, seed, equalize=False)[0] for seed in range(3))
        self.assertLess(on, off)

        payload = np.array([1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0, 0, 1, 0], dtype=np.uint8)
        lost = {True: 0, False: 0}
        for equalize in lost:
            for trial in range(4):
                outcome = simulate_packet(model, self.cfg, np.random.default_rng(trial), payload,
                                          sel=full_band(self.cfg), equalize=equalize)
                lost[equalize] += not outcome.ok
        self.assertLessEqual(lost[True], lost[False])

    def test_doppler_shift_barely_moves_ber(self) -> None:
        def ber(doppler_hz: float) -> float:
            counts = [self._frame_errors(ChannelModel(snr_db=12.0, doppler_hz=doppler_hz), seed) for seed in range(4)]
            return sum(e for e, _ in counts) / sum(n for _, n in counts)

        still = ber(0.0)
        for doppler_hz in (-5.0, 5.0):
            self.assertLess(abs(ber(doppler_hz) - still), 0.01)


class TestMacExperiment(unittest.TestCase):

    def test_both_carrier_sense_settings(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, "mac.csv")
            spec = ExperimentSpec.from_profile(load_profile(profile="test"), "mac", trials=1, out=out)
            report = run_mac(spec)
            self.assertEqual({False, True}, {r["cs_enabled"] for r in report.rows})
            self.assertEqual(3, report.summary["transmitters"])
            self.assertIn("collisions with carrier sense", report.summary)
            with open(out, newline="", encoding="utf-8") as f:
                self.assertEqual(len(report.rows), len(list(csv.DictReader(f))))


class TestWavFiles(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.cfg = ModemConfig()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_packet_file(self) -> None:
        path = os.path.join(self.tmp.name, "packet.wav")
        payload = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1], dtype=np.uint8)
        export_wav(path, self.cfg, payload=payload, dest_id=12)
        result = import_wav(path, self.cfg)
        self.assertEqual(12, result.device_id)
        np.testing.assert_array_equal(payload, result.payload)
        self.assertIsNone(result.beacon_value)

    def test_beacon_file(self) -> None:
        path = os.path.join(self.tmp.name, "beacon.wav")
        export_wav(path, self.cfg, beacon_value=33)
        result = import_wav(path, self.cfg)
        self.assertIsNone(result.payload)
        self.assertEqual(33, result.beacon_value)

    def test_nothing_to_export(self) -> None:
        with self.assertRaises(SignalError):
            export_wav(os.path.join(self.tmp.name, "empty.wav"), self.cfg)
