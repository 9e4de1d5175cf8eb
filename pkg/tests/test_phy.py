import unittest

import numpy as np
import numpy.testing as npt

from src.adapt import BandSelection, full_band
from src.errors import PacketLostError, SignalError
from src.modem_config import ModemConfig
from src.phy import (coded_length, data_symbol_count, demodulate_frame, demodulate_packet, diff_decode, diff_encode,
                     equalization_residual_db, estimate_equalizer, modulate_frame, modulate_packet, packet_length,
                     training_symbol)


def embed(packet, lead=500, tail=500):
    return np.concatenate([np.zeros(lead), packet, np.zeros(tail)])


class TestFraming(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()

    def test_packet_lengths(self) -> None:
        self.assertEqual(24, coded_length(self.cfg))
        self.assertEqual(2054, packet_length(full_band(self.cfg), self.cfg))
        self.assertEqual(4108, packet_length(BandSelection.from_bins(0, 9, self.cfg), self.cfg))
        self.assertEqual(24, data_symbol_count(BandSelection.from_bins(7, 7, self.cfg), self.cfg))

    def test_modulated_length(self) -> None:
        sel = BandSelection.from_bins(5, 14, self.cfg)
        packet = modulate_packet(np.zeros(16), sel, self.cfg)
        self.assertEqual(packet_length(sel, self.cfg), packet.size)

    def test_training_symbol_leads(self) -> None:
        sel = BandSelection.from_bins(0, 29, self.cfg)
        packet = modulate_packet(np.ones(16), sel, self.cfg)
        npt.assert_allclose(training_symbol(sel, self.cfg), packet[:self.cfg.symbol_len])

    def test_payload_size_checked(self) -> None:
        with self.assertRaises(SignalError):
            modulate_packet(np.zeros(15), full_band(self.cfg), self.cfg)
        with self.assertRaises(SignalError):
            modulate_packet(np.zeros(16), None, self.cfg)


class TestDifferentialBpsk(unittest.TestCase):

    def test_encode(self) -> None:
        bits = np.array([[1, 0], [1, 1]])
        npt.assert_array_equal([[-1, 1j], [1, -1j]], diff_encode(bits, np.array([1, 1j])))

    def test_decode_signs(self) -> None:
        reference = np.exp(1j * np.array([0.3, 1.2, -2.0]))
        bits = np.array([[0, 1, 1], [1, 1, 0]])
        values = np.vstack([reference, diff_encode(bits, reference)])
        npt.assert_array_equal(bits, (diff_decode(values) < 0).astype(int))

    def test_common_rotation_is_ignored(self) -> None:
        rng = np.random.default_rng(6)
        values = np.exp(2j * np.pi * rng.random((4, 12)))
        npt.assert_allclose(diff_decode(values), diff_decode(values * np.exp(0.7j)))


class TestEqualizer(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.x = training_symbol(full_band(self.cfg), self.cfg)

    def _residual(self, h):
        rx = np.convolve(self.x, h)
        taps = estimate_equalizer(rx, self.x, self.cfg.eq_len)
        return equalization_residual_db(taps, rx, self.x)

    def test_identity_channel(self) -> None:
        self.assertLess(self._residual(np.array([1.0])), -60.0)

    def test_two_path_channel(self) -> None:
        self.assertLess(self._residual(np.r_[1.0, np.zeros(149), 0.5]), -20.0)
        self.assertLess(self._residual(np.r_[1.0, np.zeros(149), 0.6]), -20.0)

    def test_empty_training(self) -> None:
        with self.assertRaises(SignalError):
            estimate_equalizer(np.zeros(0), self.x, 10)


class TestPacketRoundtrip(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.rng = np.random.default_rng(17)
        self.bands = [full_band(self.cfg), BandSelection.from_bins(0, 29, self.cfg),
                      BandSelection.from_bins(30, 59, self.cfg), BandSelection.from_bins(5, 14, self.cfg),
                      BandSelection.from_bins(20, 20, self.cfg)]

    def test_clean_roundtrip(self) -> None:
        for i in range(100):
            sel = self.bands[i % len(self.bands)]
            payload = self.rng.integers(0, 2, 16).astype(np.uint8)
            stream = embed(modulate_packet(payload, sel, self.cfg, packet_index=i))
            result = demodulate_packet(stream, 500, sel, self.cfg, packet_index=i)
            npt.assert_array_equal(payload, result.payload)
            self.assertGreater(result.mean_confidence, 0.0)

    def test_receiver_options(self) -> None:
        sel = self.bands[1]
        payload = self.rng.integers(0, 2, 16).astype(np.uint8)
        stream = embed(modulate_packet(payload, sel, self.cfg))
        for equalize in (True, False):
            result = demodulate_packet(stream, 500, sel, self.cfg, equalize=equalize, hard_decision=True)
            npt.assert_array_equal(payload, result.payload)
            self.assertEqual(24, result.uncoded_bits.size)

    def test_two_path_channel(self) -> None:
        sel = full_band(self.cfg)
        h = np.r_[1.0, np.zeros(39), 0.4]
        for i in range(20):
            payload = self.rng.integers(0, 2, 16).astype(np.uint8)
            stream = np.convolve(embed(modulate_packet(payload, sel, self.cfg, packet_index=i)), h)
            npt.assert_array_equal(payload, demodulate_packet(stream, 500, sel, self.cfg, packet_index=i).payload)

    def test_uncoded_frames(self) -> None:
        sel = BandSelection.from_bins(10, 29, self.cfg)
        grid = self.rng.integers(0, 2, (5, sel.width)).astype(np.uint8)
        for differential in (True, False):
            stream = embed(modulate_frame(grid, sel, self.cfg, differential=differential))
            soft = demodulate_frame(stream, 500, 5, sel, self.cfg, differential=differential)
            npt.assert_array_equal(grid, (soft < 0).astype(np.uint8))

    def test_frame_width_checked(self) -> None:
        with self.assertRaises(SignalError):
            modulate_frame(np.zeros((2, 3)), BandSelection.from_bins(0, 9, self.cfg), self.cfg)


class TestPacketLost(unittest.TestCase):

    def setUp(self) -> None:
        self.cfg = ModemConfig()
        self.sel = full_band(self.cfg)

    def test_empty_stream(self) -> None:
        with self.assertRaises(PacketLostError):
            demodulate_packet(np.zeros(0), 0, self.sel, self.cfg)

    def test_runs_past_end(self) -> None:
        packet = modulate_packet(np.zeros(16), self.sel, self.cfg)
        with self.assertRaises(PacketLostError):
            demodulate_packet(packet[:-10], 0, self.sel, self.cfg)

    def test_no_training_symbol(self) -> None:
        with self.assertRaises(PacketLostError):
            demodulate_packet(np.zeros(20000), 1000, self.sel, self.cfg)
