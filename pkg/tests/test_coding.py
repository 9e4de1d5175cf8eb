import unittest

import numpy as np
import numpy.testing as npt

from src.coding import (DEFAULT_CODE, conv_encode, deinterleave, interleave, interleave_order, placement,
                        symbols_needed, viterbi_decode)
from src.errors import SignalError


def reference_encode(bits):
    """Plain shift-register rate-1/2 encoder (taps 133, 171 octal) punctured to rate 2/3"""
    g0 = [int(c) for c in format(0o133, "07b")]
    g1 = [int(c) for c in format(0o171, "07b")]
    register = [0] * 7
    out = []
    for t, u in enumerate(bits):
        register = [int(u)] + register[:-1]
        a = sum(r * g for r, g in zip(register, g0)) % 2
        b = sum(r * g for r, g in zip(register, g1)) % 2
        out.append(a)
        if t % 2 == 0:
            out.append(b)
    return np.array(out, dtype=np.uint8)


def all_payloads(n_bits=16):
    values = np.arange(1 << n_bits)
    return ((values[:, None] >> np.arange(n_bits - 1, -1, -1)[None, :]) & 1).astype(np.uint8)


class TestConvolutionalCode(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        # the code is linear and starts from the zero state, so unit responses span the codebook
        generator = np.stack([reference_encode(row) for row in np.eye(16, dtype=np.uint8)])
        cls.payloads = all_payloads()
        cls.codebook = (cls.payloads.astype(np.int64) @ generator % 2).astype(np.uint8)
        weights = cls.codebook.sum(axis=1)
        light = cls.codebook[(weights > 0) & (weights <= 2)]
        cls.weak_positions = set(np.flatnonzero(light.any(axis=0)).tolist())

    def setUp(self) -> None:
        self.rng = np.random.default_rng(11)

    def test_lengths(self) -> None:
        self.assertEqual(24, DEFAULT_CODE.coded_length(16))
        self.assertEqual(24, conv_encode(np.ones(16)).size)
        self.assertEqual(16, DEFAULT_CODE.info_length(24))

    def test_zero_payload(self) -> None:
        npt.assert_array_equal(np.zeros(24), conv_encode(np.zeros(16)))

    def test_matches_reference_encoder(self) -> None:
        for _ in range(50):
            bits = self.rng.integers(0, 2, 16)
            npt.assert_array_equal(reference_encode(bits), conv_encode(bits))

    def test_codebook_matches_encoder(self) -> None:
        for index in self.rng.integers(0, 1 << 16, 64):
            npt.assert_array_equal(self.codebook[index], conv_encode(self.payloads[index]))

    def test_exhaustive_noiseless_roundtrip(self) -> None:
        for start in range(0, 1 << 16, 4096):
            batch = self.codebook[start:start + 4096]
            npt.assert_array_equal(self.payloads[start:start + 4096], viterbi_decode(batch))

    def test_soft_decisions(self) -> None:
        bits = self.rng.integers(0, 2, 16)
        coded = conv_encode(bits)
        soft = (1.0 - 2.0 * coded) * self.rng.uniform(0.2, 1.0, coded.size)
        npt.assert_array_equal(bits, viterbi_decode(soft, soft=True))

    def test_weak_positions_sit_at_the_tail(self) -> None:
        # the untailed trellis leaves only the last coded bits without full protection:
        # u15 -> {23}, u14 -> {21, 22}, u13+u15 -> {20, 22}, u13+u14+u15 -> {20, 21}, u12+u14+u15 -> {18, 19}
        weights = self.codebook.sum(axis=1)
        light = self.codebook[(weights > 0) & (weights <= 2)]
        self.assertEqual({(23,), (21, 22), (20, 22), (20, 21), (18, 19)},
                         {tuple(int(i) for i in np.flatnonzero(row)) for row in light})
        self.assertEqual({18, 19, 20, 21, 22, 23}, self.weak_positions)

    def test_last_coded_bit_flip_is_another_codeword(self) -> None:
        # the last info bit reaches only the final coded bit, so flipping it decodes to that neighbour
        for index in self.rng.integers(0, 1 << 16, 20):
            received = self.codebook[index].copy()
            received[23] ^= 1
            expected = self.payloads[index].copy()
            expected[15] ^= 1
            npt.assert_array_equal(expected, viterbi_decode(received))

    def test_single_flip_corrected(self) -> None:
        positions = [p for p in range(24) if p not in self.weak_positions]
        for index in self.rng.integers(0, 1 << 16, 20):
            received = np.repeat(self.codebook[index][None, :], len(positions), axis=0)
            received[np.arange(len(positions)), positions] ^= 1
            decoded = viterbi_decode(received)
            npt.assert_array_equal(np.repeat(self.payloads[index][None, :], len(positions), axis=0), decoded)

    def test_separated_double_flips(self) -> None:
        checked = 0
        weights = self.codebook.sum(axis=1).astype(int)
        for p in range(24):
            for q in range(p + 12, 24):
                error = np.zeros(24, dtype=np.uint8)
                error[[p, q]] = 1
                # decoding is provably right when every other codeword is farther than the error
                overlap = self.codebook[1:, [p, q]].sum(axis=1).astype(int)
                if not np.all(weights[1:] + 2 - 2 * overlap > 2):
                    continue
                index = int(self.rng.integers(0, 1 << 16))
                received = self.codebook[index] ^ error
                npt.assert_array_equal(self.payloads[index], viterbi_decode(received))
                checked += 1
        self.assertGreater(checked, 0)


class TestInterleaver(unittest.TestCase):

    def test_two_bins_sequential(self) -> None:
        npt.assert_array_equal([0, 1], interleave_order(2))

    def test_six_bins_stride(self) -> None:
        npt.assert_array_equal([0, 2, 4, 1, 3, 5], interleave_order(6))

    def test_bijection(self) -> None:
        for used in range(1, 61):
            order = interleave_order(used)
            npt.assert_array_equal(np.arange(used), np.sort(order))

    def test_roundtrip(self) -> None:
        rng = np.random.default_rng(2)
        for used in (1, 2, 5, 10, 24, 37, 60):
            bits = rng.integers(0, 2, 24).astype(np.uint8)
            grid = interleave(bits, used, rng.integers(0, 2, used).astype(np.uint8))
            self.assertEqual((symbols_needed(24, used), used), grid.shape)
            npt.assert_array_equal(bits, deinterleave(grid, 24))

    def test_placement_fills_first_symbol_first(self) -> None:
        slots = placement(24, 10)
        npt.assert_array_equal([0] * 10 + [1] * 10 + [2] * 4, slots[:, 0])

    def test_filler_shortfall(self) -> None:
        with self.assertRaises(SignalError):
            interleave(np.zeros(24, dtype=np.uint8), 10, np.zeros(2, dtype=np.uint8))
        with self.assertRaises(SignalError):
            interleave_order(0)
