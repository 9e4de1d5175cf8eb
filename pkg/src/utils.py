from typing import Sequence

import numpy as np
from scipy.special import erfc


def db_to_power(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def power_to_db(power, floor: float = 1e-30):
    return 10.0 * np.log10(np.maximum(np.asarray(power, dtype=float), floor))


def q_function(x):
    """Gaussian tail probability Q(x)"""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def bpsk_ber_theory(snr_db):
    """Coherent BPSK bit error rate Q(sqrt(2*SNR)) at a per-bin SNR in dB"""
    return q_function(np.sqrt(2.0 * db_to_power(snr_db)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, trial, stream...) so trials can be replayed in any order"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def int_to_bits(value: int, n_bits: int) -> np.ndarray:
    """MSB-first bit vector"""
    if value < 0 or value >= (1 << n_bits):
        raise ValueError(f"{value} does not fit in {n_bits} bits")
    return np.array([(value >> i) & 1 for i in range(n_bits - 1, -1, -1)], dtype=np.uint8)


def bits_to_int(bits: Sequence[int]) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def format_band(m: int, n: int, f_begin: float, f_end: float) -> str:
    """Human-readable band summary used by the CLI and the event trace"""
    return f"bins {m}-{n} ({f_begin:.0f}-{f_end:.0f} Hz, {n - m + 1} subcarriers)"
