"""Per-subcarrier channel and SNR estimation, contiguous band selection and the two-tone feedback symbol."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from errors import SignalError
    from modem_config import ModemConfig
    from dsp import synthesize_symbol, analyze_symbol, symbol_gain
    from preamble import PreambleSpec
except ModuleNotFoundError:
    from src.errors import SignalError
    from src.modem_config import ModemConfig
    from src.dsp import synthesize_symbol, analyze_symbol, symbol_gain
    from src.preamble import PreambleSpec

logger = logging.getLogger(__name__)

# second feedback tone must stand this far above the median of the other bins
_TONE_OVER_MEDIAN = 10.0
_TONE_OVER_FIRST = 1e-4


@dataclass(frozen=True)
class BandSelection:
    m: int
    n: int
    f_begin: float
    f_end: float
    below_threshold: bool = False

    def __post_init__(self):
        if not 0 <= self.m <= self.n:
            raise SignalError(f"invalid band selection ({self.m}, {self.n})")

    @property
    def width(self) -> int:
        return self.n - self.m + 1

    @classmethod
    def from_bins(cls, m: int, n: int, cfg: ModemConfig, below_threshold: bool = False) -> "BandSelection":
        if n >= cfg.n_bins:
            raise SignalError(f"band end {n} outside the {cfg.n_bins} usable subcarriers")
        return cls(int(m), int(n), float(cfg.bin_frequency(m)), float(cfg.bin_frequency(n)), below_threshold)


def _selection(m: int, n: int, cfg: ModemConfig, below_threshold: bool = False) -> BandSelection:
    return BandSelection(int(m), int(n), float(cfg.bin_frequency(m)), float(cfg.bin_frequency(n)), below_threshold)


def full_band(cfg: ModemConfig) -> BandSelection:
    return BandSelection.from_bins(0, cfg.n_bins - 1, cfg)


def fixed_band(low_hz: float, high_hz: float, cfg: ModemConfig) -> BandSelection:
    """Baseline band covering [low_hz, high_hz) regardless of the channel"""
    m = int(round((low_hz - cfg.band_low_hz) / cfg.subcarrier_spacing))
    n = int(round((high_hz - cfg.band_low_hz) / cfg.subcarrier_spacing)) - 1
    m = max(m, 0)
    n = min(n, cfg.n_bins - 1)
    if n < m:
        raise SignalError(f"fixed band {low_hz}-{high_hz} Hz holds no subcarrier")
    return BandSelection.from_bins(m, n, cfg)


def coded_bitrate(sel: BandSelection, cfg: ModemConfig, code_rate: float = 2.0 / 3.0) -> float:
    """Information bits per second after the convolutional code"""
    return sel.width * code_rate * cfg.sample_rate / cfg.symbol_len


def preamble_matrix(spec: PreambleSpec, cazac: np.ndarray) -> np.ndarray:
    """Transmitted per-bin values x(k) for every preamble symbol, shape (n_symbols, n_bins)"""
    return np.outer(np.asarray(spec.pn_signs, dtype=float), cazac)


def estimate_channel(rx_segments: np.ndarray, tx_values: np.ndarray, cfg: ModemConfig,
                     noise_var: float = 0.0) -> np.ndarray:
    """Per-bin MMSE channel estimate from stacked received/transmitted preamble symbols.

    rx_segments are time-domain (n_symbols, fft_size); tx_values are the per-bin values
    x(k) of each symbol, (n_symbols, n_bins). noise_var is the per-bin noise variance in
    the same units; zero gives the least-squares estimate.
    """
    tx_values = np.atleast_2d(np.asarray(tx_values, dtype=complex))
    y = analyze_symbol(np.atleast_2d(rx_segments), cfg)
    power = np.sum(np.abs(tx_values) ** 2, axis=0)
    if np.any(power == 0):
        raise SignalError("channel estimate undefined on a bin with no transmitted energy")
    return np.sum(np.conj(tx_values) * y, axis=0) / (power + noise_var)


def measure_noise_variance(rx_segments: np.ndarray, cfg: ModemConfig, guard_hz: float = 1000.0) -> float:
    """Per-bin noise variance from the bins just above the signal band"""
    rx_segments = np.atleast_2d(rx_segments)
    spectrum = np.fft.rfft(rx_segments, axis=-1)
    freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    mask = (freqs >= cfg.band_high_hz + cfg.subcarrier_spacing) & (freqs < cfg.band_high_hz + guard_hz)
    if not np.any(mask):
        return 0.0
    return float(np.mean(np.abs(spectrum[:, mask]) ** 2) / symbol_gain(cfg) ** 2)


def estimate_snr(H: np.ndarray, x: np.ndarray, y: np.ndarray, cfg: ModemConfig,
                 unbiased: bool = True) -> np.ndarray:
    """SNR_k = 20 log10(|H x| / |y - H x|) per bin, clipped to the configured range.

    x, y are (n_symbols, n_bins). With unbiased=True the residual energy is scaled by
    n/(n-1) because one complex degree of freedom per bin went into fitting H.
    """
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    fitted = H[np.newaxis, :] * x
    signal_energy = np.sum(np.abs(fitted) ** 2, axis=0)
    residual = np.sum(np.abs(y - fitted) ** 2, axis=0)
    n = x.shape[0]
    if unbiased and n > 1:
        residual = residual * n / (n - 1)

    snr = np.full(H.shape, cfg.snr_cap_db)
    nonzero = residual > signal_energy * 1e-12
    snr[nonzero] = 10 * np.log10(np.maximum(signal_energy[nonzero], 1e-300) / residual[nonzero])
    return np.clip(snr, cfg.snr_floor_db, cfg.snr_cap_db)


def select_band(snr_db: np.ndarray, cfg: ModemConfig, threshold_db: Optional[float] = None,
                boost: Optional[float] = None) -> BandSelection:
    """Widest contiguous window whose boosted minimum SNR clears the threshold.

    Windows are scanned from L = N0 down to 1 and, within a width, from the lowest start
    bin, so ties go to the lowest frequencies. If nothing passes, the best single bin is
    returned with below_threshold set.
    """
    snr_db = np.asarray(snr_db, dtype=float)
    n0 = snr_db.size
    if n0 < 1:
        raise SignalError("SNR vector is empty")
    eps = cfg.snr_threshold_db if threshold_db is None else threshold_db
    lam = cfg.snr_boost if boost is None else boost

    for width in range(n0, 0, -1):
        window_min = sliding_window_view(snr_db, width).min(axis=1)
        passing = np.flatnonzero(window_min + lam * 10 * np.log10(n0 / width) > eps)
        if passing.size:
            m = int(passing[0])
            return _selection(m, m + width - 1, cfg)

    best = int(np.argmax(snr_db))
    logger.warning(f"No subcarrier clears {eps} dB; falling back to bin {best} ({snr_db[best]:.1f} dB)")
    return _selection(best, best, cfg, below_threshold=True)


def encode_feedback(sel: BandSelection, cfg: ModemConfig) -> np.ndarray:
    """One OFDM symbol with the full-band symbol energy split over bins m and n"""
    if sel.m == sel.n:
        values = np.array([np.sqrt(cfg.n_bins)], dtype=complex)
        bins = cfg.band_bins[[sel.m]]
    else:
        values = np.full(2, np.sqrt(cfg.n_bins / 2.0), dtype=complex)
        bins = cfg.band_bins[[sel.m, sel.n]]
    return synthesize_symbol(values, bins, cfg)


def sliding_band_power(stream: np.ndarray, cfg: ModemConfig, step: Optional[int] = None) -> np.ndarray:
    """In-band bin powers of every fft_size window taken every `step` samples"""
    stream = np.asarray(stream, dtype=float)
    step = step or cfg.sync_step
    if len(stream) < cfg.fft_size:
        return np.zeros((0, cfg.n_bins))
    windows = sliding_window_view(stream, cfg.fft_size)[::step]
    return np.abs(analyze_symbol(windows, cfg)) ** 2


def decode_feedback(stream: np.ndarray, search_window: int, cfg: ModemConfig) -> Optional[BandSelection]:
    """Two-tone feedback decoder; None when no window concentrates enough power in two bins"""
    stream = np.asarray(stream[:search_window], dtype=float)
    powers = sliding_band_power(stream, cfg)
    if powers.size == 0:
        return None

    total = powers.sum(axis=1)
    order = np.argsort(powers, axis=1)
    rows = np.arange(len(powers))
    first, second = order[:, -1], order[:, -2]
    top2 = powers[rows, first] + powers[rows, second]
    ratio = np.where(total > 0, top2 / np.maximum(total, 1e-300), 0.0)
    k = int(np.argmax(ratio))
    if ratio[k] <= cfg.feedback_prominence:
        return None

    p_first = powers[k, first[k]]
    p_second = powers[k, second[k]]
    rest = np.delete(powers[k], [first[k], second[k]])
    floor = np.median(rest) if rest.size else 0.0
    if p_second > _TONE_OVER_MEDIAN * floor and p_second > _TONE_OVER_FIRST * p_first:
        m, n = sorted((int(first[k]), int(second[k])))
    else:
        m = n = int(first[k])
    logger.debug(f"Feedback decoded as ({m}, {n}) with prominence {ratio[k]:.3f}")
    return BandSelection.from_bins(m, n, cfg)
