"""
Data path of the modem.

Transmit: conv_encode -> interleave -> differential BPSK across symbols -> IFFT + cyclic prefix,
behind a known training symbol. Receive: bandpass -> time-domain MMSE equalizer trained on the
training symbol -> per-bin phase differences -> de-interleave -> Viterbi.
"""
import csv
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, signal

try:
    from errors import SignalError, PacketLostError
    from modem_config import ModemConfig
    from dsp import synthesize_symbol, analyze_symbol, symbol_gain, apply_filter, receive_filter
    from preamble import PreambleSpec, cazac_bins, normalized_correlation
    from adapt import BandSelection
    from coding import conv_encode, viterbi_decode, interleave, deinterleave, symbols_needed, DEFAULT_CODE, _kept_mask
except ModuleNotFoundError:
    from src.errors import SignalError, PacketLostError
    from src.modem_config import ModemConfig
    from src.dsp import synthesize_symbol, analyze_symbol, symbol_gain, apply_filter, receive_filter
    from src.preamble import PreambleSpec, cazac_bins, normalized_correlation
    from src.adapt import BandSelection
    from src.coding import conv_encode, viterbi_decode, interleave, deinterleave, symbols_needed, DEFAULT_CODE, _kept_mask

logger = logging.getLogger(__name__)

# relative ridge keeping the normal equations positive definite
_RIDGE_FLOOR = 1e-8


@dataclass
class DemodResult:
    payload: np.ndarray
    confidence: np.ndarray
    coded_soft: np.ndarray
    coded_hard: np.ndarray
    training_score: float = 0.0

    @property
    def uncoded_bits(self) -> np.ndarray:
        """Hard decisions on the coded bits before Viterbi"""
        return self.coded_hard

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidence))


def coded_length(cfg: ModemConfig) -> int:
    return DEFAULT_CODE.coded_length(cfg.payload_bits)


def data_symbol_count(sel: BandSelection, cfg: ModemConfig) -> int:
    return symbols_needed(coded_length(cfg), sel.width)


def packet_length(sel: BandSelection, cfg: ModemConfig) -> int:
    """Training symbol plus data symbols, each with its cyclic prefix"""
    return (1 + data_symbol_count(sel, cfg)) * cfg.symbol_len


def filler_bits(packet_index: int, n: int) -> np.ndarray:
    """Known pseudo-random bits for the unused slots of the last symbol"""
    return np.random.default_rng(packet_index).integers(0, 2, size=n).astype(np.uint8)


def training_values(sel: BandSelection, cfg: ModemConfig) -> np.ndarray:
    spec = PreambleSpec.from_config(cfg)
    return cazac_bins(spec, cfg)[sel.m:sel.n + 1]


def training_symbol(sel: BandSelection, cfg: ModemConfig) -> np.ndarray:
    return synthesize_symbol(training_values(sel, cfg), cfg.band_bins[sel.m:sel.n + 1], cfg)


def diff_encode(bits: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-bin symbol sequence: bit 1 flips the sign of the previous symbol, bit 0 repeats it"""
    bits = np.atleast_2d(bits)
    signs = np.cumprod(1 - 2 * bits.astype(int), axis=0)
    return signs * np.asarray(reference)[np.newaxis, :]


def diff_decode(values: np.ndarray) -> np.ndarray:
    """Soft decisions from consecutive rows of per-bin values (row 0 is the reference)"""
    products = values[1:] * np.conj(values[:-1])
    scale = np.mean(np.abs(products))
    return np.real(products) / scale if scale > 0 else np.zeros(products.shape)


def coherent_decode(values: np.ndarray) -> np.ndarray:
    """Soft decisions of every data row against the training row only"""
    products = values[1:] * np.conj(values[0])[np.newaxis, :]
    scale = np.mean(np.abs(products))
    return np.real(products) / scale if scale > 0 else np.zeros(products.shape)


def modulate_packet(payload, sel: Optional[BandSelection], cfg: ModemConfig,
                    packet_index: int = 0, differential: bool = True) -> np.ndarray:
    payload = np.asarray(payload, dtype=np.uint8).reshape(-1)
    if payload.size != cfg.payload_bits:
        raise SignalError(f"payload must be {cfg.payload_bits} bits, got {payload.size}")
    if sel is None or sel.width < 1:
        raise SignalError("cannot modulate on an empty band")

    coded = conv_encode(payload)
    n_symbols = symbols_needed(coded.size, sel.width)
    grid = interleave(coded, sel.width, filler_bits(packet_index, n_symbols * sel.width - coded.size))
    return modulate_frame(grid, sel, cfg, differential)


def modulate_frame(grid: np.ndarray, sel: BandSelection, cfg: ModemConfig, differential: bool = True) -> np.ndarray:
    """Training symbol followed by one BPSK symbol per row of the (n_symbols, width) bit grid"""
    grid = np.atleast_2d(np.asarray(grid))
    if grid.shape[1] != sel.width:
        raise SignalError(f"bit grid has {grid.shape[1]} columns for a {sel.width}-bin band")
    bins = cfg.band_bins[sel.m:sel.n + 1]
    reference = training_values(sel, cfg)
    if differential:
        data = diff_encode(grid, reference)
    else:
        data = (1 - 2 * grid.astype(int)) * reference[np.newaxis, :]

    symbols = [synthesize_symbol(reference, bins, cfg)]
    symbols += [synthesize_symbol(row, bins, cfg) for row in data]
    return np.concatenate(symbols)


def estimate_equalizer(rx_training: np.ndarray, tx_training: np.ndarray, eq_len: int,
                       noise_var: float = 0.0, delay: int = 0) -> np.ndarray:
    """Wiener taps g minimising sum |g * y - x(t - delay)|^2 over the training symbol.

    noise_var is the per-sample noise variance of rx_training; it regularises the
    autocorrelation matrix.
    """
    y = np.asarray(rx_training, dtype=float)
    x = np.asarray(tx_training, dtype=float)
    if y.size == 0 or x.size == 0:
        raise SignalError("equalizer training needs non-empty signals")

    acf = signal.correlate(y, y, mode="full")[y.size - 1:]
    column = np.zeros(eq_len)
    column[:min(eq_len, acf.size)] = acf[:eq_len]
    column[0] += y.size * noise_var + _RIDGE_FLOOR * max(column[0], 1e-300)

    # xc[k] = sum_s x[s] y[s + k]
    xc = signal.correlate(y, x, mode="full")
    lags = delay - np.arange(eq_len)
    index = lags + x.size - 1
    rhs = np.zeros(eq_len)
    valid = (index >= 0) & (index < xc.size)
    rhs[valid] = xc[index[valid]]

    try:
        taps = linalg.solve_toeplitz(column, rhs)
        if not np.all(np.isfinite(taps)):
            raise np.linalg.LinAlgError("non-finite equalizer taps")
    except (np.linalg.LinAlgError, ValueError) as e:
        logger.warning(f"Toeplitz solve failed ({e}); using regularised least squares")
        matrix = linalg.toeplitz(column)
        matrix[np.diag_indices(eq_len)] += 1e-6 * max(column[0], 1e-300)
        taps = linalg.lstsq(matrix, rhs)[0]
    return taps


def apply_equalizer(samples: np.ndarray, taps: np.ndarray, delay: int = 0) -> np.ndarray:
    """Apply taps and undo the decision delay; output has the input's length"""
    samples = np.asarray(samples, dtype=float)
    padded = np.concatenate([samples, np.zeros(delay)])
    out = signal.fftconvolve(padded, taps)[:padded.size]
    return out[delay:]


def equalization_residual_db(taps: np.ndarray, rx: np.ndarray, tx: np.ndarray, delay: int = 0) -> float:
    """Energy of g * y - x relative to x, over the length of x"""
    tx = np.asarray(tx, dtype=float)
    rx = np.concatenate([np.asarray(rx, dtype=float), np.zeros(max(0, tx.size - len(rx)))])
    estimate = apply_equalizer(rx, taps, delay)[:tx.size]
    return float(10 * np.log10(np.sum((estimate - tx) ** 2) / np.sum(tx ** 2)))


def _training_score(filtered: np.ndarray, start: int, reference: np.ndarray, reach: int) -> float:
    lo = max(0, start - reach)
    hi = min(len(filtered), start + len(reference) + reach)
    if hi - lo < len(reference):
        return 0.0
    return float(np.max(normalized_correlation(filtered[lo:hi], reference)))


def _per_symbol_values(samples: np.ndarray, n_symbols: int, sel: BandSelection, cfg: ModemConfig) -> np.ndarray:
    starts = np.arange(n_symbols) * cfg.symbol_len + cfg.cp_len
    segments = np.stack([samples[s:s + cfg.fft_size] for s in starts])
    return analyze_symbol(segments, cfg)[:, sel.m:sel.n + 1]


def _write_trace(trace_dir: str, packet_index: int, sel: BandSelection, cfg: ModemConfig,
                 filtered_values: np.ndarray, equalized_values: np.ndarray) -> None:
    os.makedirs(trace_dir, exist_ok=True)
    path = os.path.join(trace_dir, f"packet_{packet_index:05d}.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["symbol", "bin", "freq_hz", "post_filter_db", "post_equalizer_db"])
        writer.writeheader()
        for i in range(filtered_values.shape[0]):
            for j in range(filtered_values.shape[1]):
                writer.writerow({
                    "symbol": i,
                    "bin": sel.m + j,
                    "freq_hz": float(cfg.bin_frequency(sel.m + j)),
                    "post_filter_db": round(float(20 * np.log10(abs(filtered_values[i, j]) + 1e-12)), 3),
                    "post_equalizer_db": round(float(20 * np.log10(abs(equalized_values[i, j]) + 1e-12)), 3),
                })
    logger.debug(f"Receive-chain trace written to {path}")


def _receive(stream: np.ndarray, sync: int, n_data: int, sel: BandSelection, cfg: ModemConfig,
             equalize: bool, noise_var: float):
    """Per-bin values of the training and data symbols, before and after equalization"""
    stream = np.asarray(stream, dtype=float)
    length = (1 + n_data) * cfg.symbol_len
    if sync < 0 or sync + length > len(stream):
        raise PacketLostError(f"packet at {sync} runs past the end of the {len(stream)}-sample stream")

    filtered = apply_filter(stream, receive_filter(cfg))
    reference = training_symbol(sel, cfg)
    score = _training_score(filtered, sync, reference, cfg.cp_len)
    if score < cfg.training_threshold:
        raise PacketLostError(f"training symbol not found at {sync} (score {score:.3f})")

    tail = cfg.eq_delay
    segment = filtered[sync:sync + length + tail]
    segment = np.concatenate([segment, np.zeros(length + tail - segment.size)])
    if equalize:
        per_sample_noise = noise_var * symbol_gain(cfg) ** 2 / cfg.fft_size
        taps = estimate_equalizer(segment[:cfg.symbol_len + tail], reference, cfg.eq_len,
                                  per_sample_noise, cfg.eq_delay)
        equalized = apply_equalizer(segment, taps, cfg.eq_delay)[:length]
    else:
        equalized = segment[:length]

    raw = _per_symbol_values(segment[:length], 1 + n_data, sel, cfg)
    values = _per_symbol_values(equalized, 1 + n_data, sel, cfg)
    return values, raw, score


def demodulate_frame(stream: np.ndarray, sync: int, n_data: int, sel: BandSelection, cfg: ModemConfig,
                     equalize: bool = True, differential: bool = True, noise_var: float = 0.0) -> np.ndarray:
    """Soft values (n_data, width) of an uncoded frame built by modulate_frame"""
    values, _, _ = _receive(stream, sync, n_data, sel, cfg, equalize, noise_var)
    return diff_decode(values) if differential else coherent_decode(values)


def demodulate_packet(stream: np.ndarray, sync: int, sel: BandSelection, cfg: ModemConfig,
                      equalize: bool = True, differential: bool = True,
                      hard_decision: bool = False, noise_var: float = 0.0,
                      packet_index: int = 0, trace_dir: Optional[str] = None) -> DemodResult:
    """Full receive chain for a packet whose training symbol starts at `sync`.

    noise_var is the per-bin noise variance from the preamble (adapt.measure_noise_variance).
    Raises PacketLostError if the training symbol is not where it should be.
    """
    n_data = data_symbol_count(sel, cfg)
    values, raw, score = _receive(stream, sync, n_data, sel, cfg, equalize, noise_var)
    soft_grid = diff_decode(values) if differential else coherent_decode(values)
    coded_soft = deinterleave(soft_grid, coded_length(cfg))
    coded_hard = (coded_soft < 0).astype(np.uint8)
    if hard_decision:
        payload = viterbi_decode(coded_hard)
    else:
        payload = viterbi_decode(coded_soft, soft=True)

    # agreement of the received soft values with the re-encoded decision, per info bit
    agreement = coded_soft * (1.0 - 2.0 * conv_encode(payload))
    step_of_bit = np.nonzero(_kept_mask(DEFAULT_CODE, cfg.payload_bits))[0]
    confidence = np.bincount(step_of_bit, weights=agreement, minlength=cfg.payload_bits) / \
        np.bincount(step_of_bit, minlength=cfg.payload_bits)

    if trace_dir:
        _write_trace(trace_dir, packet_index, sel, cfg, raw, values)
    logger.debug(f"Packet {packet_index} demodulated on {sel.width} bins, training score {score:.3f}")
    return DemodResult(payload.astype(np.uint8), confidence, coded_soft, coded_hard, score)
