"""CAZAC preamble generation and two-stage detection (coarse correlation, then sliding PN metric)."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

try:
    from errors import SignalError
    from modem_config import ModemConfig
    from dsp import synthesize_symbol, cross_correlate, window_energy, apply_filter, receive_filter
except ModuleNotFoundError:
    from src.errors import SignalError
    from src.modem_config import ModemConfig
    from src.dsp import synthesize_symbol, cross_correlate, window_energy, apply_filter, receive_filter

logger = logging.getLogger(__name__)

PN_SIGNS = (-1, 1, 1, 1, 1, 1, -1, 1)


@dataclass(frozen=True)
class PreambleSpec:
    n_symbols: int = 8
    pn_signs: Tuple[int, ...] = PN_SIGNS
    cazac_root: int = 1
    band: Tuple[float, float] = (1000.0, 4000.0)

    def __post_init__(self):
        if len(self.pn_signs) != self.n_symbols:
            raise SignalError("one PN sign per preamble symbol is required")
        if any(s not in (-1, 1) for s in self.pn_signs):
            raise SignalError("PN signs must be +1 or -1")

    @classmethod
    def from_config(cls, cfg: ModemConfig) -> "PreambleSpec":
        signs = PN_SIGNS if cfg.n_preamble_symbols == len(PN_SIGNS) else tuple([1] * cfg.n_preamble_symbols)
        return cls(n_symbols=cfg.n_preamble_symbols, pn_signs=signs, cazac_root=cfg.cazac_root,
                   band=(cfg.band_low_hz, cfg.band_high_hz))


@dataclass
class SyncResult:
    sample_index: int
    peak_value: float
    candidates: List[int] = field(default_factory=list)


def zadoff_chu(root: int, length: int) -> np.ndarray:
    n = np.arange(length)
    if length % 2 == 0:
        return np.exp(-1j * np.pi * root * n * n / length)
    return np.exp(-1j * np.pi * root * n * (n + 1) / length)


def cazac_bins(spec: PreambleSpec, cfg: ModemConfig) -> np.ndarray:
    """CAZAC values, one per usable subcarrier"""
    return zadoff_chu(spec.cazac_root, cfg.n_bins)


def _check_band(spec: PreambleSpec, cfg: ModemConfig) -> None:
    low, high = spec.band
    if not 0 < low < high <= cfg.sample_rate / 2:
        raise SignalError(f"preamble band {low}-{high} Hz is outside (0, {cfg.sample_rate / 2}) Hz")


def build_symbol(spec: PreambleSpec, cfg: ModemConfig) -> np.ndarray:
    _check_band(spec, cfg)
    return synthesize_symbol(cazac_bins(spec, cfg), cfg.band_bins, cfg, cyclic_prefix=False)


def build_preamble(spec: PreambleSpec, cfg: ModemConfig) -> np.ndarray:
    symbol = build_symbol(spec, cfg)
    return np.concatenate([sign * symbol for sign in spec.pn_signs])


def normalized_correlation(stream: np.ndarray, template: np.ndarray) -> np.ndarray:
    """|<template, window>| / (|template| |window|) for every offset, in [0, 1]"""
    corr = cross_correlate(stream, template)
    energy = window_energy(stream, len(template))
    norm = np.sqrt(energy) * np.linalg.norm(template)
    out = np.zeros_like(corr)
    valid = norm > 1e-12
    out[valid] = np.abs(corr[valid]) / norm[valid]
    return np.minimum(out, 1.0)


def coarse_detect(stream: np.ndarray, preamble: np.ndarray, threshold: float = 0.35,
                  min_separation: Optional[int] = None) -> List[int]:
    """Local correlation peaks above threshold; false positives are left for the sliding stage"""
    stream = np.asarray(stream, dtype=float)
    if len(stream) < len(preamble):
        return []
    score = normalized_correlation(stream, preamble)
    above = np.flatnonzero(score > threshold)
    if above.size == 0:
        return []

    separation = min_separation or len(preamble) // 8
    candidates = []
    start = 0
    # split the above-threshold indices into clusters and keep each cluster's peak
    breaks = np.flatnonzero(np.diff(above) > separation)
    for end in list(breaks) + [above.size - 1]:
        cluster = above[start:end + 1]
        candidates.append(int(cluster[np.argmax(score[cluster])]))
        start = end + 1
    return candidates


def sliding_metric_series(stream: np.ndarray, offsets: np.ndarray, spec: PreambleSpec,
                          cfg: ModemConfig) -> np.ndarray:
    """sliding_metric evaluated at many offsets using running sums"""
    stream = np.asarray(stream, dtype=float)
    offsets = np.asarray(offsets, dtype=int)
    n = cfg.fft_size
    span = spec.n_symbols * n
    if offsets.size and (offsets.min() < 0 or offsets.max() + span > len(stream)):
        raise SignalError("sliding window does not fit in the stream at the requested offset")

    lagged = np.zeros(len(stream))
    lagged[:len(stream) - n] = stream[:-n] * stream[n:]
    lag_sum = np.concatenate([[0.0], np.cumsum(lagged)])
    sq_sum = np.concatenate([[0.0], np.cumsum(stream ** 2)])

    numerator = np.zeros(offsets.shape)
    denominator = np.zeros(offsets.shape)
    for i in range(spec.n_symbols - 1):
        a = offsets + i * n
        sign = spec.pn_signs[i] * spec.pn_signs[i + 1]
        numerator += sign * (lag_sum[a + n] - lag_sum[a])
        e_i = sq_sum[a + n] - sq_sum[a]
        e_next = sq_sum[a + 2 * n] - sq_sum[a + n]
        denominator += 0.5 * (e_i + e_next)

    metric = np.zeros(offsets.shape)
    valid = denominator > 1e-12
    metric[valid] = numerator[valid] / denominator[valid]
    return np.clip(metric, 0.0, 1.0)


def sliding_metric(stream: np.ndarray, offset: int, spec: PreambleSpec, cfg: ModemConfig) -> float:
    """PN-despread correlation between adjacent segments over the window energy"""
    return float(sliding_metric_series(stream, np.array([offset]), spec, cfg)[0])


def detect_and_sync(stream: np.ndarray, spec: PreambleSpec, cfg: ModemConfig,
                    prefiltered: bool = False) -> Optional[SyncResult]:
    """Start index of the strongest valid preamble in the stream, or None"""
    stream = np.asarray(stream, dtype=float)
    span = spec.n_symbols * cfg.fft_size
    if len(stream) < span or not np.any(stream):
        return None
    filtered = stream if prefiltered else apply_filter(stream, receive_filter(cfg))

    preamble = build_preamble(spec, cfg)
    candidates = coarse_detect(filtered, preamble, cfg.coarse_threshold)
    if not candidates:
        return None

    reach = 2 * cfg.fft_size
    best: Optional[SyncResult] = None
    for candidate in candidates:
        offsets = candidate + np.arange(-reach, reach + 1, cfg.sync_step)
        offsets = offsets[(offsets >= 0) & (offsets + span <= len(filtered))]
        if offsets.size == 0:
            continue
        metric = sliding_metric_series(filtered, offsets, spec, cfg)
        k = int(np.argmax(metric))
        if metric[k] > cfg.sync_threshold and (best is None or metric[k] > best.peak_value):
            best = SyncResult(int(offsets[k]), float(metric[k]), candidates)

    if best is None:
        logger.debug(f"{len(candidates)} coarse candidates rejected by the sliding metric")
    else:
        logger.debug(f"Preamble at sample {best.sample_index} (metric {best.peak_value:.3f})")
    return best


def preamble_segments(stream: np.ndarray, start: int, spec: PreambleSpec, cfg: ModemConfig) -> np.ndarray:
    """The n_symbols received preamble segments as rows, PN signs not removed"""
    n = cfg.fft_size
    end = start + spec.n_symbols * n
    if start < 0 or end > len(stream):
        raise SignalError("preamble window does not fit in the stream")
    return np.asarray(stream[start:end], dtype=float).reshape(spec.n_symbols, n)
