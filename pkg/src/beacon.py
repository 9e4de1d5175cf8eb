"""Low-rate FSK SoS beacon: a dual-tone onset marker followed by one tone per bit, MSB first."""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

try:
    from errors import ConfigError, SignalError
    from dsp import design_bandpass, apply_filter, peak_normalize, window_energy
    from utils import int_to_bits, bits_to_int
except ModuleNotFoundError:
    from src.errors import ConfigError, SignalError
    from src.dsp import design_bandpass, apply_filter, peak_normalize, window_energy
    from src.utils import int_to_bits, bits_to_int

logger = logging.getLogger(__name__)

BEACON_BAND = (1500.0, 4000.0)
SYMBOL_DURATIONS_MS = (50, 100, 200)
# central share of each bit segment used for the energy comparison
_CENTRAL = 0.8


@dataclass(frozen=True)
class BeaconConfig:
    f0: float = 2000.0
    f1: float = 3000.0
    symbol_ms: int = 100
    marker_ms: int = 100
    n_bits: int = 6
    sample_rate: int = 48000
    peak: float = 0.9
    onset_threshold: float = 0.2

    def __post_init__(self):
        low, high = BEACON_BAND
        for tone in (self.f0, self.f1):
            if not low <= tone <= high:
                raise ConfigError(f"beacon tone {tone} Hz outside {low:.0f}-{high:.0f} Hz")
        if self.f0 == self.f1:
            raise ConfigError("beacon tones must differ")
        if self.symbol_ms not in SYMBOL_DURATIONS_MS:
            raise ConfigError(f"symbol duration must be one of {SYMBOL_DURATIONS_MS} ms")
        if self.n_bits not in (6, 8):
            raise ConfigError("a beacon carries a 6-bit ID or an 8-bit message code")

    @property
    def rate_bps(self) -> float:
        return 1000.0 / self.symbol_ms

    @property
    def symbol_len(self) -> int:
        return int(round(self.symbol_ms * self.sample_rate / 1000))

    @property
    def marker_len(self) -> int:
        return int(round(self.marker_ms * self.sample_rate / 1000))

    @property
    def total_len(self) -> int:
        return self.marker_len + self.n_bits * self.symbol_len

    @classmethod
    def from_rate(cls, rate_bps: float, **kwargs) -> "BeaconConfig":
        return cls(symbol_ms=int(round(1000 / rate_bps)), **kwargs)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "BeaconConfig":
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"invalid beacon settings: {e}") from e


def _tone(freq: float, n: int, rate: int, start: int = 0) -> np.ndarray:
    t = np.arange(start, start + n) / rate
    return np.sin(2 * np.pi * freq * t)


def beacon_encode(value: int, cfg: BeaconConfig = BeaconConfig()) -> np.ndarray:
    """Marker burst then n_bits tone segments; tone phase runs continuously across segments"""
    if not 0 <= value < (1 << cfg.n_bits):
        raise SignalError(f"beacon value {value} does not fit in {cfg.n_bits} bits")
    parts = [0.5 * (_tone(cfg.f0, cfg.marker_len, cfg.sample_rate) + _tone(cfg.f1, cfg.marker_len, cfg.sample_rate))]
    position = cfg.marker_len
    for bit in int_to_bits(value, cfg.n_bits):
        parts.append(_tone(cfg.f1 if bit else cfg.f0, cfg.symbol_len, cfg.sample_rate, position))
        position += cfg.symbol_len
    return peak_normalize(np.concatenate(parts), cfg.peak)


def _sliding_tone_energy(samples: np.ndarray, freq: float, width: int, rate: int) -> np.ndarray:
    """|sum x[t] exp(-j w t)|^2 / width for every window of `width` samples"""
    mixed = samples * np.exp(-2j * np.pi * freq * np.arange(len(samples)) / rate)
    running = np.concatenate([[0.0], np.cumsum(mixed)])
    return np.abs(running[width:] - running[:-width]) ** 2 / width


def find_onset(stream: np.ndarray, cfg: BeaconConfig) -> Optional[int]:
    """Start of the dual-tone marker, or None when no window holds both tones"""
    stream = np.asarray(stream, dtype=float)
    width = cfg.marker_len
    if len(stream) < width:
        return None
    taps = design_bandpass(128, BEACON_BAND[0] - 100, BEACON_BAND[1] + 100, cfg.sample_rate)
    filtered = apply_filter(stream, taps)
    e0 = _sliding_tone_energy(filtered, cfg.f0, width, cfg.sample_rate)
    e1 = _sliding_tone_energy(filtered, cfg.f1, width, cfg.sample_rate)
    total = window_energy(filtered, width)
    score = np.zeros_like(total)
    valid = total > 1e-12
    # a clean marker scores 1: each tone holds a quarter of the window energy
    score[valid] = 4.0 * np.minimum(e0[valid], e1[valid]) / total[valid]
    best = int(np.argmax(score))
    if score[best] < cfg.onset_threshold:
        logger.debug(f"No beacon marker (best score {score[best]:.3f})")
        return None
    return best


def _segment_energy(segment: np.ndarray, freq: float, rate: int, start: int) -> float:
    t = np.arange(start, start + len(segment)) / rate
    return float(np.abs(np.sum(segment * np.exp(-2j * np.pi * freq * t))) ** 2)


def beacon_bits(stream: np.ndarray, cfg: BeaconConfig, onset: Optional[int] = None) -> Optional[np.ndarray]:
    stream = np.asarray(stream, dtype=float)
    if onset is None:
        onset = find_onset(stream, cfg)
        if onset is None:
            return None
    margin = int(round((1 - _CENTRAL) / 2 * cfg.symbol_len))
    bits = np.zeros(cfg.n_bits, dtype=np.uint8)
    for i in range(cfg.n_bits):
        lo = onset + cfg.marker_len + i * cfg.symbol_len + margin
        hi = lo + cfg.symbol_len - 2 * margin
        if lo < 0 or hi > len(stream):
            logger.debug(f"Beacon bit {i} runs past the stream")
            return None
        segment = stream[lo:hi]
        bits[i] = _segment_energy(segment, cfg.f1, cfg.sample_rate, lo) > \
            _segment_energy(segment, cfg.f0, cfg.sample_rate, lo)
    return bits


def beacon_decode(stream: np.ndarray, cfg: BeaconConfig = BeaconConfig(), onset: Optional[int] = None) -> Optional[int]:
    """Decoded value, or None when the marker is not found.

    `onset` overrides marker detection with a known start sample.
    """
    bits = beacon_bits(stream, cfg, onset)
    return None if bits is None else bits_to_int(bits)
