import os
import logging
from dataclasses import dataclass, fields, replace
from functools import cached_property
from typing import Any, Dict, Optional

import numpy as np
import yaml

try:
    from errors import ConfigError
except ModuleNotFoundError:
    from src.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "config.yaml")

# CP length at the reference 960-point FFT; other spacings scale it
_REFERENCE_FFT = 960
_REFERENCE_CP = 67


@dataclass(frozen=True)
class ModemConfig:
    """All PHY constants. Derived sizes are computed from rate, spacing and band edges."""
    sample_rate: int = 48000
    subcarrier_spacing: float = 50.0
    band_low_hz: float = 1000.0
    band_high_hz: float = 4000.0
    eq_len: int = 480
    eq_delay: int = 8
    bandpass_order: int = 128
    snr_threshold_db: float = 7.0
    snr_boost: float = 0.8
    snr_floor_db: float = -30.0
    snr_cap_db: float = 40.0
    n_preamble_symbols: int = 8
    cazac_root: int = 1
    coarse_threshold: float = 0.35
    sync_threshold: float = 0.6
    sync_step: int = 8
    training_threshold: float = 0.3
    feedback_prominence: float = 0.5
    ack_threshold_db: float = 6.0
    payload_bits: int = 16
    max_range_m: float = 30.0
    sound_speed: float = 1500.0
    processing_symbols: int = 5
    retry_limit: int = 3
    symbol_rms: float = 0.25
    tx_peak: float = 0.9

    def __post_init__(self):
        if self.sample_rate <= 0 or self.subcarrier_spacing <= 0:
            raise ConfigError("sample_rate and subcarrier_spacing must be positive")
        ratio = self.sample_rate / self.subcarrier_spacing
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"fft_size * spacing must equal the sample rate "
                f"({self.sample_rate} / {self.subcarrier_spacing} is not an integer)")
        if not 0 < self.band_low_hz < self.band_high_hz <= self.sample_rate / 2:
            raise ConfigError(f"invalid band {self.band_low_hz}-{self.band_high_hz} Hz")
        if self.n_preamble_symbols < 2:
            raise ConfigError("preamble needs at least two symbols")

    @property
    def fft_size(self) -> int:
        return int(round(self.sample_rate / self.subcarrier_spacing))

    @property
    def cp_len(self) -> int:
        return int(round(_REFERENCE_CP * self.fft_size / _REFERENCE_FFT))

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cp_len

    @cached_property
    def band_bins(self) -> np.ndarray:
        """FFT indices of the usable subcarriers, low to high"""
        first = int(round(self.band_low_hz / self.subcarrier_spacing))
        last = int(round(self.band_high_hz / self.subcarrier_spacing))
        return np.arange(first, last)

    @property
    def n_bins(self) -> int:
        return len(self.band_bins)

    def bin_frequency(self, index) -> np.ndarray:
        """Centre frequency of band index (0 = lowest usable subcarrier)"""
        return (self.band_bins[0] + np.asarray(index)) * self.subcarrier_spacing

    @property
    def preamble_len(self) -> int:
        return self.n_preamble_symbols * self.fft_size

    @property
    def header_len(self) -> int:
        """Preamble plus the ID symbol"""
        return self.preamble_len + self.symbol_len

    @property
    def max_rtt_samples(self) -> int:
        return int(np.ceil(2 * self.max_range_m / self.sound_speed * self.sample_rate))

    @property
    def feedback_timeout_samples(self) -> int:
        """Max round trip plus processing allowance plus the feedback symbol itself"""
        return self.max_rtt_samples + (self.processing_symbols + 1) * self.symbol_len

    @property
    def cp_overhead(self) -> float:
        return self.cp_len / self.fft_size

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ModemConfig":
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown modem settings: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def with_spacing(self, spacing: float) -> "ModemConfig":
        return replace(self, subcarrier_spacing=spacing)


def load_profile(path: Optional[str] = None, profile: str = "default") -> Dict[str, Any]:
    """Raw profile dictionary (modem, channel and mac sections) from a YAML file"""
    path = path or os.getenv("UWMODEM_CONFIG") or DEFAULT_CONFIG_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e

    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    profiles = document.get("profiles", {})
    if profile not in profiles:
        raise ConfigError(f"profile '{profile}' not found in {path} (have: {', '.join(profiles)})")
    logger.info(f"Loaded profile '{profile}' from {path}")
    return profiles[profile] or {}


def load_config(path: Optional[str] = None, profile: str = "default") -> ModemConfig:
    return ModemConfig.from_dict(load_profile(path, profile).get("modem"))
