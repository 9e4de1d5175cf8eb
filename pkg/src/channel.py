"""
Simulated underwater acoustic channel.

Sparse multipath taps with deep frequency notches, coloured ambient noise scaled to an in-band
SNR, wideband Doppler by resampling, forward/backward asymmetry, and a time-varying variant in
which every path drifts with its own random velocity.
"""
import functools
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

try:
    from errors import ConfigError, SignalError
    from modem_config import ModemConfig, SCHEMA_VERSION
    from modem_enums import Mobility
    from dsp import band_energy, band_power_gain, read_wav
    from utils import derive_rng, db_to_power
except ModuleNotFoundError:
    from src.errors import ConfigError, SignalError
    from src.modem_config import ModemConfig, SCHEMA_VERSION
    from src.modem_enums import Mobility
    from src.dsp import band_energy, band_power_gain, read_wav
    from src.utils import derive_rng, db_to_power

logger = logging.getLogger(__name__)

# relative level (dB) of ambient noise over frequency; strong below 1 kHz
DEFAULT_NOISE_SHAPE: Tuple[Tuple[float, float], ...] = (
    (0.0, 20.0), (500.0, 15.0), (1000.0, 3.0), (2000.0, 0.0),
    (4000.0, -3.0), (6000.0, -6.0), (24000.0, -10.0),
)

# Doppler offsets are quoted at the top of the signal band
DOPPLER_REFERENCE_HZ = 4000.0

# site analogs: noise level relative to nominal, notch depth range and delay spread
SITE_PRESETS: Dict[str, Dict[str, Any]] = {
    "bridge": {"noise_level_db": 0.0, "notch_depth_db": (10.0, 14.0), "max_delay": 240},
    "park": {"noise_level_db": 3.0, "notch_depth_db": (12.0, 17.0), "max_delay": 360},
    "lake": {"noise_level_db": 6.0, "notch_depth_db": (10.0, 20.0), "max_delay": 480},
    "beach": {"noise_level_db": 9.0, "notch_depth_db": (15.0, 20.0), "max_delay": 480},
}


@dataclass(frozen=True)
class NoiseProfile:
    """Ambient noise PSD shape as (frequency Hz, relative dB) points plus an overall level.

    A `recording` WAV path replaces the synthetic shape with replayed ambient noise.
    """
    points: Tuple[Tuple[float, float], ...] = DEFAULT_NOISE_SHAPE
    level_db: float = 0.0
    recording: Optional[str] = None

    def __post_init__(self):
        freqs = [p[0] for p in self.points]
        if len(freqs) < 2 or freqs[0] != 0.0 or any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ConfigError("noise shape needs increasing frequencies starting at 0 Hz")

    def shaping_filter(self, rate: float, numtaps: int = 257) -> np.ndarray:
        freqs = [f for f, _ in self.points if f < rate / 2] + [rate / 2]
        gains_db = list(np.interp(freqs, [f for f, _ in self.points], [g for _, g in self.points]))
        return signal.firwin2(numtaps, freqs, db_to_power(np.asarray(gains_db) / 2.0), fs=rate)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "NoiseProfile":
        if not data:
            return cls()
        points = data.get("points")
        points = tuple((float(f), float(g)) for f, g in points) if points else DEFAULT_NOISE_SHAPE
        return cls(points=points, level_db=float(data.get("level_db", 0.0)), recording=data.get("recording"))


@dataclass(frozen=True)
class ChannelModel:
    taps: Tuple[Tuple[int, float], ...] = ((0, 1.0),)
    noise_profile: NoiseProfile = field(default_factory=NoiseProfile)
    # in-band SNR at the nominal noise level; None disables noise
    snr_db: Optional[float] = None
    doppler_hz: float = 0.0
    reciprocal: bool = True
    seed: int = 0
    notch_depth_db: Tuple[float, float] = (10.0, 20.0)
    max_delay: int = 480
    n_taps: Tuple[int, int] = (3, 8)

    def __post_init__(self):
        if not self.taps:
            raise ConfigError("a channel needs at least one tap")
        if any(int(d) < 0 for d, _ in self.taps):
            raise ConfigError("tap delays must be non-negative")

    @property
    def effective_snr_db(self) -> Optional[float]:
        if self.snr_db is None:
            return None
        return self.snr_db - self.noise_profile.level_db

    def impulse_response(self) -> np.ndarray:
        h = np.zeros(max(int(d) for d, _ in self.taps) + 1)
        for delay, gain in self.taps:
            h[int(delay)] += gain
        return h

    def with_taps(self, taps: Sequence[Tuple[int, float]]) -> "ChannelModel":
        return replace(self, taps=tuple((int(d), float(g)) for d, g in taps))

    @classmethod
    def random(cls, seed: int, snr_db: Optional[float] = None, **kwargs) -> "ChannelModel":
        """Model with freshly drawn multipath taps"""
        base = cls(seed=seed, snr_db=snr_db, **kwargs)
        taps = make_channel_taps(derive_rng(seed, 0), base.n_taps, base.max_delay, base.notch_depth_db)
        return base.with_taps(taps)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ChannelModel":
        """Channel from a YAML mapping; `taps: random` draws taps from `seed`"""
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported channel schema_version {version}")
        params: Dict[str, Any] = {}
        site = data.pop("site", None)
        if site is not None:
            if site not in SITE_PRESETS:
                raise ConfigError(f"unknown site '{site}' (have: {', '.join(SITE_PRESETS)})")
            preset = SITE_PRESETS[site]
            params.update(notch_depth_db=preset["notch_depth_db"], max_delay=preset["max_delay"])
            params["noise_profile"] = NoiseProfile(level_db=preset["noise_level_db"])

        taps = data.pop("taps", "random")
        if "noise" in data:
            params["noise_profile"] = NoiseProfile.from_dict(data.pop("noise"))
        for key in ("snr_db", "doppler_hz", "reciprocal", "seed", "max_delay"):
            if key in data:
                params[key] = data.pop(key)
        for key in ("notch_depth_db", "n_taps"):
            if key in data:
                params[key] = tuple(data.pop(key))
        if data:
            raise ConfigError(f"unknown channel settings: {', '.join(sorted(data))}")

        try:
            if taps == "random":
                return cls.random(**{"seed": params.pop("seed", 0), **params})
            return cls(taps=tuple((int(d), float(g)) for d, g in taps), **params)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid channel definition: {e}") from e


def make_channel_taps(rng: np.random.Generator, n_taps: Tuple[int, int] = (3, 8), max_delay: int = 480,
                      notch_depth_db: Tuple[float, float] = (10.0, 20.0)) -> List[Tuple[int, float]]:
    """Direct path plus exponentially decaying echoes.

    The strongest echo gain a is drawn so that the two-path notch depth
    20 log10((1 + a) / (1 - a)) falls in notch_depth_db; later echoes decay from it.
    """
    count = int(rng.integers(n_taps[0], n_taps[1] + 1))
    depth = rng.uniform(*notch_depth_db)
    ratio = db_to_power(depth / 2.0)
    strongest = (ratio - 1.0) / (ratio + 1.0)
    delays = np.sort(rng.choice(np.arange(1, max_delay + 1), size=count - 1, replace=False))
    decay = rng.uniform(0.3, 0.6)
    signs = rng.choice([-1.0, 1.0], size=count - 1)
    gains = strongest * decay ** np.arange(count - 1) * signs
    return [(0, 1.0)] + [(int(d), float(g)) for d, g in zip(delays, gains)]


def frequency_response(model: Union[ChannelModel, Sequence[Tuple[float, float]]], freqs_hz, rate: float) -> np.ndarray:
    """Complex response of the (possibly fractional-delay) taps at the given frequencies"""
    taps = model.taps if isinstance(model, ChannelModel) else model
    freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
    delays = np.array([d for d, _ in taps], dtype=float)
    gains = np.array([g for _, g in taps], dtype=float)
    return np.exp(-2j * np.pi * np.outer(freqs, delays) / rate) @ gains


def notch_depth_db(model: ChannelModel, cfg: ModemConfig, n_points: int = 2048) -> float:
    """Peak-to-trough ratio of |H| across the signal band"""
    freqs = np.linspace(cfg.band_low_hz, cfg.band_high_hz, n_points)
    magnitude = np.abs(frequency_response(model, freqs, cfg.sample_rate))
    return float(20 * np.log10(magnitude.max() / max(magnitude.min(), 1e-12)))


def distance_attenuation_db(distance_m: float, freq_khz: float = 2.5) -> float:
    """Spherical spreading loss plus Thorp absorption, relative to 1 m"""
    if distance_m <= 0:
        raise SignalError("distance must be positive")
    f2 = freq_khz ** 2
    thorp = 0.11 * f2 / (1 + f2) + 44 * f2 / (4100 + f2) + 2.75e-4 * f2 + 0.003
    return float(15 * np.log10(distance_m) + thorp * distance_m / 1000.0)


def snr_at_distance(source_snr_db: float, distance_m: float, freq_khz: float = 2.5) -> float:
    """In-band SNR at a range, given the SNR measured 1 m from the source"""
    return source_snr_db - distance_attenuation_db(distance_m, freq_khz)


def _doppler_resample(samples: np.ndarray, doppler_hz: float) -> np.ndarray:
    if doppler_hz == 0:
        return samples
    # an approaching source compresses the waveform by 1 + fd / f_ref
    ratio = Fraction(1.0 / (1.0 + doppler_hz / DOPPLER_REFERENCE_HZ)).limit_denominator(4000)
    return signal.resample_poly(samples, ratio.numerator, ratio.denominator)


def _in_band_power(samples: np.ndarray, cfg: ModemConfig) -> float:
    """In-band energy per sample over the span between the first and last non-zero sample"""
    active = np.flatnonzero(samples)
    if active.size == 0:
        return 0.0
    span = samples[active[0]:active[-1] + 1]
    return band_energy(span, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate) / span.size


def shaped_noise(n: int, profile: NoiseProfile, cfg: ModemConfig, rng: np.random.Generator) -> np.ndarray:
    """Coloured noise with unit in-band power per sample"""
    taps = profile.shaping_filter(cfg.sample_rate)
    white = rng.standard_normal(n + len(taps))
    coloured = signal.lfilter(taps, 1.0, white)[len(taps):]
    return coloured / np.sqrt(band_power_gain(taps, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate))


def _unit_in_band(raw: np.ndarray, cfg: ModemConfig) -> np.ndarray:
    measured = band_energy(raw, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate) / max(len(raw), 1)
    if measured <= 0:
        raise SignalError("noise recording has no power between "
                          f"{cfg.band_low_hz:.0f} and {cfg.band_high_hz:.0f} Hz")
    return raw / np.sqrt(measured)


def _replay(recorded: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n samples of a recording from a random starting point, wrapping around"""
    offset = int(rng.integers(0, len(recorded)))
    return np.resize(np.roll(recorded, -offset), n)


def ambient_noise(n: int, profile: NoiseProfile, cfg: ModemConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit in-band power noise, replayed from the profile's recording when it names one"""
    if profile.recording is None:
        return shaped_noise(n, profile, cfg, rng)
    return _unit_in_band(_replay(load_noise(profile.recording, cfg), n, rng), cfg)


def add_noise(samples: np.ndarray, model: ChannelModel, cfg: ModemConfig, rng: np.random.Generator,
              noise_power: Optional[float] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Add noise at the model's SNR, or at an absolute in-band power per sample.

    The scale is set on the realization, so the in-band SNR of the output matches exactly.
    A recorded `noise` array, or the noise profile's recording, replaces the synthetic
    noise (tiled if short).
    """
    if noise_power is None:
        snr = model.effective_snr_db
        if snr is None:
            return samples
        noise_power = _in_band_power(samples, cfg) / db_to_power(snr)
    if noise is None:
        raw = ambient_noise(len(samples), model.noise_profile, cfg, rng)
    else:
        raw = _replay(np.asarray(noise, dtype=float), len(samples), rng)
    measured = band_energy(raw, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate) / max(len(raw), 1)
    if measured <= 0:
        return samples
    return samples + raw * np.sqrt(noise_power / measured)


def apply(samples: np.ndarray, model: ChannelModel, cfg: ModemConfig, rng: Optional[np.random.Generator] = None,
          noise_power: Optional[float] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """y = h * x (+ Doppler) + n; output keeps the full convolution tail"""
    samples = np.asarray(samples, dtype=float)
    rng = rng or np.random.default_rng(model.seed)
    received = signal.fftconvolve(samples, model.impulse_response()) if samples.size else samples
    received = _doppler_resample(received, model.doppler_hz)
    return add_noise(received, model, cfg, rng, noise_power, noise)


def make_nonreciprocal_pair(model: ChannelModel, seed: int) -> Tuple[ChannelModel, ChannelModel]:
    """Forward and backward channels; independent multipath unless the model is reciprocal"""
    if model.reciprocal:
        return model, model
    forward, backward = (
        model.with_taps(make_channel_taps(derive_rng(seed, direction), model.n_taps, model.max_delay,
                                          model.notch_depth_db))
        for direction in (1, 2))
    return forward, backward


@dataclass(frozen=True)
class MobilityRegime:
    """Relative motion statistics: common speed, per-path speed spread and gain drift"""
    mean_speed: float = 0.0
    speed_sigma: float = 0.0
    path_sigma: float = 0.0
    gain_drift: float = 0.0
    correlation_time: float = 1.0

    @property
    def is_static(self) -> bool:
        return not any((self.mean_speed, self.speed_sigma, self.path_sigma, self.gain_drift))

    @classmethod
    def preset(cls, mobility: Mobility) -> "MobilityRegime":
        return {
            Mobility.STATIC: cls(),
            Mobility.SLOW: cls(mean_speed=0.3, speed_sigma=0.1, path_sigma=0.05, gain_drift=0.05),
            Mobility.FAST: cls(mean_speed=1.5, speed_sigma=0.5, path_sigma=0.3, gain_drift=0.4),
        }[mobility]


class ChannelProcess:
    """Time-varying multipath: each path's delay follows its integrated velocity and its gain drifts.

    Velocities are Ornstein-Uhlenbeck processes on a 10 ms grid, interpolated to the sample rate.
    """

    GRID_S = 0.01

    def __init__(self, model: ChannelModel, regime: MobilityRegime, cfg: ModemConfig,
                 rng: np.random.Generator, duration_s: float = 5.0):
        self.model = model
        self.regime = regime
        self.cfg = cfg
        self.horizon = int(duration_s * cfg.sample_rate)
        n_grid = int(np.ceil(duration_s / self.GRID_S)) + 2
        n_paths = len(model.taps)
        t_grid = np.arange(n_grid) * self.GRID_S

        common = self._ou(rng, n_grid, rng.choice([-1.0, 1.0]) * regime.mean_speed, regime.speed_sigma)
        own = np.stack([self._ou(rng, n_grid, 0.0, regime.path_sigma) for _ in range(n_paths)])
        velocity = common[np.newaxis, :] + own
        displacement = np.cumsum(velocity, axis=1) * self.GRID_S
        displacement -= displacement[:, :1]
        steps = rng.standard_normal((n_paths, n_grid)) * regime.gain_drift * np.sqrt(self.GRID_S)
        drift = np.cumsum(steps, axis=1)
        drift -= drift[:, :1]

        base_delays = np.array([d for d, _ in model.taps], dtype=float)
        base_gains = np.array([g for _, g in model.taps], dtype=float)
        delays = base_delays[:, np.newaxis] + displacement / cfg.sound_speed * cfg.sample_rate
        gains = base_gains[:, np.newaxis] * np.exp(drift)
        self._delay_curve = CubicSpline(t_grid, delays, axis=1)
        self._gain_curve = CubicSpline(t_grid, gains, axis=1)

    def _ou(self, rng: np.random.Generator, n: int, mean: float, sigma: float) -> np.ndarray:
        theta = 1.0 / self.regime.correlation_time
        a = np.exp(-theta * self.GRID_S)
        noise = rng.standard_normal(n) * sigma * np.sqrt(1 - a * a)
        out = np.empty(n)
        out[0] = mean + sigma * rng.standard_normal()
        for i in range(1, n):
            out[i] = mean + a * (out[i - 1] - mean) + noise[i]
        return out

    def taps_at(self, n: int) -> List[Tuple[float, float]]:
        """(fractional delay, gain) of every path at sample index n"""
        if not 0 <= n < self.horizon:
            raise SignalError(f"sample {n} is outside the {self.horizon}-sample process horizon")
        if self.regime.is_static:
            return [(float(d), float(g)) for d, g in self.model.taps]
        t = n / self.cfg.sample_rate
        return list(zip(self._delay_curve(t).tolist(), self._gain_curve(t).tolist()))

    def response_at(self, n: int) -> np.ndarray:
        """Per-subcarrier response at sample index n"""
        freqs = self.cfg.bin_frequency(np.arange(self.cfg.n_bins))
        return frequency_response(self.taps_at(n), freqs, self.cfg.sample_rate)

    def apply(self, samples: np.ndarray, rng: Optional[np.random.Generator] = None,
              noise_power: Optional[float] = None) -> np.ndarray:
        samples = np.asarray(samples, dtype=float)
        if self.regime.is_static:
            return apply(samples, replace(self.model, doppler_hz=0.0), self.cfg, rng, noise_power)
        span = len(samples) + int(np.ceil(max(d for d, _ in self.model.taps))) + 1
        if span + self.cfg.max_rtt_samples > self.horizon:
            raise SignalError("signal is longer than the channel process horizon")
        rng = rng or np.random.default_rng(self.model.seed)
        extra = self.cfg.max_rtt_samples
        n_out = span + extra
        t = np.arange(n_out)
        delays = self._delay_curve(t / self.cfg.sample_rate)
        gains = self._gain_curve(t / self.cfg.sample_rate)
        source = CubicSpline(np.arange(len(samples)), samples, extrapolate=False)
        received = np.zeros(n_out)
        for path in range(len(self.model.taps)):
            received += gains[path] * np.nan_to_num(source(t - delays[path]))
        return add_noise(received, self.model, self.cfg, rng, noise_power)


def time_varying(model: ChannelModel, rate_of_change: Union[Mobility, MobilityRegime], cfg: ModemConfig,
                 rng: Optional[np.random.Generator] = None, duration_s: float = 5.0) -> ChannelProcess:
    regime = rate_of_change if isinstance(rate_of_change, MobilityRegime) else MobilityRegime.preset(rate_of_change)
    return ChannelProcess(model, regime, cfg, rng or derive_rng(model.seed, 3), duration_s)


def noise_power_for(model: ChannelModel, cfg: ModemConfig, signal_power: Optional[float] = None,
                    freqs_hz: Optional[Sequence[float]] = None) -> float:
    """Absolute in-band noise power per sample giving the model's SNR after the channel.

    The reference is a full-band data symbol unless signal_power (mean power per sample)
    and the frequencies it occupies are given.
    """
    snr = model.effective_snr_db
    if snr is None:
        return 0.0
    if freqs_hz is None:
        freqs = cfg.bin_frequency(np.arange(cfg.n_bins))
    else:
        freqs = np.asarray(freqs_hz, dtype=float)
    power = cfg.symbol_rms ** 2 if signal_power is None else signal_power
    channel_gain = np.mean(np.abs(frequency_response(model, freqs, cfg.sample_rate)) ** 2)
    return power * channel_gain / db_to_power(snr)


class ChannelStream:
    """Sample-clock channel for the live link: filter state, propagation delay and noise carry
    over between chunks. noise_power is absolute in-band power per sample."""

    def __init__(self, model: ChannelModel, cfg: ModemConfig, rng: np.random.Generator,
                 noise_power: float = 0.0, delay_samples: int = 0):
        self.cfg = cfg
        self.rng = rng
        self.taps = np.concatenate([np.zeros(int(delay_samples)), model.impulse_response()])
        self._zi = np.zeros(len(self.taps) - 1)
        self._noise_taps = model.noise_profile.shaping_filter(cfg.sample_rate)
        self._noise_zi = np.zeros(len(self._noise_taps) - 1)
        self._recording: Optional[np.ndarray] = None
        self._cursor = 0
        if model.noise_profile.recording is not None:
            self._recording = _unit_in_band(load_noise(model.noise_profile.recording, cfg), cfg)
            self._cursor = int(rng.integers(0, len(self._recording)))
            gain = 1.0
        else:
            gain = band_power_gain(self._noise_taps, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate)
        self._noise_scale = np.sqrt(noise_power / gain) if noise_power > 0 else 0.0

    @classmethod
    def for_model(cls, model: ChannelModel, cfg: ModemConfig, rng: np.random.Generator,
                  distance_m: float = 10.0) -> "ChannelStream":
        """Noise level set from the model's SNR relative to a full-band data symbol through the channel"""
        noise_power = noise_power_for(model, cfg)
        delay = int(round(distance_m / cfg.sound_speed * cfg.sample_rate))
        return cls(model, cfg, rng, noise_power, delay)

    def push(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=float)
        out, self._zi = signal.lfilter(self.taps, 1.0, chunk, zi=self._zi)
        if self._noise_scale > 0 and self._recording is not None:
            index = (self._cursor + np.arange(len(chunk))) % len(self._recording)
            self._cursor = (self._cursor + len(chunk)) % len(self._recording)
            out = out + self._noise_scale * self._recording[index]
        elif self._noise_scale > 0:
            white = self.rng.standard_normal(len(chunk))
            coloured, self._noise_zi = signal.lfilter(self._noise_taps, 1.0, white, zi=self._noise_zi)
            out = out + self._noise_scale * coloured
        return out


def load_impulse_response(path: str, cfg: ModemConfig, floor_db: float = -30.0) -> List[Tuple[int, float]]:
    """Sparse taps from a measured impulse response WAV; samples below floor_db of the peak are dropped"""
    response = read_wav(path, cfg.sample_rate).samples
    peak = np.max(np.abs(response)) if response.size else 0.0
    if peak == 0:
        raise SignalError(f"{path} holds an all-zero impulse response")
    keep = np.flatnonzero(np.abs(response) >= peak * db_to_power(floor_db / 2.0))
    start = keep[0]
    taps = [(int(i - start), float(response[i] / peak)) for i in keep]
    logger.info(f"Loaded {len(taps)} taps spanning {taps[-1][0]} samples from {path}")
    return taps


@functools.lru_cache(maxsize=8)
def _recorded_noise(path: str, rate: int) -> np.ndarray:
    samples = read_wav(path, rate).samples
    if samples.size == 0:
        raise SignalError(f"{path} holds no samples")
    samples.setflags(write=False)
    logger.info(f"Loaded {samples.size / rate:.1f} s of ambient noise from {path}")
    return samples


def load_noise(path: str, cfg: ModemConfig) -> np.ndarray:
    """Recorded ambient noise for replay through add_noise/apply and ChannelStream (read once per path)"""
    return _recorded_noise(path, cfg.sample_rate)
