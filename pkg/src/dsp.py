"""Signal-processing primitives shared by the modem, the channel simulator and the harness."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal
from scipy.io import wavfile

try:
    from errors import SignalError, WavFormatError
    from modem_config import ModemConfig
except ModuleNotFoundError:
    from src.errors import SignalError, WavFormatError
    from src.modem_config import ModemConfig

logger = logging.getLogger(__name__)

_PCM_SCALE = 32767.0
STOPBAND_SKIRT_HZ = 300.0
STOPBAND_ATTENUATION_DB = 46.0


@dataclass
class SampleBuffer:
    """Real audio samples at a given rate, full scale +-1.0"""
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1)
        if self.rate <= 0:
            raise SignalError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("sample buffer contains non-finite values")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


def fft(segment: np.ndarray, fft_size: int) -> np.ndarray:
    segment = np.asarray(segment)
    if segment.shape[-1] != fft_size:
        raise SignalError(f"FFT input must be {fft_size} samples, got {segment.shape[-1]}")
    return np.fft.fft(segment, axis=-1)


def ifft(spectrum: np.ndarray, fft_size: int) -> np.ndarray:
    """Inverse of fft; the imaginary residue of a Hermitian spectrum is dropped"""
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != fft_size:
        raise SignalError(f"IFFT input must be {fft_size} bins, got {spectrum.shape[-1]}")
    return np.real(np.fft.ifft(spectrum, axis=-1))


def symbol_gain(cfg: ModemConfig) -> float:
    """Scale that gives a full-band unit-magnitude symbol the configured RMS"""
    return cfg.symbol_rms * cfg.fft_size / np.sqrt(2.0 * cfg.n_bins)


def synthesize_symbol(values: np.ndarray, bins: np.ndarray, cfg: ModemConfig,
                      cyclic_prefix: bool = True) -> np.ndarray:
    """Real OFDM symbol carrying complex `values` on FFT indices `bins`, other bins zero"""
    half = np.zeros(cfg.fft_size // 2 + 1, dtype=complex)
    half[np.asarray(bins)] = values
    symbol = np.fft.irfft(half, n=cfg.fft_size) * symbol_gain(cfg)
    if cyclic_prefix:
        symbol = np.concatenate([symbol[-cfg.cp_len:], symbol])
    return symbol


def analyze_symbol(segment: np.ndarray, cfg: ModemConfig) -> np.ndarray:
    """Per-band-bin complex values of an N-sample segment, in the units synthesize_symbol uses"""
    spectrum = np.fft.rfft(np.asarray(segment, dtype=float), n=cfg.fft_size, axis=-1)
    return spectrum[..., cfg.band_bins] / symbol_gain(cfg)


def design_bandpass(order: int, low: float, high: float, rate: float,
                    skirt_hz: float = STOPBAND_SKIRT_HZ,
                    attenuation_db: float = STOPBAND_ATTENUATION_DB) -> np.ndarray:
    """Linear-phase Kaiser bandpass with order+1 taps.

    The stopband starts skirt_hz outside [low, high] and is attenuated by at least
    attenuation_db there. With 129 taps the transition is wider than the skirt, so
    the band edges themselves sit on the inner slope of the response.
    """
    if not 0 < low < high < rate / 2:
        raise SignalError(f"invalid band edges {low}-{high} Hz for rate {rate}")
    if order < 2:
        raise SignalError("filter order must be at least 2")
    # Kaiser's estimate of the transition width reachable with this many taps
    width_hz = (attenuation_db - 7.95) / (2.285 * order) * rate / (2 * np.pi)
    cut_low = low - skirt_hz + width_hz / 2
    cut_high = high + skirt_hz - width_hz / 2
    if not 0 < cut_low < cut_high < rate / 2:
        raise SignalError(f"{order}-order filter cannot reach {attenuation_db} dB "
                          f"{skirt_hz} Hz outside {low}-{high} Hz")
    beta = signal.kaiser_beta(attenuation_db)
    return signal.firwin(order + 1, [cut_low, cut_high], pass_zero=False, window=("kaiser", beta), fs=rate)


def receive_filter(cfg: ModemConfig) -> np.ndarray:
    return design_bandpass(cfg.bandpass_order, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate)


def apply_filter(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """FIR filtering with the group delay removed so sample indices stay aligned"""
    samples = np.asarray(samples, dtype=float)
    delay = (len(taps) - 1) // 2
    full = signal.fftconvolve(samples, taps, mode="full")
    return full[delay:delay + len(samples)]


def frequency_gain_db(taps: np.ndarray, freqs_hz, rate: float) -> np.ndarray:
    _, response = signal.freqz(taps, worN=np.atleast_1d(np.asarray(freqs_hz, dtype=float)), fs=rate)
    return 20 * np.log10(np.maximum(np.abs(response), 1e-15))


def cross_correlate(stream: np.ndarray, template: np.ndarray) -> np.ndarray:
    """output[i] = sum_j template[j] * stream[i + j] for every full overlap"""
    stream = np.asarray(stream, dtype=float)
    template = np.asarray(template, dtype=float)
    if stream.size == 0 or template.size == 0:
        raise SignalError("cross-correlation inputs must not be empty")
    if template.size > stream.size:
        raise SignalError("template must be shorter than the stream")
    return signal.correlate(stream, template, mode="valid", method="auto")


def window_energy(stream: np.ndarray, length: int) -> np.ndarray:
    """Energy of every length-sample window, same indexing as cross_correlate"""
    squared = np.concatenate([[0.0], np.cumsum(np.asarray(stream, dtype=float) ** 2)])
    return np.maximum(squared[length:] - squared[:-length], 0.0)


def band_energy(samples: np.ndarray, low: float, high: float, rate: float) -> float:
    """Energy of the real signal between low and high Hz (both spectral sides)"""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return 0.0
    spectrum = np.fft.rfft(samples)
    freqs = np.fft.rfftfreq(samples.size, d=1.0 / rate)
    mask = (freqs >= low) & (freqs < high) & (freqs > 0) & (freqs < rate / 2)
    return float(2.0 * np.sum(np.abs(spectrum[mask]) ** 2) / samples.size)


def band_power_gain(taps: np.ndarray, low: float, high: float, rate: float, n_grid: int = 8192) -> float:
    """In-band output power of the FIR driven by unit-variance white noise"""
    freqs, response = signal.freqz(taps, worN=n_grid, fs=rate)
    mask = (freqs >= low) & (freqs < high)
    df = freqs[1] - freqs[0]
    return float(2.0 / rate * np.sum(np.abs(response[mask]) ** 2) * df)


def peak_normalize(samples: np.ndarray, peak: float = 0.9) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    top = np.max(np.abs(samples)) if samples.size else 0.0
    if top == 0:
        return samples.copy()
    return samples * (peak / top)


def write_wav(path: str, buf: SampleBuffer) -> None:
    """Mono 16-bit PCM; samples beyond full scale are clipped"""
    pcm = np.round(np.clip(buf.samples, -1.0, 1.0) * _PCM_SCALE).astype("<i2")
    wavfile.write(path, buf.rate, pcm)
    logger.info(f"Wrote {len(pcm)} samples ({buf.duration:.3f} s) to {path}")


def read_wav(path: str, expected_rate: Optional[int] = None) -> SampleBuffer:
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as e:
        raise WavFormatError(f"{path} is not a readable WAV file: {e}") from e
    except FileNotFoundError as e:
        raise WavFormatError(f"WAV file not found: {path}") from e

    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path} is sampled at {rate} Hz, expected {expected_rate} Hz")
    if data.ndim != 1:
        raise WavFormatError(f"{path} has {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        samples = data.astype(float) / _PCM_SCALE
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(float)
    else:
        raise WavFormatError(f"{path} uses unsupported sample format {data.dtype}")
    return SampleBuffer(samples, rate)
