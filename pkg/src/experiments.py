"""
Experiment harness: composes the modem, the simulated channel and the MAC simulator into
reproducible studies. Every study streams one CSV row per trial (flushed as it goes) and
returns a Report with the same rows plus a summary for the console.
"""
import csv
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    from errors import ConfigError, PacketLostError, SignalError
    from modem_config import ModemConfig
    from modem_enums import Mobility, Scheme
    from dsp import SampleBuffer, analyze_symbol, peak_normalize, read_wav, write_wav
    from preamble import PreambleSpec, build_preamble, cazac_bins, detect_and_sync, preamble_segments
    from adapt import (BandSelection, coded_bitrate, estimate_channel, estimate_snr, fixed_band, full_band,
                       measure_noise_variance, preamble_matrix, select_band)
    from phy import (demodulate_frame, demodulate_packet, modulate_frame, modulate_packet,
                     training_values)
    from channel import (ChannelModel, ChannelStream, NoiseProfile, apply, make_channel_taps,
                         make_nonreciprocal_pair, noise_power_for, snr_at_distance, time_varying)
    from protocol import Receiver, Sender, build_header, decode_id_symbol, run_exchange
    from beacon import BeaconConfig, beacon_decode, beacon_encode
    from mac_sim import MacConfig, Scenario, default_scenario, load_scenario, write_report_csv
    from link_events import LinkEventTracker
    from utils import bpsk_ber_theory, derive_rng, int_to_bits
except ModuleNotFoundError:
    from src.errors import ConfigError, PacketLostError, SignalError
    from src.modem_config import ModemConfig
    from src.modem_enums import Mobility, Scheme
    from src.dsp import SampleBuffer, analyze_symbol, peak_normalize, read_wav, write_wav
    from src.preamble import PreambleSpec, build_preamble, cazac_bins, detect_and_sync, preamble_segments
    from src.adapt import (BandSelection, coded_bitrate, estimate_channel, estimate_snr, fixed_band, full_band,
                           measure_noise_variance, preamble_matrix, select_band)
    from src.phy import (demodulate_frame, demodulate_packet, modulate_frame, modulate_packet,
                         training_values)
    from src.channel import (ChannelModel, ChannelStream, NoiseProfile, apply, make_channel_taps,
                             make_nonreciprocal_pair, noise_power_for, snr_at_distance, time_varying)
    from src.protocol import Receiver, Sender, build_header, decode_id_symbol, run_exchange
    from src.beacon import BeaconConfig, beacon_decode, beacon_encode
    from src.mac_sim import MacConfig, Scenario, default_scenario, load_scenario, write_report_csv
    from src.link_events import LinkEventTracker
    from src.utils import bpsk_ber_theory, derive_rng, int_to_bits

logger = logging.getLogger(__name__)

SCENARIOS = ("link", "ber_sweep", "band_adapt", "mobility", "spacing", "stability", "beacon", "mac")

# minimum SNR line of the stability study
REFERENCE_SNR_DB = 4.0

FLAT_NOISE = NoiseProfile(points=((0.0, 0.0), (24000.0, 0.0)))

SCHEME_BANDS: Dict[Scheme, Optional[Tuple[float, float]]] = {
    Scheme.ADAPTIVE: None,
    Scheme.FIXED_4K: (1000.0, 4000.0),
    Scheme.FIXED_2K5: (1000.0, 2500.0),
    Scheme.FIXED_1K5: (1000.0, 1500.0),
}

LINK_COLUMNS = ["trial", "scheme", "snr_db", "selected_band", "coded_bitrate_bps", "detected",
                "feedback_ok", "bit_errors", "packet_ok", "attempts", "delivered"]
BER_COLUMNS = ["snr_db", "bits", "bit_errors", "ber", "theory_ber", "packets", "packet_errors", "per"]
MOBILITY_COLUMNS = ["trial", "mobility", "differential", "bits", "bit_errors", "ber", "lost"]
SPACING_COLUMNS = ["spacing_hz", "distance_m", "snr_db", "trial", "detected", "selected_band",
                   "bit_errors", "packet_ok"]
STABILITY_COLUMNS = ["trial", "mobility", "selected_band", "min_snr_first_db", "min_snr_second_db",
                     "below_reference"]
BEACON_COLUMNS = ["rate_bps", "distance_m", "snr_db", "trial", "detected", "bit_errors", "ber"]


@dataclass
class ExperimentSpec:
    scenario: str
    modem: ModemConfig = field(default_factory=ModemConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    # draw fresh multipath for every trial (paired across schemes and variants)
    randomize_channel: bool = False
    trials: int = 100
    seed: int = 0
    out: Optional[str] = None
    scheme: Scheme = Scheme.ADAPTIVE
    device_id: int = 7
    distance_m: float = 10.0
    equalize: bool = True
    max_steps: int = 150
    snr_grid: Tuple[float, ...] = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    min_bits: int = 100_000
    frame_symbols: int = 10
    mobility: Tuple[Mobility, ...] = (Mobility.SLOW, Mobility.FAST)
    spacings: Tuple[float, ...] = (50.0, 25.0, 10.0)
    distances: Tuple[float, ...] = (5.0, 10.0, 20.0, 50.0, 100.0)
    source_snr_db: float = 40.0
    beacon_rates: Tuple[float, ...] = (5.0, 10.0, 20.0)
    beacon: BeaconConfig = field(default_factory=BeaconConfig)
    stability_gap_s: float = 0.5
    mac: MacConfig = field(default_factory=MacConfig)
    mac_scenario: Optional[Scenario] = None
    mac_transmitters: int = 3
    # per-symbol receive-chain spectra, written when set
    trace_dir: Optional[str] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown experiment '{self.scenario}' (have: {', '.join(SCENARIOS)})")
        if self.trials < 1:
            raise ConfigError("an experiment needs at least one trial")

    @classmethod
    def from_profile(cls, profile: Dict[str, Any], scenario: str, channel: Optional[Dict[str, Any]] = None,
                     mac_scenario_path: Optional[str] = None, **overrides) -> "ExperimentSpec":
        """Spec from a config profile (modem / channel / mac / experiment sections) plus CLI overrides"""
        channel_section = dict(channel if channel is not None else profile.get("channel") or {})
        params: Dict[str, Any] = dict(profile.get("experiment") or {})
        known = {f.name for f in fields(cls)}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"unknown experiment settings: {', '.join(sorted(unknown))}")
        for key in ("snr_grid", "spacings", "distances", "beacon_rates"):
            if key in params:
                params[key] = tuple(float(v) for v in params[key])
        try:
            if "mobility" in params:
                params["mobility"] = tuple(Mobility(v) for v in params["mobility"])
            if "scheme" in params:
                params["scheme"] = Scheme(params["scheme"])
        except ValueError as e:
            raise ConfigError(f"invalid experiment settings: {e}") from e
        if "beacon" in params:
            params["beacon"] = BeaconConfig.from_dict(params["beacon"])

        params.update(
            scenario=scenario,
            modem=ModemConfig.from_dict(profile.get("modem")),
            channel=ChannelModel.from_dict(channel_section),
            randomize_channel=channel_section.get("taps", "random") == "random",
            mac=MacConfig.from_dict(profile.get("mac")),
        )
        if mac_scenario_path:
            params["mac_scenario"] = load_scenario(mac_scenario_path)
        params.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**params)
        except TypeError as e:
            raise ConfigError(f"invalid experiment settings: {e}") from e


@dataclass
class Report:
    name: str
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None


class ReportWriter:
    """CSV report that is rewritten at the start of a run and appended to row by row"""

    def __init__(self, report: Report, path: Optional[str]):
        self.report = report
        self._file = None
        self._writer = None
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            self._file = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._file, fieldnames=report.columns)
            self._writer.writeheader()
            self._file.flush()
            report.path = path
            logger.info(f"Writing {report.name} report to {path}")

    def __enter__(self) -> "ReportWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def write(self, row: Dict[str, Any]) -> None:
        self.report.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)
            self._file.flush()

    def close(self) -> None:
        if self._file and not self._file.closed:
            self._file.close()


def _band_label(sel: Optional[BandSelection]) -> str:
    return f"{sel.m}-{sel.n}" if sel is not None else ""


def trial_channel(spec: ExperimentSpec, trial: int, snr_db: Optional[float] = None) -> ChannelModel:
    """The trial's channel realization; identical for every scheme or variant of the same trial"""
    model = spec.channel if snr_db is None else replace(spec.channel, snr_db=snr_db)
    if not spec.randomize_channel:
        return model
    seed = int(derive_rng(spec.seed, trial, 7).integers(2 ** 31))
    taps = make_channel_taps(derive_rng(seed, 0), model.n_taps, model.max_delay, model.notch_depth_db)
    return replace(model, seed=seed).with_taps(taps)


def _random_payload(spec: ExperimentSpec, trial: int) -> np.ndarray:
    return derive_rng(spec.seed, trial, 3).integers(0, 2, spec.modem.payload_bits).astype(np.uint8)


def _scheme_band(scheme: Scheme, cfg: ModemConfig) -> Optional[BandSelection]:
    edges = SCHEME_BANDS[scheme]
    return None if edges is None else fixed_band(edges[0], edges[1], cfg)


@dataclass
class PreambleEstimate:
    sync: int
    noise_var: float
    H: np.ndarray
    snr_db: np.ndarray


def estimate_from_preamble(rx: np.ndarray, cfg: ModemConfig, start: Optional[int] = None) -> Optional[PreambleEstimate]:
    """Detect the preamble (or take a known start) and estimate channel and per-bin SNR"""
    spec = PreambleSpec.from_config(cfg)
    if start is None:
        sync = detect_and_sync(rx, spec, cfg)
        if sync is None:
            return None
        start = sync.sample_index
    try:
        segments = preamble_segments(rx, start, spec, cfg)
    except SignalError:
        return None
    noise_var = measure_noise_variance(segments, cfg)
    tx_values = preamble_matrix(spec, cazac_bins(spec, cfg))
    H = estimate_channel(segments, tx_values, cfg, noise_var)
    snr = estimate_snr(H, tx_values, analyze_symbol(segments, cfg), cfg)
    return PreambleEstimate(start, noise_var, H, snr)


# ---- link ----

class LinkReport(Report):
    def __init__(self, name: str = "link", rows: Optional[List[Dict[str, Any]]] = None):
        super().__init__(name, list(LINK_COLUMNS), rows or [])

    def for_scheme(self, scheme: Scheme) -> List[Dict[str, Any]]:
        return [r for r in self.rows if r["scheme"] == scheme.value]

    def packet_error_rate(self, scheme: Scheme = Scheme.ADAPTIVE) -> float:
        rows = self.for_scheme(scheme)
        return 1.0 - sum(r["packet_ok"] for r in rows) / len(rows) if rows else float("nan")

    def bitrate_cdf(self, scheme: Scheme = Scheme.ADAPTIVE) -> List[Tuple[float, float]]:
        """Empirical CDF of the coded bit rate of the selected bands"""
        rates = np.sort([r["coded_bitrate_bps"] for r in self.for_scheme(scheme) if r["selected_band"]])
        if rates.size == 0:
            return []
        values, counts = np.unique(rates, return_counts=True)
        return list(zip(values.tolist(), (np.cumsum(counts) / rates.size).tolist()))


def link_trial(spec: ExperimentSpec, trial: int, scheme: Scheme = Scheme.ADAPTIVE,
               tracker: Optional[LinkEventTracker] = None) -> Dict[str, Any]:
    """One full sender/receiver exchange over the trial's channel"""
    cfg = spec.modem
    payload = _random_payload(spec, trial)
    model = trial_channel(spec, trial)
    forward_model, backward_model = make_nonreciprocal_pair(model, model.seed)
    forward = ChannelStream.for_model(forward_model, cfg, derive_rng(spec.seed, trial, 1), spec.distance_m)
    backward = ChannelStream.for_model(backward_model, cfg, derive_rng(spec.seed, trial, 2), spec.distance_m)

    decoded: List[np.ndarray] = []

    def oracle(candidate: np.ndarray) -> bool:
        decoded.append(np.array(candidate))
        return bool(np.array_equal(candidate, payload))

    sender = Sender(cfg, spec.device_id, payload, packet_index=trial, tracker=tracker, trial=trial)
    receiver = Receiver(cfg, spec.device_id, fixed_band=_scheme_band(scheme, cfg), ack_oracle=oracle,
                        tracker=tracker, trial=trial, packet_index=trial, equalize=spec.equalize,
                        trace_dir=spec.trace_dir)
    result = run_exchange(sender, receiver, forward, backward, spec.max_steps)

    sel = receiver.selection
    bit_errors = int(np.sum(decoded[0] != payload)) if decoded else cfg.payload_bits
    return {
        "trial": trial,
        "scheme": scheme.value,
        "snr_db": model.snr_db if model.snr_db is not None else "",
        "selected_band": _band_label(sel),
        "coded_bitrate_bps": round(coded_bitrate(sel, cfg), 1) if sel is not None else 0.0,
        "detected": result.detections > 0,
        "feedback_ok": result.feedback_ok,
        "bit_errors": bit_errors,
        "packet_ok": bool(decoded) and bit_errors == 0,
        "attempts": result.attempts,
        "delivered": bool(result.delivered),
    }


def run_link(spec: ExperimentSpec, schemes: Optional[Sequence[Scheme]] = None,
             tracker: Optional[LinkEventTracker] = None,
             progress: Optional[Callable[[int, int], None]] = None) -> LinkReport:
    """Sender/receiver exchanges per trial; several schemes run on paired channel and noise draws"""
    schemes = list(schemes or [spec.scheme])
    report = LinkReport()
    with ReportWriter(report, spec.out) as writer:
        for trial in range(spec.trials):
            for scheme in schemes:
                writer.write(link_trial(spec, trial, scheme, tracker))
            if progress:
                progress(trial + 1, spec.trials)
    for scheme in schemes:
        rows = report.for_scheme(scheme)
        report.summary[scheme.value] = {
            "per": round(report.packet_error_rate(scheme), 4),
            "detected": sum(r["detected"] for r in rows),
            "feedback_ok": sum(r["feedback_ok"] for r in rows),
            "mean_bitrate_bps": round(float(np.mean([r["coded_bitrate_bps"] for r in rows])), 1),
        }
    return report


def run_band_adapt(spec: ExperimentSpec, tracker: Optional[LinkEventTracker] = None,
                   progress: Optional[Callable[[int, int], None]] = None) -> LinkReport:
    """Adaptive band versus the three fixed bands; the bitrate CDF goes next to the main CSV"""
    report = run_link(spec, list(Scheme), tracker, progress)
    report.name = "band_adapt"
    if spec.out:
        stem, _ = os.path.splitext(spec.out)
        cdf_path = f"{stem}_bitrate_cdf.csv"
        with open(cdf_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["scheme", "bitrate_bps", "cdf"])
            writer.writeheader()
            for scheme in Scheme:
                for rate, p in report.bitrate_cdf(scheme):
                    writer.writerow({"scheme": scheme.value, "bitrate_bps": rate, "cdf": round(p, 4)})
        report.summary["bitrate_cdf_path"] = cdf_path
    return report


# ---- single-shot packet chain ----

@dataclass
class PacketOutcome:
    detected: bool
    selection: Optional[BandSelection] = None
    snr_db: Optional[np.ndarray] = None
    payload: Optional[np.ndarray] = None
    bit_errors: int = 0

    @property
    def ok(self) -> bool:
        return self.payload is not None and self.bit_errors == 0


def simulate_packet(model: ChannelModel, cfg: ModemConfig, rng: np.random.Generator, payload,
                    sel: Optional[BandSelection] = None, equalize: bool = True, differential: bool = True,
                    hard_decision: bool = False, packet_index: int = 0,
                    trace_dir: Optional[str] = None) -> PacketOutcome:
    """One-way packet over a static channel with ideal feedback.

    The band is picked from a first header transmission (unless `sel` fixes it), then
    header + packet go through the same channel with fresh noise.
    """
    payload = np.asarray(payload, dtype=np.uint8)
    noise_power = noise_power_for(model, cfg)
    header = build_header(0, cfg)
    quiet = np.zeros(cfg.symbol_len)

    probe = apply(np.concatenate([quiet, header, quiet]), model, cfg, rng, noise_power)
    estimate = estimate_from_preamble(probe, cfg)
    if estimate is None:
        return PacketOutcome(detected=False, bit_errors=payload.size)
    sel = sel or select_band(estimate.snr_db, cfg)

    tx = np.concatenate([quiet, header, modulate_packet(payload, sel, cfg, packet_index, differential), quiet])
    rx = apply(tx, model, cfg, rng, noise_power)
    received = estimate_from_preamble(rx, cfg)
    if received is None:
        return PacketOutcome(True, sel, estimate.snr_db, None, payload.size)
    try:
        result = demodulate_packet(rx, received.sync + cfg.header_len, sel, cfg, equalize=equalize,
                                   differential=differential, hard_decision=hard_decision,
                                   noise_var=received.noise_var, packet_index=packet_index,
                                   trace_dir=trace_dir)
    except PacketLostError as e:
        logger.debug(f"Packet {packet_index} lost: {e}")
        return PacketOutcome(True, sel, estimate.snr_db, None, payload.size)
    return PacketOutcome(True, sel, estimate.snr_db, result.payload, int(np.sum(result.payload != payload)))


# ---- BER sweep ----

def _frame_bit_errors(snr_db: float, cfg: ModemConfig, rng: np.random.Generator, n_symbols: int) -> Tuple[int, int]:
    """Uncoded coherent BPSK on every bin of an AWGN channel, referenced to the preamble estimate"""
    sel = full_band(cfg)
    grid = rng.integers(0, 2, size=(n_symbols, sel.width)).astype(np.uint8)
    preamble = build_preamble(PreambleSpec.from_config(cfg), cfg)
    tx = np.concatenate([preamble, modulate_frame(grid, sel, cfg, differential=False)])
    rx = apply(tx, ChannelModel(noise_profile=FLAT_NOISE, snr_db=snr_db), cfg, rng)

    estimate = estimate_from_preamble(rx, cfg, start=0)
    starts = len(preamble) + (1 + np.arange(n_symbols)) * cfg.symbol_len + cfg.cp_len
    values = analyze_symbol(np.stack([rx[s:s + cfg.fft_size] for s in starts]), cfg)
    expected = estimate.H * training_values(sel, cfg)
    decisions = np.real(values * np.conj(expected)[np.newaxis, :]) < 0
    return int(np.sum(decisions != grid.astype(bool))), grid.size


def run_ber_sweep(spec: ExperimentSpec, progress: Optional[Callable[[int, int], None]] = None) -> Report:
    """Uncoded BER against Q(sqrt(2 SNR)) plus coded PER on an AWGN channel, per SNR point"""
    cfg = spec.modem
    report = Report("ber_sweep", list(BER_COLUMNS))
    bits_per_frame = spec.frame_symbols * cfg.n_bins
    n_frames = max(1, int(np.ceil(spec.min_bits / bits_per_frame)))
    with ReportWriter(report, spec.out) as writer:
        for i, snr in enumerate(spec.snr_grid):
            errors = total = 0
            for frame in range(n_frames):
                e, n = _frame_bit_errors(snr, cfg, derive_rng(spec.seed, i, frame), spec.frame_symbols)
                errors += e
                total += n
            packet_errors = 0
            for trial in range(spec.trials):
                rng = derive_rng(spec.seed, i, n_frames + trial)
                payload = rng.integers(0, 2, cfg.payload_bits)
                outcome = simulate_packet(ChannelModel(noise_profile=FLAT_NOISE, snr_db=snr), cfg, rng, payload,
                                          sel=full_band(cfg), packet_index=trial)
                packet_errors += not outcome.ok
            writer.write({
                "snr_db": snr, "bits": total, "bit_errors": errors, "ber": errors / total,
                "theory_ber": float(bpsk_ber_theory(snr)), "packets": spec.trials,
                "packet_errors": packet_errors, "per": packet_errors / spec.trials,
            })
            if progress:
                progress(i + 1, len(spec.snr_grid))
    report.summary = {f"{r['snr_db']:g} dB": f"BER {r['ber']:.2e} (theory {r['theory_ber']:.2e}), PER {r['per']:.3f}"
                      for r in report.rows}
    return report


# ---- mobility ----

def mobility_trial(spec: ExperimentSpec, trial: int, mobility: Mobility) -> List[Dict[str, Any]]:
    """Differential and coherent frames over one realization of the time-varying channel"""
    cfg = spec.modem
    sel = full_band(cfg)
    model = trial_channel(spec, trial)
    process = time_varying(model, mobility, cfg, derive_rng(spec.seed, trial, 4))
    grid = derive_rng(spec.seed, trial, 5).integers(0, 2, size=(spec.frame_symbols, sel.width)).astype(np.uint8)
    preamble = build_preamble(PreambleSpec.from_config(cfg), cfg)
    quiet = np.zeros(cfg.symbol_len)
    noise_power = noise_power_for(model, cfg)

    rows = []
    for differential in (True, False):
        tx = np.concatenate([quiet, preamble, modulate_frame(grid, sel, cfg, differential), quiet])
        rx = process.apply(tx, derive_rng(spec.seed, trial, 6), noise_power)
        estimate = estimate_from_preamble(rx, cfg)
        errors, lost = grid.size // 2, True
        if estimate is not None:
            try:
                soft = demodulate_frame(rx, estimate.sync + len(preamble), spec.frame_symbols, sel, cfg,
                                        equalize=spec.equalize, differential=differential,
                                        noise_var=estimate.noise_var)
                errors, lost = int(np.sum((soft < 0) != grid.astype(bool))), False
            except PacketLostError as e:
                logger.debug(f"Mobility trial {trial} frame lost: {e}")
        rows.append({"trial": trial, "mobility": mobility.value, "differential": differential,
                     "bits": grid.size, "bit_errors": errors, "ber": errors / grid.size, "lost": lost})
    return rows


def run_mobility(spec: ExperimentSpec, progress: Optional[Callable[[int, int], None]] = None) -> Report:
    report = Report("mobility", list(MOBILITY_COLUMNS))
    with ReportWriter(report, spec.out) as writer:
        for trial in range(spec.trials):
            for mobility in spec.mobility:
                for row in mobility_trial(spec, trial, mobility):
                    writer.write(row)
            if progress:
                progress(trial + 1, spec.trials)
    for mobility in spec.mobility:
        for differential in (True, False):
            rows = [r for r in report.rows if r["mobility"] == mobility.value and r["differential"] == differential]
            ber = sum(r["bit_errors"] for r in rows) / max(1, sum(r["bits"] for r in rows))
            label = "differential" if differential else "coherent"
            report.summary[f"{mobility.value} {label}"] = round(ber, 4)
    return report


# ---- subcarrier spacing ----

def run_spacing(spec: ExperimentSpec, progress: Optional[Callable[[int, int], None]] = None) -> Report:
    """Adaptive one-way packets at each spacing and distance, on paired channels and payloads"""
    report = Report("spacing", list(SPACING_COLUMNS))
    steps = len(spec.spacings) * len(spec.distances)
    done = 0
    with ReportWriter(report, spec.out) as writer:
        for spacing in spec.spacings:
            cfg = spec.modem.with_spacing(spacing)
            for d_index, distance in enumerate(spec.distances):
                snr = snr_at_distance(spec.source_snr_db, distance)
                for trial in range(spec.trials):
                    model = trial_channel(spec, trial, snr)
                    outcome = simulate_packet(model, cfg, derive_rng(spec.seed, d_index, trial),
                                              _random_payload(spec, trial), equalize=spec.equalize,
                                              packet_index=trial, trace_dir=spec.trace_dir)
                    writer.write({
                        "spacing_hz": spacing, "distance_m": distance, "snr_db": round(snr, 2), "trial": trial,
                        "detected": outcome.detected, "selected_band": _band_label(outcome.selection),
                        "bit_errors": outcome.bit_errors, "packet_ok": outcome.ok,
                    })
                done += 1
                if progress:
                    progress(done, steps)
    for spacing in spec.spacings:
        rows = [r for r in report.rows if r["spacing_hz"] == spacing]
        report.summary[f"{spacing:g} Hz PER"] = round(1.0 - sum(r["packet_ok"] for r in rows) / len(rows), 4)
    return report


# ---- band stability ----

def preamble_snr_pair(model: ChannelModel, mobility: Mobility, cfg: ModemConfig, rng: np.random.Generator,
                      gap_s: float = 0.5) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Per-bin SNR measured on two preambles gap_s apart through the same time-varying channel"""
    preamble = build_preamble(PreambleSpec.from_config(cfg), cfg)
    quiet = np.zeros(cfg.symbol_len)
    gap = int(round(gap_s * cfg.sample_rate))
    duration = (2 * len(preamble) + gap + 4 * cfg.symbol_len + cfg.max_rtt_samples) / cfg.sample_rate + 1.0
    process = time_varying(model, mobility, cfg, rng, duration_s=duration)
    tx = np.concatenate([quiet, preamble, np.zeros(gap), preamble, quiet])
    rx = process.apply(tx, rng, noise_power_for(model, cfg))

    split = len(quiet) + len(preamble) + gap // 2
    first = estimate_from_preamble(rx[:split], cfg)
    second = estimate_from_preamble(rx[split:], cfg)
    if first is None or second is None:
        return None
    return first.snr_db, second.snr_db


def run_stability(spec: ExperimentSpec, progress: Optional[Callable[[int, int], None]] = None) -> Report:
    """Minimum SNR inside the band picked from the first preamble, measured on the second"""
    cfg = spec.modem
    report = Report("stability", list(STABILITY_COLUMNS))
    regimes = (Mobility.STATIC,) + tuple(m for m in spec.mobility if m is not Mobility.STATIC)
    with ReportWriter(report, spec.out) as writer:
        for trial in range(spec.trials):
            model = trial_channel(spec, trial)
            for mobility in regimes:
                pair = preamble_snr_pair(model, mobility, cfg, derive_rng(spec.seed, trial, 8), spec.stability_gap_s)
                if pair is None:
                    writer.write({"trial": trial, "mobility": mobility.value, "selected_band": "",
                                  "min_snr_first_db": "", "min_snr_second_db": "", "below_reference": ""})
                    continue
                first, second = pair
                sel = select_band(first, cfg)
                min_second = float(np.min(second[sel.m:sel.n + 1]))
                writer.write({
                    "trial": trial, "mobility": mobility.value, "selected_band": _band_label(sel),
                    "min_snr_first_db": round(float(np.min(first[sel.m:sel.n + 1])), 2),
                    "min_snr_second_db": round(min_second, 2),
                    "below_reference": min_second < REFERENCE_SNR_DB,
                })
            if progress:
                progress(trial + 1, spec.trials)
    report.summary["reference_db"] = REFERENCE_SNR_DB
    for mobility in regimes:
        rows = [r for r in report.rows if r["mobility"] == mobility.value and r["below_reference"] != ""]
        report.summary[f"{mobility.value} below {REFERENCE_SNR_DB:g} dB"] = \
            f"{sum(r['below_reference'] for r in rows)}/{len(rows)}"
    return report


# ---- beacon ----

def beacon_noise_power(model: ChannelModel, cfg: ModemConfig, bcfg: BeaconConfig, burst: np.ndarray) -> float:
    """In-band noise power that puts the beacon burst at the model's SNR after the channel"""
    return noise_power_for(model, cfg, float(np.mean(np.square(burst))), (bcfg.f0, bcfg.f1))


def run_beacon(spec: ExperimentSpec, progress: Optional[Callable[[int, int], None]] = None) -> Report:
    """FSK beacon bit errors at each bit rate and distance"""
    cfg = spec.modem
    report = Report("beacon", list(BEACON_COLUMNS))
    steps = len(spec.beacon_rates) * len(spec.distances)
    done = 0
    with ReportWriter(report, spec.out) as writer:
        for rate in spec.beacon_rates:
            bcfg = replace(spec.beacon, symbol_ms=int(round(1000 / rate)))
            for d_index, distance in enumerate(spec.distances):
                snr = snr_at_distance(spec.source_snr_db, distance)
                for trial in range(spec.trials):
                    rng = derive_rng(spec.seed, int(rate), d_index, trial)
                    value = int(rng.integers(0, 1 << bcfg.n_bits))
                    model = trial_channel(spec, trial, snr)
                    padding = np.zeros(bcfg.symbol_len)
                    burst = beacon_encode(value, bcfg)
                    wave = np.concatenate([padding, burst, padding])
                    rx = apply(wave, model, cfg, rng, beacon_noise_power(model, cfg, bcfg, burst))
                    decoded = beacon_decode(rx, bcfg)
                    errors = bcfg.n_bits if decoded is None else \
                        int(np.sum(int_to_bits(decoded, bcfg.n_bits) != int_to_bits(value, bcfg.n_bits)))
                    writer.write({"rate_bps": rate, "distance_m": distance, "snr_db": round(snr, 2), "trial": trial,
                                  "detected": decoded is not None, "bit_errors": errors,
                                  "ber": errors / bcfg.n_bits})
                done += 1
                if progress:
                    progress(done, steps)
    for rate in spec.beacon_rates:
        rows = [r for r in report.rows if r["rate_bps"] == rate]
        report.summary[f"{rate:g} bps BER"] = round(sum(r["bit_errors"] for r in rows) /
                                                    (len(rows) * spec.beacon.n_bits), 4)
    return report


# ---- MAC ----

def run_mac(spec: ExperimentSpec, tracker: Optional[LinkEventTracker] = None,
            progress: Optional[Callable[[int, int], None]] = None) -> Report:
    """Collision fractions with carrier sense off and on, one network run per seed"""
    scenario = spec.mac_scenario or default_scenario(spec.mac_transmitters, mac=spec.mac)
    if spec.mac.full_phy and not scenario.mac.full_phy:
        scenario = replace(scenario, mac=replace(scenario.mac, full_phy=True))
    report = Report("mac", ["cs_enabled", "seed", "node", "sent", "collided", "fraction"])
    if spec.out and os.path.exists(spec.out):
        os.remove(spec.out)
    fractions: Dict[bool, List[float]] = {False: [], True: []}
    for i in range(spec.trials):
        seed = spec.seed + i
        for cs in (False, True):
            result = scenario.with_carrier_sense(cs).run(seed, tracker)
            extra = {"cs_enabled": cs, "seed": seed}
            report.rows.extend({**extra, **row} for row in result.rows())
            if spec.out:
                write_report_csv(result, spec.out, extra)
            fractions[cs].append(result.collision_fraction)
        if progress:
            progress(i + 1, spec.trials)
    report.path = spec.out
    report.summary = {
        "transmitters": len(scenario.nodes),
        "collisions without carrier sense": round(float(np.mean(fractions[False])), 4),
        "collisions with carrier sense": round(float(np.mean(fractions[True])), 4),
    }
    return report


# ---- WAV files ----

@dataclass
class ImportResult:
    buffer: SampleBuffer
    device_id: Optional[int] = None
    payload: Optional[np.ndarray] = None
    beacon_value: Optional[int] = None


def packet_waveform(payload, cfg: ModemConfig, dest_id: int = 7) -> np.ndarray:
    """Header and a full-band packet back to back, framed by a symbol of silence"""
    quiet = np.zeros(cfg.symbol_len)
    packet = modulate_packet(payload, full_band(cfg), cfg)
    return peak_normalize(np.concatenate([quiet, build_header(dest_id, cfg), packet, quiet]), cfg.tx_peak)


def export_wav(path: str, cfg: ModemConfig, payload=None, dest_id: int = 7,
               beacon_value: Optional[int] = None, beacon: Optional[BeaconConfig] = None) -> SampleBuffer:
    """Write a packet, or a beacon when beacon_value is given, as 16-bit PCM"""
    if beacon_value is not None:
        bcfg = beacon or BeaconConfig(sample_rate=cfg.sample_rate)
        samples = beacon_encode(beacon_value, bcfg)
    else:
        if payload is None:
            raise SignalError("nothing to export: give a payload or a beacon value")
        samples = packet_waveform(payload, cfg, dest_id)
    buf = SampleBuffer(samples, cfg.sample_rate)
    write_wav(path, buf)
    return buf


def import_wav(path: str, cfg: ModemConfig, beacon: Optional[BeaconConfig] = None) -> ImportResult:
    """Read a recording and run it through the receive chain (packet first, then beacon)"""
    buf = read_wav(path, cfg.sample_rate)
    result = ImportResult(buf)
    estimate = estimate_from_preamble(buf.samples, cfg)
    if estimate is not None:
        id_start = estimate.sync + cfg.preamble_len + cfg.cp_len
        result.device_id = decode_id_symbol(buf.samples[id_start:id_start + cfg.fft_size], cfg)
        try:
            result.payload = demodulate_packet(buf.samples, estimate.sync + cfg.header_len, full_band(cfg), cfg,
                                               noise_var=estimate.noise_var).payload
        except PacketLostError as e:
            logger.warning(f"Preamble found in {path} but the packet was lost: {e}")
        return result
    result.beacon_value = beacon_decode(buf.samples, beacon or BeaconConfig(sample_rate=cfg.sample_rate))
    return result


RUNNERS: Dict[str, Callable[..., Report]] = {
    "link": run_link,
    "ber_sweep": run_ber_sweep,
    "band_adapt": run_band_adapt,
    "mobility": run_mobility,
    "spacing": run_spacing,
    "stability": run_stability,
    "beacon": run_beacon,
    "mac": run_mac,
}
