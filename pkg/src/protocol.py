"""
Post-preamble feedback link protocol.

The sender broadcasts preamble + ID symbol and goes quiet. The receiver measures per-bin SNR
on the preamble, picks a band and answers with a two-tone feedback symbol. The sender then
transmits training + data on that band at the start of the next symbol interval, and the
receiver ACKs with a 1 kHz tone. Both ends are driven one symbol-length chunk at a time.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

try:
    from errors import PacketLostError, SignalError
    from modem_config import ModemConfig
    from modem_enums import Role, LinkPhase
    from dsp import synthesize_symbol, analyze_symbol, apply_filter, receive_filter
    from preamble import PreambleSpec, build_preamble, cazac_bins, detect_and_sync, preamble_segments, normalized_correlation
    from adapt import (BandSelection, estimate_channel, estimate_snr, measure_noise_variance, preamble_matrix,
                       select_band, encode_feedback, decode_feedback, sliding_band_power)
    from phy import modulate_packet, demodulate_packet, packet_length, training_symbol
    from channel import ChannelStream
    from link_events import LinkEventTracker, EventType
    from utils import format_band
except ModuleNotFoundError:
    from src.errors import PacketLostError, SignalError
    from src.modem_config import ModemConfig
    from src.modem_enums import Role, LinkPhase
    from src.dsp import synthesize_symbol, analyze_symbol, apply_filter, receive_filter
    from src.preamble import PreambleSpec, build_preamble, cazac_bins, detect_and_sync, preamble_segments, normalized_correlation
    from src.adapt import (BandSelection, estimate_channel, estimate_snr, measure_noise_variance, preamble_matrix,
                           select_band, encode_feedback, decode_feedback, sliding_band_power)
    from src.phy import modulate_packet, demodulate_packet, packet_length, training_symbol
    from src.channel import ChannelStream
    from src.link_events import LinkEventTracker, EventType
    from src.utils import format_band

logger = logging.getLogger(__name__)

# a decoded ID or ACK tone must hold this share of the in-band power
_TONE_SHARE = 0.5


@dataclass
class LinkState:
    role: Role
    phase: LinkPhase = LinkPhase.IDLE
    # sample offset inside the current OFDM interval, counted from the last preamble start
    symbol_timer: int = 0
    attempts: int = 0


def _one_hot_symbol(bin_index: int, cfg: ModemConfig) -> np.ndarray:
    """All of a full-band symbol's energy on one subcarrier"""
    return synthesize_symbol(np.array([np.sqrt(cfg.n_bins)], dtype=complex), cfg.band_bins[[bin_index]], cfg)


def encode_id_symbol(device_id: int, cfg: ModemConfig) -> np.ndarray:
    if not 0 <= device_id < cfg.n_bins:
        raise SignalError(f"device id {device_id} outside 0-{cfg.n_bins - 1}")
    return _one_hot_symbol(device_id, cfg)


def decode_id_symbol(samples: np.ndarray, cfg: ModemConfig) -> Optional[int]:
    """Strongest in-band bin of an FFT-length segment, or None when no bin dominates"""
    power = np.abs(analyze_symbol(np.asarray(samples, dtype=float)[:cfg.fft_size], cfg)) ** 2
    total = power.sum()
    best = int(np.argmax(power))
    if total <= 0 or power[best] < _TONE_SHARE * total:
        return None
    return best


def build_header(dest_id: int, cfg: ModemConfig) -> np.ndarray:
    """Preamble followed by the destination ID symbol"""
    return np.concatenate([build_preamble(PreambleSpec.from_config(cfg), cfg), encode_id_symbol(dest_id, cfg)])


def ack_bin(cfg: ModemConfig) -> int:
    return int(np.argmin(np.abs(cfg.bin_frequency(np.arange(cfg.n_bins)) - 1000.0)))


def encode_ack(cfg: ModemConfig) -> np.ndarray:
    return _one_hot_symbol(ack_bin(cfg), cfg)


def detect_ack(samples: np.ndarray, cfg: ModemConfig) -> bool:
    """True if some window has the 1 kHz bin both dominant and ack_threshold_db above the in-band median"""
    powers = sliding_band_power(samples, cfg)
    if powers.size == 0:
        return False
    k = ack_bin(cfg)
    tone = powers[:, k]
    median = np.median(powers, axis=1)
    total = powers.sum(axis=1)
    over_median = tone >= median * 10 ** (cfg.ack_threshold_db / 10)
    dominant = tone >= _TONE_SHARE * np.maximum(total, 1e-300)
    return bool(np.any(over_median & dominant & (total > 0)))


class Sender:
    """The transmitting side ("Alice")"""

    def __init__(self, cfg: ModemConfig, dest_id: int, payload, packet_index: int = 0,
                 tracker: Optional[LinkEventTracker] = None, trial: int = 0):
        self.cfg = cfg
        self.dest_id = dest_id
        self.payload = np.asarray(payload, dtype=np.uint8)
        self.packet_index = packet_index
        self.state = LinkState(Role.SENDER)
        self.event_tracker = tracker or LinkEventTracker(log_dir=None)
        self.trial = trial
        self.selection: Optional[BandSelection] = None
        self.data_offsets: List[int] = []

        self._spec = PreambleSpec.from_config(cfg)
        self._header = build_header(dest_id, cfg)
        self._clock = 0
        self._queue = np.zeros(0)
        self._attempt_start = 0
        self._listen: List[np.ndarray] = []
        self._listen_from = 0
        self._deadline = 0
        self._pending: Optional[BandSelection] = None

    @property
    def phase(self) -> LinkPhase:
        return self.state.phase

    def _event(self, event_type: EventType, description: str, **metadata) -> None:
        self.event_tracker.add_event(event_type, description, self._clock / self.cfg.sample_rate,
                                     self.trial, Role.SENDER.value, metadata=metadata)

    def _start_attempt(self) -> None:
        self.state.attempts += 1
        self._attempt_start = self._clock
        self._queue = self._header.copy()
        self._listen = []
        self._pending = None
        header_end = self._attempt_start + len(self._header)
        self._listen_from = self._attempt_start + (len(self._header) // self.cfg.symbol_len) * self.cfg.symbol_len
        self._deadline = header_end + self.cfg.feedback_timeout_samples
        self.state.phase = LinkPhase.PREAMBLE_SENT
        self._event(EventType.PREAMBLE_TX, f"Preamble and header for device {self.dest_id}",
                    attempt=self.state.attempts)

    def _retry_or_abort(self, reason: EventType) -> None:
        self._event(reason, f"No response by sample {self._deadline}")
        if self.state.attempts >= self.cfg.retry_limit:
            self.state.phase = LinkPhase.ABORTED
            self._event(EventType.ABORT, f"Giving up after {self.state.attempts} attempts")
            logger.warning(f"Link aborted after {self.state.attempts} attempts")
            return
        self._event(EventType.RETRY, f"Retrying (attempt {self.state.attempts + 1})")
        self._start_attempt()

    def _emit(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        take = min(n, len(self._queue))
        out[:take] = self._queue[:take]
        self._queue = self._queue[take:]
        return out

    def step(self, incoming: np.ndarray) -> np.ndarray:
        n = len(incoming)
        if self.state.phase == LinkPhase.IDLE:
            self._start_attempt()

        if self.state.phase in (LinkPhase.PREAMBLE_SENT, LinkPhase.AWAITING_FEEDBACK, LinkPhase.AWAITING_ACK) \
                and self._clock >= self._listen_from:
            self._listen.append(np.asarray(incoming, dtype=float))

        if self.state.phase == LinkPhase.PREAMBLE_SENT and not len(self._queue):
            self.state.phase = LinkPhase.AWAITING_FEEDBACK

        # data may only start in an interval that ends by the deadline; the receiver
        # stops looking for the training symbol at the same boundary
        if self.state.phase == LinkPhase.AWAITING_FEEDBACK:
            if self._clock + n > self._deadline:
                self._retry_or_abort(EventType.FEEDBACK_TIMEOUT)
            else:
                self._check_feedback()
        elif self.state.phase == LinkPhase.AWAITING_ACK:
            self._check_ack()
            if self.state.phase == LinkPhase.AWAITING_ACK and self._clock + n > self._deadline:
                self._retry_or_abort(EventType.ACK_TIMEOUT)

        out = self._emit(n)
        if self.state.phase == LinkPhase.SENDING_DATA and not len(self._queue):
            self.state.phase = LinkPhase.AWAITING_ACK
            self._listen = []
            self._listen_from = self._clock + n
            self._deadline = self._clock + n + self.cfg.feedback_timeout_samples
        self._clock += n
        self.state.symbol_timer = (self._clock - self._attempt_start) % self.cfg.symbol_len
        return out

    def _check_feedback(self) -> None:
        if not self._listen:
            return
        heard = np.concatenate(self._listen)
        decoded = decode_feedback(heard, len(heard), self.cfg)
        if decoded is None:
            return
        if self._pending is None:
            # the symbol may still be partly in flight; decide on the next chunk
            self._pending = decoded
            return
        self.selection = decoded
        self._event(EventType.FEEDBACK_DECODED, format_band(decoded.m, decoded.n, decoded.f_begin, decoded.f_end),
                    m=decoded.m, n=decoded.n)
        # the current chunk starts on a symbol boundary relative to the preamble start
        self.data_offsets.append(self._clock - self._attempt_start)
        self._queue = modulate_packet(self.payload, decoded, self.cfg, self.packet_index)
        self.state.phase = LinkPhase.SENDING_DATA
        self._event(EventType.DATA_TX, f"{len(self._queue)} samples on {decoded.width} subcarriers",
                    offset=self.data_offsets[-1])

    def _check_ack(self) -> None:
        if self._listen and detect_ack(np.concatenate(self._listen), self.cfg):
            self.state.phase = LinkPhase.DONE
            self._event(EventType.ACK_RECEIVED, "Payload acknowledged", attempts=self.state.attempts)


class Receiver:
    """The receiving side ("Bob")"""

    def __init__(self, cfg: ModemConfig, device_id: int, fixed_band: Optional[BandSelection] = None,
                 ack_oracle: Optional[Callable[[np.ndarray], bool]] = None,
                 tracker: Optional[LinkEventTracker] = None, trial: int = 0, packet_index: int = 0,
                 equalize: bool = True, trace_dir: Optional[str] = None):
        self.cfg = cfg
        self.device_id = device_id
        self.trace_dir = trace_dir
        self.fixed_band = fixed_band
        self.ack_oracle = ack_oracle
        self.state = LinkState(Role.RECEIVER)
        self.event_tracker = tracker or LinkEventTracker(log_dir=None)
        self.trial = trial
        self.packet_index = packet_index
        self.equalize = equalize
        self.delivered: List[np.ndarray] = []
        self.selection: Optional[BandSelection] = None
        self.last_snr: Optional[np.ndarray] = None
        self.detections = 0

        self._spec = PreambleSpec.from_config(cfg)
        self._tx_values = preamble_matrix(self._spec, cazac_bins(self._spec, cfg))
        self._taps = receive_filter(cfg)
        self._buffer = np.zeros(0)
        self._offset = 0
        self._queue = np.zeros(0)
        self._sync = 0
        self._noise_var = 0.0
        self._preamble_power = np.zeros(cfg.n_bins)
        self._next_k = 0
        self._training_at: Optional[int] = None
        self._last_k = 0

    @property
    def phase(self) -> LinkPhase:
        return self.state.phase

    def _clock(self) -> int:
        return self._offset + len(self._buffer)

    def _event(self, event_type: EventType, description: str, **metadata) -> None:
        self.event_tracker.add_event(event_type, description, self._clock() / self.cfg.sample_rate,
                                     self.trial, Role.RECEIVER.value, metadata=metadata)

    def _drop_before(self, absolute: int) -> None:
        cut = max(0, min(len(self._buffer), absolute - self._offset))
        self._buffer = self._buffer[cut:]
        self._offset += cut

    def step(self, incoming: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        n = len(incoming)
        self._buffer = np.concatenate([self._buffer, np.asarray(incoming, dtype=float)])
        delivered: List[np.ndarray] = []
        if self.state.phase == LinkPhase.IDLE:
            self._listen()
        if self.state.phase == LinkPhase.RECEIVING:
            delivered = self._receive()

        out = np.zeros(n)
        take = min(n, len(self._queue))
        out[:take] = self._queue[:take]
        self._queue = self._queue[take:]
        self.state.symbol_timer = (self._clock() - self._sync) % self.cfg.symbol_len
        return out, delivered

    def _listen(self) -> None:
        cfg = self.cfg
        if len(self._buffer) < cfg.header_len:
            return
        sync = detect_and_sync(self._buffer, self._spec, cfg)
        if sync is None:
            self._drop_before(self._clock() - cfg.header_len - cfg.symbol_len)
            return
        start = sync.sample_index
        if start + cfg.header_len > len(self._buffer):
            return

        self.detections += 1
        self._event(EventType.PREAMBLE_DETECTED, f"Preamble at sample {self._offset + start}",
                    metric=round(sync.peak_value, 4))
        id_start = start + cfg.preamble_len + cfg.cp_len
        heard_id = decode_id_symbol(self._buffer[id_start:id_start + cfg.fft_size], cfg)
        if heard_id != self.device_id:
            self._event(EventType.ID_MISMATCH, f"Header addressed to {heard_id}, not {self.device_id}")
            self._drop_before(self._offset + start + cfg.header_len)
            return

        segments = preamble_segments(self._buffer, start, self._spec, cfg)
        self._noise_var = measure_noise_variance(segments, cfg)
        y = analyze_symbol(segments, cfg)
        self._preamble_power = np.mean(np.abs(y) ** 2, axis=0)
        H = estimate_channel(segments, self._tx_values, cfg, self._noise_var)
        self.last_snr = estimate_snr(H, self._tx_values, y, cfg)
        sel = self.fixed_band or select_band(self.last_snr, cfg)
        self.selection = sel
        self._queue = encode_feedback(sel, cfg)
        self._event(EventType.FEEDBACK_TX, format_band(sel.m, sel.n, sel.f_begin, sel.f_end),
                    m=sel.m, n=sel.n, below_threshold=sel.below_threshold,
                    min_snr_db=round(float(np.min(self.last_snr[sel.m:sel.n + 1])), 2))

        self._sync = self._offset + start
        self._next_k = int(np.ceil(cfg.header_len / cfg.symbol_len))
        self._training_at = None
        # last interval whose data would still end inside the sender's feedback timeout
        self._last_k = (cfg.header_len + cfg.feedback_timeout_samples) // cfg.symbol_len - 1
        self._drop_before(self._sync)
        self.state.phase = LinkPhase.RECEIVING

    def _back_to_listening(self, resume_at: int) -> None:
        self._drop_before(resume_at)
        self.state.phase = LinkPhase.IDLE

    def _receive(self) -> List[np.ndarray]:
        cfg = self.cfg
        sel = self.selection
        margin = cfg.eq_delay + cfg.bandpass_order // 2
        reference = training_symbol(sel, cfg)

        # per-interval training-symbol detection at p + k * symbol_len
        while self._training_at is None and self._next_k <= self._last_k:
            candidate = self._sync + self._next_k * cfg.symbol_len
            if candidate + cfg.symbol_len + cfg.cp_len + margin > self._clock():
                break
            lo = candidate - cfg.cp_len - self._offset
            window = self._buffer[max(lo, 0):candidate + cfg.symbol_len + cfg.cp_len + margin - self._offset]
            filtered = apply_filter(window, self._taps)
            score = np.max(normalized_correlation(filtered, reference)) if len(filtered) >= len(reference) else 0.0
            body = candidate + cfg.cp_len - self._offset
            power = np.mean(np.abs(analyze_symbol(self._buffer[body:body + cfg.fft_size], cfg)[sel.m:sel.n + 1]) ** 2)
            # the training symbol carries the preamble's per-bin energy; noise-only intervals fall well short
            energetic = power >= 0.5 * np.mean(self._preamble_power[sel.m:sel.n + 1])
            if score >= cfg.training_threshold and energetic:
                self._training_at = candidate
            else:
                self._next_k += 1

        if self._training_at is None:
            if self._next_k > self._last_k:
                self._event(EventType.PACKET_LOST, "No training symbol before the feedback timeout")
                # a retransmitted header may already be arriving
                self._back_to_listening(self._sync + (self._next_k - 1) * cfg.symbol_len)
            return []

        end = self._training_at + packet_length(sel, cfg)
        if end + margin > self._clock():
            return []
        try:
            result = demodulate_packet(self._buffer, self._training_at - self._offset, sel, cfg,
                                       equalize=self.equalize, noise_var=self._noise_var,
                                       packet_index=self.packet_index, trace_dir=self.trace_dir)
        except PacketLostError as e:
            self._event(EventType.PACKET_LOST, str(e))
            self._back_to_listening(end)
            return []

        self._event(EventType.DATA_DECODED, f"Decoded payload with mean confidence {result.mean_confidence:.3f}",
                    offset=self._training_at - self._sync)
        delivered: List[np.ndarray] = []
        if self.ack_oracle is None or self.ack_oracle(result.payload):
            self._queue = encode_ack(cfg)
            self._event(EventType.ACK_TX, "Acknowledging")
            self.delivered.append(result.payload)
            delivered.append(result.payload)
        self._back_to_listening(end)
        return delivered


def sender_step(sender: Sender, incoming: np.ndarray) -> Tuple[LinkState, np.ndarray]:
    out = sender.step(incoming)
    return sender.state, out


def receiver_step(receiver: Receiver, incoming: np.ndarray) -> Tuple[LinkState, np.ndarray, List[np.ndarray]]:
    out, delivered = receiver.step(incoming)
    return receiver.state, out, delivered


@dataclass
class ExchangeResult:
    phase: LinkPhase
    attempts: int
    steps: int
    delivered: List[np.ndarray] = field(default_factory=list)
    sender_selection: Optional[BandSelection] = None
    receiver_selection: Optional[BandSelection] = None
    data_offsets: List[int] = field(default_factory=list)
    detections: int = 0

    @property
    def feedback_ok(self) -> bool:
        return self.sender_selection is not None and self.sender_selection == self.receiver_selection


def run_exchange(sender: Sender, receiver: Receiver, forward: ChannelStream, backward: ChannelStream,
                 max_steps: int = 150) -> ExchangeResult:
    """Drive both state machines chunk by chunk until the sender finishes or gives up"""
    n = sender.cfg.symbol_len
    to_receiver = np.zeros(n)
    to_sender = np.zeros(n)
    steps = 0
    for steps in range(1, max_steps + 1):
        heard_by_receiver = forward.push(to_receiver)
        heard_by_sender = backward.push(to_sender)
        _, to_receiver = sender_step(sender, heard_by_sender)
        _, to_sender, _ = receiver_step(receiver, heard_by_receiver)
        if sender.phase in (LinkPhase.DONE, LinkPhase.ABORTED):
            break
    else:
        logger.warning(f"Exchange stopped after {max_steps} steps in phase {sender.phase.value}")

    return ExchangeResult(
        phase=sender.phase,
        attempts=sender.state.attempts,
        steps=steps,
        delivered=list(receiver.delivered),
        sender_selection=sender.selection,
        receiver_selection=receiver.selection,
        data_offsets=list(sender.data_offsets),
        detections=receiver.detections,
    )
