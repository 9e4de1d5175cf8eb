"""
Shared-medium simulation: several modems contend for one acoustic channel.

Runs at packet granularity on a simpy event loop. Each transmitter either sends
continuously (random idle gap of 3-7 packet durations) or at a Poisson offered
load. With carrier sense on, a node samples the average in-band energy on its own
80 ms grid and backs off by a random number of packet durations while the medium
is busy. Packets whose start times lie within one packet duration of another
node's packet count as collisions.

With `full_phy` set, each sense window is rendered as audio instead (modulated
packets over ambient noise) and judged by the sample-level energy detector.
"""
import csv
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import simpy
import yaml

try:
    from errors import ConfigError
    from modem_config import ModemConfig, SCHEMA_VERSION
    from modem_enums import MediumEventKind
    from adapt import full_band
    from phy import modulate_packet, packet_length
    from channel import NoiseProfile, ambient_noise, distance_attenuation_db
    from dsp import band_energy
    from link_events import LinkEventTracker, EventType
    from utils import db_to_power, derive_rng
except ModuleNotFoundError:
    from src.errors import ConfigError
    from src.modem_config import ModemConfig, SCHEMA_VERSION
    from src.modem_enums import MediumEventKind
    from src.adapt import full_band
    from src.phy import modulate_packet, packet_length
    from src.channel import NoiseProfile, ambient_noise, distance_attenuation_db
    from src.dsp import band_energy
    from src.link_events import LinkEventTracker, EventType
    from src.utils import db_to_power, derive_rng

logger = logging.getLogger(__name__)

_KIND_ORDER = {kind: i for i, kind in enumerate(MediumEventKind)}


@dataclass(frozen=True)
class MacConfig:
    """Medium-access knobs. packet_s=None derives the airtime of a full-band packet."""
    packet_s: Optional[float] = None
    sense_interval_s: float = 0.08
    backoff_max: int = 8
    gap_range: Tuple[float, float] = (3.0, 7.0)
    start_offset_s: float = 5.0
    noise_level: float = 1.0
    source_level_db: float = 60.0
    margin_db: float = 3.0
    calibration_s: float = 3.0
    bandwidth_hz: float = 3000.0
    sound_speed: float = 1500.0
    max_range_m: float = 30.0
    packet_budget: int = 120
    # render each sense window as audio and run the sample-level energy detector
    full_phy: bool = False
    noise_recording: Optional[str] = None

    def __post_init__(self):
        if self.packet_s is not None and self.packet_s <= 0:
            raise ConfigError("packet duration must be positive")
        if self.sense_interval_s <= 0:
            raise ConfigError("sense interval must be positive")
        if self.backoff_max < 1:
            raise ConfigError("backoff_max must be at least 1")
        if not 0 <= self.gap_range[0] <= self.gap_range[1]:
            raise ConfigError(f"invalid gap range {self.gap_range}")
        if self.packet_budget < 1:
            raise ConfigError("packet budget must be at least 1")

    @property
    def noise_dof(self) -> int:
        """Independent samples in one sense window; sets the spread of the noise estimate"""
        return max(1, int(round(self.bandwidth_hz * self.sense_interval_s)))

    def packet_duration(self, modem: Optional[ModemConfig] = None) -> float:
        if self.packet_s is not None:
            return self.packet_s
        modem = modem or ModemConfig()
        return (modem.header_len + packet_length(full_band(modem), modem)) / modem.sample_rate

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "MacConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown mac settings: {', '.join(sorted(unknown))}")
        if "gap_range" in data:
            data["gap_range"] = tuple(float(v) for v in data["gap_range"])
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid mac settings: {e}") from e


@dataclass(frozen=True)
class Node:
    id: int
    position: Tuple[float, float] = (0.0, 0.0)
    offered_load: Optional[float] = None  # packets/s; None sends continuously
    cs_enabled: bool = True

    def distance_to(self, other: "Node") -> float:
        return float(np.hypot(self.position[0] - other.position[0], self.position[1] - other.position[1]))


@dataclass(frozen=True)
class MediumEvent:
    kind: MediumEventKind
    time: float
    node: int

    @property
    def sort_key(self) -> Tuple[float, int, int]:
        return (self.time, self.node, _KIND_ORDER[self.kind])


@dataclass(frozen=True)
class Transmission:
    node: int
    start: float
    end: float


@dataclass
class NodeStats:
    node: int
    sent: int = 0
    collided: int = 0

    @property
    def fraction(self) -> float:
        return self.collided / self.sent if self.sent else 0.0


@dataclass
class MacReport:
    per_node: Dict[int, NodeStats]
    transmissions: List[Transmission]
    trace: List[MediumEvent]
    threshold: float
    packet_s: float
    sense_phase: Dict[int, float] = field(default_factory=dict)
    backoff_extensions: Dict[int, int] = field(default_factory=dict)

    @property
    def sent(self) -> int:
        return sum(s.sent for s in self.per_node.values())

    @property
    def collided(self) -> int:
        return sum(s.collided for s in self.per_node.values())

    @property
    def collision_fraction(self) -> float:
        return self.collided / self.sent if self.sent else 0.0

    def rows(self) -> List[Dict[str, Any]]:
        rows = [{"node": s.node, "sent": s.sent, "collided": s.collided, "fraction": round(s.fraction, 4)}
                for s in sorted(self.per_node.values(), key=lambda s: s.node)]
        rows.append({"node": "all", "sent": self.sent, "collided": self.collided,
                     "fraction": round(self.collision_fraction, 4)})
        return rows


class Medium:
    """Ongoing and past transmissions, as heard at each node position"""

    def __init__(self, env: simpy.Environment, nodes: Sequence[Node], mac: MacConfig, threshold: float):
        self.env = env
        self.mac = mac
        self.threshold = threshold
        self.transmissions: List[Transmission] = []
        self._nodes = {n.id: n for n in nodes}

    def received_power(self, listener: Node, source: Node) -> float:
        distance = max(listener.distance_to(source), 1.0)
        return self.mac.noise_level * db_to_power(self.mac.source_level_db - distance_attenuation_db(distance))

    def delay(self, listener: Node, source: Node) -> float:
        return listener.distance_to(source) / self.mac.sound_speed

    def signal_power(self, listener: Node, now: float) -> float:
        """Mean received power from other nodes over the sense window ending at `now`"""
        window = self.mac.sense_interval_s
        lo = now - window
        total = 0.0
        horizon = lo - self.mac.max_range_m / self.mac.sound_speed
        for tx in reversed(self.transmissions):
            if tx.end < horizon:
                break
            if tx.node == listener.id:
                continue
            source = self._nodes[tx.node]
            delay = self.delay(listener, source)
            overlap = min(now, tx.end + delay) - max(lo, tx.start + delay)
            if overlap > 0:
                total += self.received_power(listener, source) * overlap / window
        return total

    def busy(self, listener: Node, rng: np.random.Generator) -> bool:
        """True when the average in-band power over the last sense window exceeds the threshold"""
        energy = self.signal_power(listener, self.env.now) + float(_noise_window(self.mac, rng))
        return energy > self.threshold


class AudioMedium(Medium):
    """The medium as sampled audio at each listener: full-band packets over ambient noise.

    Slow; meant for small scenarios that check the packet-level abstraction.
    """

    def __init__(self, env: simpy.Environment, nodes: Sequence[Node], mac: MacConfig, threshold: float,
                 modem: ModemConfig, packet_s: float, noise_profile: NoiseProfile, rng: np.random.Generator):
        super().__init__(env, nodes, mac, threshold)
        self.modem = modem
        self.noise_profile = noise_profile
        self.window_len = int(round(mac.sense_interval_s * modem.sample_rate))
        n = int(round(packet_s * modem.sample_rate))
        packet = modulate_packet(rng.integers(0, 2, modem.payload_bits), full_band(modem), modem)
        wave = np.resize(packet, n)
        # unit in-band power, so received_power sets the level directly
        self.waveform = wave / np.sqrt(band_energy(wave, modem.band_low_hz, modem.band_high_hz, modem.sample_rate) / n)

    def render(self, listener: Node, now: float, rng: np.random.Generator) -> np.ndarray:
        """Samples heard at `listener` over the sense window ending at `now`"""
        rate = self.modem.sample_rate
        lo = now - self.mac.sense_interval_s
        window = np.sqrt(self.mac.noise_level) * ambient_noise(self.window_len, self.noise_profile, self.modem, rng)
        horizon = lo - self.mac.max_range_m / self.mac.sound_speed
        for tx in reversed(self.transmissions):
            if tx.end < horizon:
                break
            if tx.node == listener.id:
                continue
            source = self._nodes[tx.node]
            start = int(round((tx.start + self.delay(listener, source) - lo) * rate))
            first = max(0, start)
            last = min(self.window_len, start + len(self.waveform))
            if last <= first:
                continue
            amplitude = np.sqrt(self.received_power(listener, source))
            window[first:last] += amplitude * self.waveform[first - start:last - start]
        return window

    def busy(self, listener: Node, rng: np.random.Generator) -> bool:
        return sense_samples(self.render(listener, self.env.now, rng), self.threshold, self.modem)


def _noise_window(mac: MacConfig, rng: np.random.Generator, size=None):
    dof = mac.noise_dof
    return rng.gamma(dof, mac.noise_level / dof, size=size)


def calibrate_threshold(noise_level: float, margin_db: float, rng: np.random.Generator,
                        mac: Optional[MacConfig] = None) -> float:
    """Average the ambient in-band power over a few seconds of sense windows and add a margin"""
    mac = mac or MacConfig()
    if mac.noise_level != noise_level:
        mac = replace(mac, noise_level=noise_level)
    n_windows = max(1, int(mac.calibration_s / mac.sense_interval_s))
    ambient = float(np.mean(_noise_window(mac, rng, n_windows)))
    threshold = ambient * db_to_power(margin_db)
    logger.debug(f"Carrier-sense threshold {threshold:.4f} from {n_windows} noise windows (mean {ambient:.4f})")
    return threshold


def carrier_sense(node: Node, medium: Medium, rng: np.random.Generator) -> bool:
    return medium.busy(node, rng)


def sense_samples(window: np.ndarray, threshold: float, cfg: ModemConfig) -> bool:
    """Energy detector on recorded audio: mean in-band power of the window against the threshold"""
    window = np.asarray(window, dtype=float)
    if window.size == 0:
        return False
    power = band_energy(window, cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate) / window.size
    return power > threshold


def threshold_from_samples(noise: np.ndarray, cfg: ModemConfig, margin_db: float = 3.0,
                           window_s: float = 0.08) -> float:
    """Calibrate the energy detector from a noise recording split into sense windows"""
    noise = np.asarray(noise, dtype=float)
    width = int(round(window_s * cfg.sample_rate))
    n_windows = noise.size // width
    if n_windows < 1:
        raise ConfigError(f"need at least {width} noise samples to calibrate")
    powers = [band_energy(noise[i * width:(i + 1) * width], cfg.band_low_hz, cfg.band_high_hz, cfg.sample_rate) / width
              for i in range(n_windows)]
    return float(np.mean(powers)) * db_to_power(margin_db)


def backoff_schedule(rng: np.random.Generator, packet_s: float, backoff_max: int = 8) -> float:
    """Initial backoff: a uniform whole number of packet durations in 1..backoff_max"""
    return float(rng.integers(1, backoff_max + 1)) * packet_s


def update_backoff(residual: float, busy: bool, packet_s: float, sense_interval_s: float) -> float:
    """One sense tick of backoff: a busy medium adds a packet duration, an idle one counts down"""
    return residual + packet_s if busy else residual - sense_interval_s


class _Station:
    """simpy process of one transmitter"""

    def __init__(self, env: simpy.Environment, node: Node, medium: Medium, mac: MacConfig,
                 packet_s: float, budget: int, rng: np.random.Generator,
                 trace: List[MediumEvent], tracker: Optional[LinkEventTracker]):
        self.env = env
        self.node = node
        self.medium = medium
        self.mac = mac
        self.packet_s = packet_s
        self.budget = budget
        self.rng = rng
        self.trace = trace
        self.tracker = tracker
        self.sent = 0
        self.extensions = 0
        self.phase = float(rng.uniform(0, mac.sense_interval_s))
        self._next_arrival: Optional[float] = None

    def _record(self, kind: MediumEventKind, event_type: EventType, description: str, **metadata) -> None:
        self.trace.append(MediumEvent(kind, self.env.now, self.node.id))
        if self.tracker is not None:
            self.tracker.add_event(event_type, description, timestamp=self.env.now,
                                   role=f"node{self.node.id}", participants=[str(self.node.id)],
                                   metadata=metadata or None)

    def _idle_gap(self) -> float:
        if self.node.offered_load is None:
            low, high = self.mac.gap_range
            return float(self.rng.uniform(low, high)) * self.packet_s
        # Poisson arrivals; a backlog sends back to back
        if self._next_arrival is None:
            self._next_arrival = self.env.now
        self._next_arrival += float(self.rng.exponential(1.0 / self.node.offered_load))
        return max(0.0, self._next_arrival - self.env.now)

    def _next_tick(self) -> float:
        step = self.mac.sense_interval_s
        k = np.ceil((self.env.now - self.phase) / step - 1e-9)
        return self.phase + k * step

    def _contend(self):
        """Wait on the sense grid until the medium allows a transmission"""
        tick = self._next_tick()
        yield self.env.timeout(max(0.0, tick - self.env.now))
        residual: Optional[float] = None
        while True:
            busy = carrier_sense(self.node, self.medium, self.rng)
            self._record(MediumEventKind.SENSE, EventType.SENSE, "busy" if busy else "idle", busy=busy)
            if residual is None:
                if not busy:
                    return
                residual = backoff_schedule(self.rng, self.packet_s, self.mac.backoff_max)
                if self.tracker is not None:
                    self.tracker.add_event(EventType.BACKOFF, f"backing off {residual:.3f}s",
                                           timestamp=self.env.now, role=f"node{self.node.id}",
                                           metadata={"residual": residual})
            else:
                if busy:
                    self.extensions += 1
                residual = update_backoff(residual, busy, self.packet_s, self.mac.sense_interval_s)
                if not busy and residual <= 1e-9:
                    self._record(MediumEventKind.BACKOFF_EXPIRY, EventType.BACKOFF_EXPIRY, "backoff elapsed")
                    return
            tick += self.mac.sense_interval_s
            yield self.env.timeout(max(0.0, tick - self.env.now))

    def run(self):
        yield self.env.timeout(float(self.rng.uniform(0, self.mac.start_offset_s)))
        while self.sent < self.budget:
            yield self.env.timeout(self._idle_gap())
            if self.node.cs_enabled:
                yield from self._contend()
            start = self.env.now
            self.medium.transmissions.append(Transmission(self.node.id, start, start + self.packet_s))
            self._record(MediumEventKind.TX_START, EventType.TX_START, f"packet {self.sent}", packet=self.sent)
            yield self.env.timeout(self.packet_s)
            self._record(MediumEventKind.TX_END, EventType.TX_END, f"packet {self.sent}", packet=self.sent)
            self.sent += 1


def find_collisions(transmissions: Sequence[Transmission], packet_s: float) -> np.ndarray:
    """Mask of packets that started within one packet duration of another node's packet"""
    if not transmissions:
        return np.zeros(0, dtype=bool)
    starts = np.array([t.start for t in transmissions])
    owners = np.array([t.node for t in transmissions])
    close = np.abs(starts[:, None] - starts[None, :]) < packet_s
    other = owners[:, None] != owners[None, :]
    return np.any(close & other, axis=1)


def _validate(nodes: Sequence[Node], mac: MacConfig) -> None:
    if not nodes:
        raise ConfigError("a network needs at least one transmitter")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"node ids must be distinct, got {ids}")
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if a.distance_to(b) > mac.max_range_m:
                raise ConfigError(f"nodes {a.id} and {b.id} are {a.distance_to(b):.1f} m apart "
                                  f"(limit {mac.max_range_m:.0f} m)")


def run_network(nodes: Sequence[Node], packet_budget: Optional[int] = None, seed: int = 0,
                mac: Optional[MacConfig] = None, duration_s: Optional[float] = None,
                modem: Optional[ModemConfig] = None,
                tracker: Optional[LinkEventTracker] = None) -> MacReport:
    """Simulate until every node has sent its budget, or for duration_s seconds when given"""
    mac = mac or MacConfig()
    _validate(nodes, mac)
    budget = packet_budget or mac.packet_budget
    if duration_s is not None:
        budget = np.iinfo(np.int32).max
    packet_s = mac.packet_duration(modem)

    env = simpy.Environment()
    if mac.full_phy:
        modem = modem or ModemConfig()
        profile = NoiseProfile(recording=mac.noise_recording)
        calibration = np.sqrt(mac.noise_level) * ambient_noise(int(round(mac.calibration_s * modem.sample_rate)),
                                                               profile, modem, derive_rng(seed, 0))
        threshold = threshold_from_samples(calibration, modem, mac.margin_db, mac.sense_interval_s)
        medium: Medium = AudioMedium(env, nodes, mac, threshold, modem, packet_s, profile, derive_rng(seed, 2))
    else:
        threshold = calibrate_threshold(mac.noise_level, mac.margin_db, derive_rng(seed, 0), mac)
        medium = Medium(env, nodes, mac, threshold)
    trace: List[MediumEvent] = []
    stations = [_Station(env, node, medium, mac, packet_s, budget, derive_rng(seed, 1, node.id), trace, tracker)
                for node in nodes]
    for station in stations:
        env.process(station.run())
    if duration_s is not None:
        env.run(until=duration_s)
    else:
        env.run()

    # a packet cut off by the time limit still counts as sent
    transmissions = sorted(medium.transmissions, key=lambda t: (t.start, t.node))
    collided = find_collisions(transmissions, packet_s)
    per_node = {n.id: NodeStats(n.id) for n in nodes}
    for tx, hit in zip(transmissions, collided):
        per_node[tx.node].sent += 1
        if hit:
            per_node[tx.node].collided += 1
            if tracker is not None:
                tracker.add_event(EventType.COLLISION, f"packet at {tx.start:.3f}s collided",
                                  timestamp=tx.start, role=f"node{tx.node}", participants=[str(tx.node)])

    trace.sort(key=lambda e: e.sort_key)
    report = MacReport(per_node=per_node, transmissions=transmissions, trace=trace, threshold=threshold,
                       packet_s=packet_s, sense_phase={s.node.id: s.phase for s in stations},
                       backoff_extensions={s.node.id: s.extensions for s in stations})
    logger.info(f"MAC run seed={seed}: {report.sent} packets, collision fraction {report.collision_fraction:.3f}")
    return report


@dataclass
class Scenario:
    nodes: List[Node]
    mac: MacConfig
    seed: int = 0
    packet_budget: Optional[int] = None
    duration_s: Optional[float] = None

    def with_carrier_sense(self, enabled: bool) -> "Scenario":
        nodes = [Node(n.id, n.position, n.offered_load, enabled) for n in self.nodes]
        return Scenario(nodes, self.mac, self.seed, self.packet_budget, self.duration_s)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scenario":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"scenario schema_version must be {SCHEMA_VERSION}, got {version!r}")
        raw_nodes = data.get("nodes")
        if not raw_nodes:
            raise ConfigError("scenario lists no nodes")
        nodes = []
        try:
            for entry in raw_nodes:
                nodes.append(Node(id=int(entry["id"]),
                                  position=tuple(float(v) for v in entry.get("position", (0.0, 0.0))),
                                  offered_load=entry.get("offered_load"),
                                  cs_enabled=bool(entry.get("cs_enabled", True))))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid node entry: {e}") from e
        return cls(nodes=nodes, mac=MacConfig.from_dict(data.get("mac")), seed=int(data.get("seed", 0)),
                   packet_budget=data.get("packet_budget"), duration_s=data.get("duration_s"))

    def run(self, seed: Optional[int] = None, tracker: Optional[LinkEventTracker] = None) -> MacReport:
        return run_network(self.nodes, self.packet_budget, self.seed if seed is None else seed, self.mac,
                           self.duration_s, tracker=tracker)


def default_scenario(n_transmitters: int = 3, cs_enabled: bool = True, mac: Optional[MacConfig] = None) -> Scenario:
    """Transmitters spread on a 5-10 m arc around a receiver at the origin"""
    angles = np.linspace(0, np.pi, n_transmitters, endpoint=False)
    radii = np.linspace(5.0, 10.0, n_transmitters)
    nodes = [Node(i + 1, (float(r * np.cos(a)), float(r * np.sin(a))), None, cs_enabled)
             for i, (r, a) in enumerate(zip(radii, angles))]
    return Scenario(nodes, mac or MacConfig())


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"scenario file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"scenario file {path} is not valid YAML: {e}") from e
    scenario = Scenario.from_dict(data)
    logger.info(f"Loaded MAC scenario with {len(scenario.nodes)} nodes from {path}")
    return scenario


def write_report_csv(report: MacReport, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """Append the per-node rows (node, sent, collided, fraction) to a CSV file"""
    extra = extra or {}
    fieldnames = list(extra) + ["node", "sent", "collided", "fraction"]
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        if new_file:
            writer.writeheader()
        for row in report.rows():
            writer.writerow({**extra, **row})
            f.flush()
