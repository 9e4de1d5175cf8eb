from dataclasses import dataclass, asdict
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional
import json
import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)


class EventType(Enum):
    """Things that happen on a link or on the shared medium"""
    TRIAL_START = "trial_start"
    TRIAL_END = "trial_end"
    PREAMBLE_TX = "preamble_tx"
    PREAMBLE_DETECTED = "preamble_detected"
    ID_MISMATCH = "id_mismatch"
    FEEDBACK_TX = "feedback_tx"
    FEEDBACK_DECODED = "feedback_decoded"
    FEEDBACK_TIMEOUT = "feedback_timeout"
    DATA_TX = "data_tx"
    DATA_DECODED = "data_decoded"
    PACKET_LOST = "packet_lost"
    ACK_TX = "ack_tx"
    ACK_RECEIVED = "ack_received"
    ACK_TIMEOUT = "ack_timeout"
    RETRY = "retry"
    ABORT = "abort"

    # shared medium
    TX_START = "tx_start"
    TX_END = "tx_end"
    SENSE = "sense"
    BACKOFF = "backoff"
    BACKOFF_EXPIRY = "backoff_expiry"
    COLLISION = "collision"


@dataclass
class LinkEvent:
    """A single protocol or medium event; timestamp is simulated seconds"""
    timestamp: float
    trial: int
    role: str
    event_type: EventType
    description: str
    participants: Optional[List[str]] = None
    metadata: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        if self.participants is None:
            self.participants = []
        if self.metadata is None:
            self.metadata = {}


class LinkEventTracker:
    """Collects events and streams them to a JSONL file, one object per line.

    log_dir=None keeps events in memory only.
    """

    def __init__(self, log_filename: Optional[str] = None, log_dir: Optional[str] = "logs", echo: bool = False):
        self.events: List[LinkEvent] = []
        self.echo = echo
        self._log_file = None
        self._log_file_path: Optional[Path] = None
        if log_dir is None:
            return

        if log_filename is None:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            log_filename = f"link_log_{timestamp}.jsonl"
        logs_dir = Path(os.getenv("UWMODEM_LOG_DIR") or log_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)
        self._log_file_path = logs_dir / log_filename
        self._log_file = open(self._log_file_path, 'w', encoding='utf-8')
        logger.info(f"Link event log will be written to: {self._log_file_path}")

    def __del__(self):
        if getattr(self, '_log_file', None) and not self._log_file.closed:
            self._log_file.close()

    @property
    def path(self) -> Optional[Path]:
        return self._log_file_path

    def add_event(self,
                  event_type: EventType,
                  description: str,
                  timestamp: float = 0.0,
                  trial: int = 0,
                  role: str = "",
                  participants: Optional[List[str]] = None,
                  metadata: Optional[Dict[str, Any]] = None) -> None:
        event = LinkEvent(
            timestamp=float(timestamp),
            trial=trial,
            role=role,
            event_type=event_type,
            description=description,
            participants=participants or [],
            metadata=metadata or {},
        )
        self.events.append(event)
        if self.echo:
            self._print_event(event)
        self._write_event_to_jsonl(event)

    def _write_event_to_jsonl(self, event: LinkEvent) -> None:
        if self._log_file is None:
            return
        try:
            event_dict = asdict(event)
            event_dict['event_type'] = event.event_type.value
            self._log_file.write(json.dumps(event_dict, ensure_ascii=False, default=float) + '\n')
            self._log_file.flush()
        except (TypeError, ValueError, OSError) as e:
            logger.error(f"Failed to write event to JSONL file: {e}")

    def _print_event(self, event: LinkEvent) -> None:
        colors = {
            EventType.TRIAL_START: "\033[1;32m",        # Bold green
            EventType.TRIAL_END: "\033[1;32m",          # Bold green
            EventType.PREAMBLE_DETECTED: "\033[1;36m",  # Bold cyan
            EventType.FEEDBACK_DECODED: "\033[1;34m",   # Bold blue
            EventType.DATA_DECODED: "\033[1;92m",       # Bright green
            EventType.ACK_RECEIVED: "\033[1;92m",       # Bright green
            EventType.FEEDBACK_TIMEOUT: "\033[1;33m",   # Bold yellow
            EventType.ACK_TIMEOUT: "\033[1;33m",        # Bold yellow
            EventType.RETRY: "\033[0;33m",              # Yellow
            EventType.ABORT: "\033[1;31m",              # Bold red
            EventType.PACKET_LOST: "\033[1;31m",        # Bold red
            EventType.COLLISION: "\033[1;91m",          # Bright red
            EventType.SENSE: "\033[0;90m",              # Dark gray
        }
        reset = "\033[0m"
        color = colors.get(event.event_type, "\033[0;37m")
        who = f" [{event.role}]" if event.role else ""
        print(f"{color}{event.timestamp:9.4f}s{who} {event.event_type.value}: {event.description}{reset}")

    def close(self) -> Optional[str]:
        if self._log_file and not self._log_file.closed:
            self._log_file.close()
            logger.info(f"Link event log closed: {self._log_file_path}")
        return str(self._log_file_path) if self._log_file_path else None

    def get_events_by_type(self, event_type: EventType) -> List[LinkEvent]:
        return [event for event in self.events if event.event_type == event_type]

    def get_events_by_trial(self, trial: int) -> List[LinkEvent]:
        return [event for event in self.events if event.trial == trial]

    def get_statistics(self) -> Dict[str, Any]:
        by_type: Dict[str, int] = {}
        for event in self.events:
            by_type[event.event_type.value] = by_type.get(event.event_type.value, 0) + 1
        return {
            "total_events": len(self.events),
            "trials": len({event.trial for event in self.events}),
            "events_by_type": by_type,
            "retries": by_type.get(EventType.RETRY.value, 0),
            "aborts": by_type.get(EventType.ABORT.value, 0),
            "collisions": by_type.get(EventType.COLLISION.value, 0),
        }


def load_events_from_jsonl(filepath: str) -> List[LinkEvent]:
    """Read a trace written by LinkEventTracker; malformed lines are logged and skipped"""
    events: List[LinkEvent] = []
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            for line_num, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    event_dict = json.loads(line)
                    events.append(LinkEvent(
                        timestamp=event_dict['timestamp'],
                        trial=event_dict['trial'],
                        role=event_dict.get('role', ''),
                        event_type=EventType(event_dict['event_type']),
                        description=event_dict['description'],
                        participants=event_dict.get('participants', []),
                        metadata=event_dict.get('metadata', {}),
                    ))
                except json.JSONDecodeError as e:
                    logger.error(f"Invalid JSON on line {line_num} in {filepath}: {e}")
                except (KeyError, ValueError) as e:
                    logger.error(f"Invalid event data on line {line_num} in {filepath}: {e}")
    except FileNotFoundError:
        logger.error(f"JSONL file not found: {filepath}")
    return events
