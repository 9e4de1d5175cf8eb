from enum import Enum


class Role(Enum):
    SENDER = "sender"
    RECEIVER = "receiver"


class LinkPhase(Enum):
    IDLE = "idle"
    PREAMBLE_SENT = "preamble_sent"
    AWAITING_FEEDBACK = "awaiting_feedback"
    SENDING_DATA = "sending_data"
    AWAITING_ACK = "awaiting_ack"
    RECEIVING = "receiving"
    DONE = "done"
    ABORTED = "aborted"


class Mobility(Enum):
    STATIC = "static"
    SLOW = "slow"
    FAST = "fast"


class MediumEventKind(Enum):
    TX_START = "tx_start"
    TX_END = "tx_end"
    SENSE = "sense"
    BACKOFF_EXPIRY = "backoff_expiry"


class Scheme(Enum):
    """Band choice used by a link trial"""
    ADAPTIVE = "adaptive"
    FIXED_4K = "fixed_1-4k"
    FIXED_2K5 = "fixed_1-2.5k"
    FIXED_1K5 = "fixed_1-1.5k"
