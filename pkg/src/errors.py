"""Exception hierarchy shared by the modem, the channel simulator and the CLI."""


class ModemError(ValueError):
    """Base class for every error raised by the modem package"""


class ConfigError(ModemError):
    """Unresolvable or invalid configuration (bad profile, schema mismatch)"""


class SignalError(ModemError):
    """A signal argument violates a precondition (length, band edges, offsets)"""


class PacketLostError(ModemError):
    """The training symbol of a packet was not found where it was expected"""


class WavFormatError(ModemError):
    """Malformed WAV file or a sample rate that does not match the config"""
