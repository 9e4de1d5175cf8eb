import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    from errors import ConfigError, SignalError
    from utils import int_to_bits, bits_to_int
except ModuleNotFoundError:
    from src.errors import ConfigError, SignalError
    from src.utils import int_to_bits, bits_to_int

logger = logging.getLogger(__name__)

DEFAULT_CATALOG_PATH = os.path.join(os.path.dirname(__file__), "..", "data", "messages.txt")
CATALOG_SIZE = 240
EMPTY_CODE = 255


@dataclass(frozen=True)
class Message:
    code: int
    category: str
    text: str

    def __str__(self):
        return f"[{self.code:3d}] {self.category}: {self.text}"


class MessageCatalog:
    """Predefined diver messages addressed by 8-bit codes; two codes fill one 16-bit payload"""

    def __init__(self, messages: List[Message]):
        if len(messages) != CATALOG_SIZE:
            raise ConfigError(f"message catalog must hold {CATALOG_SIZE} entries, got {len(messages)}")
        self.messages = messages
        self._by_text: Dict[str, Message] = {m.text.lower(): m for m in messages}

    @classmethod
    def load(cls, path: Optional[str] = None) -> "MessageCatalog":
        path = path or DEFAULT_CATALOG_PATH
        messages = []
        try:
            with open(path, "r", encoding="utf-8") as f:
                for line_num, line in enumerate(f, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "|" not in line:
                        raise ConfigError(f"{path}:{line_num}: expected 'category|message'")
                    category, text = (part.strip() for part in line.split("|", 1))
                    messages.append(Message(len(messages), category, text))
        except FileNotFoundError as e:
            raise ConfigError(f"message catalog not found: {path}") from e
        logger.debug(f"Loaded {len(messages)} messages from {path}")
        return cls(messages)

    def __len__(self):
        return len(self.messages)

    def message(self, code: int) -> Optional[Message]:
        if code == EMPTY_CODE:
            return None
        if not 0 <= code < len(self.messages):
            raise SignalError(f"message code {code} is not in the catalog")
        return self.messages[code]

    def code_of(self, text: str) -> int:
        try:
            return self._by_text[text.strip().lower()].code
        except KeyError:
            raise SignalError(f"'{text}' is not a catalog message") from None

    def categories(self) -> Dict[str, List[Message]]:
        grouped: Dict[str, List[Message]] = {}
        for m in self.messages:
            grouped.setdefault(m.category, []).append(m)
        return grouped

    def encode_payload(self, first: int, second: int = EMPTY_CODE) -> np.ndarray:
        """16 payload bits: first code in the high byte"""
        for code in (first, second):
            if code != EMPTY_CODE:
                self.message(code)
        return int_to_bits((first << 8) | second, 16)

    def decode_payload(self, bits) -> Tuple[Optional[Message], Optional[Message]]:
        value = bits_to_int(bits)
        first, second = value >> 8, value & 0xFF
        return self._lookup(first), self._lookup(second)

    def _lookup(self, code: int) -> Optional[Message]:
        # a corrupted code outside the catalog decodes to nothing rather than raising
        if code == EMPTY_CODE or code >= len(self.messages):
            return None
        return self.messages[code]
