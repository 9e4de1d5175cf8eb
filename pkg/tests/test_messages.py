import os
import tempfile
import unittest

import numpy.testing as npt

from src.errors import ConfigError, SignalError
from src.messages import CATALOG_SIZE, EMPTY_CODE, MessageCatalog


class TestMessageCatalog(unittest.TestCase):

    def setUp(self) -> None:
        self.catalog = MessageCatalog.load()

    def test_shipped_catalog(self) -> None:
        self.assertEqual(CATALOG_SIZE, len(self.catalog))
        categories = self.catalog.categories()
        self.assertEqual(8, len(categories))
        self.assertTrue(all(len(group) == 30 for group in categories.values()))
        self.assertEqual("OK", self.catalog.message(0).text)

    def test_lookup_by_text(self) -> None:
        self.assertEqual(0, self.catalog.code_of("ok"))
        self.assertEqual(2, self.catalog.code_of("  I am OK "))
        with self.assertRaises(SignalError):
            self.catalog.code_of("let's get pizza")

    def test_payload_roundtrip(self) -> None:
        bits = self.catalog.encode_payload(3, 117)
        self.assertEqual(16, bits.size)
        first, second = self.catalog.decode_payload(bits)
        self.assertEqual(3, first.code)
        self.assertEqual(117, second.code)

    def test_empty_second_slot(self) -> None:
        bits = self.catalog.encode_payload(9)
        npt.assert_array_equal([1] * 8, bits[8:])
        first, second = self.catalog.decode_payload(bits)
        self.assertEqual(9, first.code)
        self.assertIsNone(second)
        self.assertIsNone(self.catalog.message(EMPTY_CODE))

    def test_codes_outside_catalog(self) -> None:
        with self.assertRaises(SignalError):
            self.catalog.encode_payload(240)
        first, second = self.catalog.decode_payload([1, 1, 1, 1, 0, 0, 0, 0] + [0] * 8)
        self.assertIsNone(first)
        self.assertEqual(0, second.code)

    def test_str(self) -> None:
        self.assertEqual("[  0] Status: OK", str(self.catalog.message(0)))


class TestCatalogFile(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "messages.txt")

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_wrong_size(self) -> None:
        with open(self.path, "w", encoding="utf-8") as f:
            f.write("# comment\nStatus|OK\nStatus|Up\n")
        with self.assertRaises(ConfigError):
            MessageCatalog.load(self.path)

    def test_malformed_line(self) -> None:
        with open(self.path, "w", encoding="utf-8") as f:
            f.write("Status OK\n")
        with self.assertRaises(ConfigError):
            MessageCatalog.load(self.path)

    def test_missing_file(self) -> None:
        with self.assertRaises(ConfigError):
            MessageCatalog.load(os.path.join(self.tmp.name, "nope.txt"))
