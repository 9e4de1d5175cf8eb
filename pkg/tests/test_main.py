import io
import os
import tempfile
import unittest
from contextlib import redirect_stdout

from src.main import EXPERIMENTS, build_parser, main
from src.experiments import RUNNERS


class TestCommandLine(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.cwd = os.getcwd()
        # the log file lands in the working directory
        os.chdir(self.tmp.name)

    def tearDown(self) -> None:
        os.chdir(self.cwd)
        self.tmp.cleanup()

    def run_cli(self, *argv: str):
        out = io.StringIO()
        with redirect_stdout(out):
            code = main(list(argv))
        return code, out.getvalue()

    def test_every_subcommand_has_a_runner(self) -> None:
        self.assertEqual(set(RUNNERS), set(EXPERIMENTS.values()))

    def test_global_options(self) -> None:
        args = build_parser().parse_args(["-p", "test", "--seed", "3", "-n", "4", "link", "--scheme", "fixed_1-1.5k"])
        self.assertEqual("test", args.profile)
        self.assertEqual(3, args.seed)
        self.assertEqual(4, args.trials)
        self.assertEqual("fixed_1-1.5k", args.scheme)

    def test_messages(self) -> None:
        code, out = self.run_cli("messages", "--category", "status")
        self.assertEqual(0, code)
        self.assertIn("I am OK", out)

    def test_wav_roundtrip(self) -> None:
        path = os.path.join(self.tmp.name, "hello.wav")
        code, _ = self.run_cli("wav-export", path, "-m", "0", "2", "--dest", "9")
        self.assertEqual(0, code)
        self.assertTrue(os.path.exists(path))

        code, out = self.run_cli("wav-import", path)
        self.assertEqual(0, code)
        self.assertIn("Addressed to device 9", out)
        self.assertIn("I am OK", out)

    def test_too_many_messages(self) -> None:
        code, out = self.run_cli("wav-export", os.path.join(self.tmp.name, "x.wav"), "-m", "1", "2", "3")
        self.assertEqual(1, code)
        self.assertIn("at most two messages", out)

    def test_unknown_profile(self) -> None:
        code, out = self.run_cli("-p", "nope", "-n", "1", "link")
        self.assertEqual(1, code)
        self.assertIn("profile 'nope' not found", out)

    def test_mac_run_writes_report(self) -> None:
        out_path = os.path.join(self.tmp.name, "mac.csv")
        code, out = self.run_cli("-p", "test", "-n", "1", "-o", out_path, "mac")
        self.assertEqual(0, code)
        self.assertTrue(os.path.exists(out_path))
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "mac_events.jsonl")))
        self.assertIn("collisions with carrier sense", out)

    def test_full_phy_flag(self) -> None:
        self.assertTrue(build_parser().parse_args(["mac", "--full-phy"]).full_phy)
        self.assertFalse(build_parser().parse_args(["mac"]).full_phy)
