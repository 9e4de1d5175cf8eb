import os
import sys
import logging
import argparse
from dataclasses import replace
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

try:
    from errors import ModemError, ConfigError
    from modem_config import ModemConfig, load_profile
    from modem_enums import Scheme
    from messages import MessageCatalog, EMPTY_CODE
    from link_events import LinkEventTracker
    from beacon import BeaconConfig
    from experiments import ExperimentSpec, Report, RUNNERS, export_wav, import_wav
except ModuleNotFoundError:
    from src.errors import ModemError, ConfigError
    from src.modem_config import ModemConfig, load_profile
    from src.modem_enums import Scheme
    from src.messages import MessageCatalog, EMPTY_CODE
    from src.link_events import LinkEventTracker
    from src.beacon import BeaconConfig
    from src.experiments import ExperimentSpec, Report, RUNNERS, export_wav, import_wav

# Load environment variables from parent directory
load_dotenv(os.path.join(os.path.dirname(__file__), '..', '.env'))

logger = logging.getLogger(__name__)

GREEN = "\033[1;32m"
CYAN = "\033[1;36m"
YELLOW = "\033[1;33m"
RED = "\033[1;31m"
RESET = "\033[0m"

# subcommand -> experiment name
EXPERIMENTS = {
    "link": "link",
    "ber-sweep": "ber_sweep",
    "band-adapt": "band_adapt",
    "mobility": "mobility",
    "spacing": "spacing",
    "stability": "stability",
    "beacon": "beacon",
    "mac": "mac",
}

# experiments that write a protocol or medium event trace
TRACED = ("link", "band_adapt", "mac")


def configure_logging(debug=False):
    """Configure logging based on debug flag"""
    log_level = logging.DEBUG if debug else logging.INFO

    # Root logger writes only to file, not to console
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler("uwmodem.log")
        ]
    )
    if debug:
        logger.debug("Debug mode enabled - receive-chain spectra will be dumped")


def _progress(label: str):
    def report(done: int, total: int) -> None:
        print(f"\r{CYAN}{label}{RESET} {done}/{total}", end="", flush=True)
        if done == total:
            print()
    return report


def _load_channel_file(path: Optional[str]) -> Optional[Dict[str, Any]]:
    if not path:
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"channel file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"channel file {path} is not valid YAML: {e}") from e


def _tracker(args, name: str) -> Optional[LinkEventTracker]:
    if args.out:
        directory = os.path.dirname(os.path.abspath(args.out))
        stem = os.path.splitext(os.path.basename(args.out))[0]
        return LinkEventTracker(log_filename=f"{stem}_events.jsonl", log_dir=directory, echo=args.verbose)
    return LinkEventTracker(log_filename=f"{name}_seed{args.seed or 0}.jsonl", echo=args.verbose)


def print_summary(report: Report, tracker: Optional[LinkEventTracker] = None) -> None:
    """Print the end-of-run summary"""
    print(f"\n🎯 {report.name} summary:")
    print(f"   • Rows: {len(report.rows)}")
    for key, value in report.summary.items():
        if isinstance(value, dict):
            print(f"   • {key}:")
            for inner_key, inner_value in value.items():
                print(f"     - {inner_key}: {inner_value}")
        else:
            print(f"   • {key}: {value}")
    if tracker is not None:
        stats = tracker.get_statistics()
        print(f"\n📡 Event trace:")
        print(f"   • Total events: {stats['total_events']}")
        print(f"   • Retries: {stats['retries']}")
        print(f"   • Aborts: {stats['aborts']}")
        if stats['collisions']:
            print(f"   • Collisions: {stats['collisions']}")
        path = tracker.close()
        if path:
            print(f"   • Written to: {path}")
    if report.path:
        print(f"\n{GREEN}Report written to {report.path}{RESET}")


def run_experiment(args) -> Report:
    name = EXPERIMENTS[args.command]
    profile = load_profile(args.config, args.profile)
    spec = ExperimentSpec.from_profile(
        profile, name,
        channel=_load_channel_file(args.channel),
        mac_scenario_path=args.scenario,
        trials=args.trials, seed=args.seed, out=args.out,
        scheme=Scheme(args.scheme) if getattr(args, "scheme", None) else None,
        trace_dir=os.path.join("logs", "rx_trace") if args.debug else None,
    )
    if getattr(args, "full_phy", False):
        spec = replace(spec, mac=replace(spec.mac, full_phy=True))
    logger.info(f"Running {name} with {spec.trials} trials, seed {spec.seed}")
    progress = _progress(name)

    tracker = None
    if name in TRACED:
        tracker = _tracker(args, name)
        report = RUNNERS[name](spec, tracker=tracker, progress=progress)
    else:
        report = RUNNERS[name](spec, progress=progress)

    logger.info(f"{name} finished: {report.summary}")
    print_summary(report, tracker)
    return report


def run_wav_export(args) -> None:
    cfg = ModemConfig.from_dict(load_profile(args.config, args.profile).get("modem"))
    if args.beacon is not None:
        export_wav(args.path, cfg, beacon_value=args.beacon,
                   beacon=BeaconConfig(sample_rate=cfg.sample_rate, n_bits=args.beacon_bits))
        print(f"{GREEN}Beacon {args.beacon} written to {args.path}{RESET}")
        return
    catalog = MessageCatalog.load()
    codes = list(args.message) + [EMPTY_CODE] * (2 - len(args.message))
    payload = catalog.encode_payload(codes[0], codes[1])
    export_wav(args.path, cfg, payload=payload, dest_id=args.dest)
    for code in codes:
        message = catalog.message(code)
        if message is not None:
            print(f"   • {message}")
    print(f"{GREEN}Packet for device {args.dest} written to {args.path}{RESET}")


def run_wav_import(args) -> None:
    cfg = ModemConfig.from_dict(load_profile(args.config, args.profile).get("modem"))
    result = import_wav(args.path, cfg, BeaconConfig(sample_rate=cfg.sample_rate, n_bits=args.beacon_bits))
    print(f"\n🎯 {args.path}: {len(result.buffer.samples)} samples, {result.buffer.duration:.2f} s")
    if result.payload is not None:
        catalog = MessageCatalog.load()
        print(f"   • Addressed to device {result.device_id}")
        for message in catalog.decode_payload(result.payload):
            if message is not None:
                print(f"   • {message}")
    elif result.beacon_value is not None:
        print(f"   • Beacon value {result.beacon_value}")
    else:
        print(f"{YELLOW}   • Nothing decodable found{RESET}")


def run_messages(args) -> None:
    catalog = MessageCatalog.load()
    for category, messages in catalog.categories().items():
        if args.category and category.lower() != args.category.lower():
            continue
        print(f"\n{CYAN}{category}{RESET}")
        for message in messages:
            print(f"   {message.code:3d}  {message.text}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Underwater OFDM messaging modem: simulations and tools")
    parser.add_argument("--config", "-c", default=None,
                        help="Config YAML (default: $UWMODEM_CONFIG or config.yaml)")
    parser.add_argument("--profile", "-p", default="default", help="Profile inside the config file")
    parser.add_argument("--seed", type=int, default=None, help="Base random seed")
    parser.add_argument("--trials", "-n", type=int, default=None, help="Trials per experiment point")
    parser.add_argument("--out", "-o", default=None, help="CSV report path")
    parser.add_argument("--channel", default=None, help="Channel model YAML overriding the profile")
    parser.add_argument("--scenario", default=None, help="MAC scenario YAML")
    parser.add_argument("--debug", "-d", action="store_true",
                        help="Enable debug logging and receive-chain spectrum dumps")
    parser.add_argument("--verbose", "-v", action="store_true", help="Echo protocol events to the console")

    sub = parser.add_subparsers(dest="command", required=True)
    for command in EXPERIMENTS:
        p = sub.add_parser(command)
        if command == "link":
            p.add_argument("--scheme", choices=[s.value for s in Scheme], default=None)
        elif command == "mac":
            p.add_argument("--full-phy", action="store_true",
                           help="Sense on rendered audio instead of packet-level energy (slow)")

    export = sub.add_parser("wav-export", help="Write a packet or beacon as 16-bit PCM")
    export.add_argument("path")
    export.add_argument("--message", "-m", type=int, nargs="+", default=[0],
                        help="One or two catalog codes for the packet payload")
    export.add_argument("--dest", type=int, default=7, help="Destination device ID")
    export.add_argument("--beacon", type=int, default=None, help="Export an SoS beacon with this value instead")
    export.add_argument("--beacon-bits", type=int, default=6, choices=(6, 8))

    imp = sub.add_parser("wav-import", help="Decode a recording")
    imp.add_argument("path")
    imp.add_argument("--beacon-bits", type=int, default=6, choices=(6, 8))

    messages = sub.add_parser("messages", help="List the message catalog")
    messages.add_argument("--category", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.debug)
    try:
        if args.command in EXPERIMENTS:
            run_experiment(args)
        elif args.command == "wav-export":
            if len(args.message) > 2:
                raise ConfigError("a packet carries at most two messages")
            run_wav_export(args)
        elif args.command == "wav-import":
            run_wav_import(args)
        else:
            run_messages(args)
    except ModemError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{RED}ERROR: {e}{RESET}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
