"""Command-line entry point: ``tagrelay {sim,serve,keys,adv,node}``.

Exit codes: 0 success, 1 runtime failure (e.g. cannot bind), 2 bad input.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from typing import Any, Sequence

from .errors import CodecError, MalformedAdvertisementError, ProtocolError, ScenarioError, ValidationError
from .protocol import (
    Advertisement, MasterSecret, RotationPolicy, TagStatus, current_epoch, decode_advertisement,
    derive_epoch_keypair, encode_advertisement,
)
from .reports import key_id
from .timeutil import parse_duration

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
DEFAULT_PORTS = {"cloud": 7450, "relay": 7451}


class UsageError(Exception):
    pass


def _hex(value: str, what: str, size: int | None = None) -> bytes:
    try:
        raw = bytes.fromhex(value.strip())
    except ValueError:
        raise UsageError(f"bad hex for {what}: {value!r}") from None
    if size is not None and len(raw) != size:
        raise UsageError(f"{what} must be {size} bytes ({2 * size} hex chars), got {len(raw)}")
    return raw


def _epoch_range(text: str) -> range:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            start, stop = int(lo), int(hi)
        else:
            start = stop = int(text)
    except ValueError:
        raise UsageError(f"bad epoch range {text!r}; use N or A..B") from None
    if start < 0 or stop < start:
        raise UsageError(f"bad epoch range {text!r}")
    return range(start, stop + 1)


def _param(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        pass
    try:
        return key, parse_duration(value)
    except ValueError:
        return key, value


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _duration(text: str) -> float:
    try:
        return parse_duration(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- sim ---------------------------------------------------------------------

def cmd_sim(args: argparse.Namespace) -> int:
    from .presets import PRESETS, load_preset
    from .relay import write_capture_log
    from .simnet.engine import Simulation
    from .simnet.scenario import load_scenario

    params = dict(args.param or [])
    try:
        if args.preset:
            if args.seed is not None:
                params.setdefault("seed", args.seed)
            scenario = load_preset(args.preset, params)
            until = args.until if args.until is not None else PRESETS[args.preset][1]
        else:
            if params:
                raise UsageError("--param only applies to presets")
            scenario = load_scenario(args.scenario)
            if args.until is None:
                raise UsageError("--until is required with --scenario")
            until = args.until
    except ScenarioError as exc:
        for location, message in exc.problems:
            print(f"{args.scenario or args.preset}: {location}: {message}", file=sys.stderr)
        return EXIT_INPUT
    except (ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    sim = Simulation(scenario, seed=args.seed)
    sim.run_until(until)
    if args.out in (None, "-"):
        sim.log.write_csv(sys.stdout, all_events=args.all_events)
    else:
        sim.log.save_csv(args.out, all_events=args.all_events)
    if args.captures:
        write_capture_log(sim.captures, args.captures)
    logging.getLogger(__name__).info("simulated %s s, %d events", until, len(sim.log))
    return EXIT_OK


# -- serve -------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    port = args.port if args.port is not None else DEFAULT_PORTS[args.role]
    if args.role == "cloud":
        from .cloud import CloudService, CloudStore

        core = CloudStore(args.journal)
        service = CloudService(core)
    else:
        from .relay import RelayServer, RelayService

        core = RelayServer(args.journal)
        service = RelayService(core, clock=args.clock)

    def ready(address):
        print(f"{args.role} listening on {address[0]}:{address[1]}", flush=True)

    try:
        asyncio.run(service.serve_until_signalled(args.host, port, ready))
    except OSError as exc:
        print(f"error: cannot serve on {args.host}:{port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        core.close()
    return EXIT_OK


# -- keys / adv ----------------------------------------------------------------

def cmd_keys(args: argparse.Namespace) -> int:
    secret = MasterSecret(_hex(args.secret, "--secret", 32), args.pairing_time)
    policy = RotationPolicy(args.period)
    if args.at is not None:
        now_epoch = current_epoch(policy, secret.pairing_time, args.at)
        epochs = range(now_epoch, now_epoch + 1)
    else:
        epochs = _epoch_range(args.epoch)
    for epoch in epochs:
        kp = derive_epoch_keypair(secret, epoch)
        fields = [str(epoch), kp.public_key.hex(), key_id(kp.public_key).hex()]
        if args.private:
            fields.append(kp.private_scalar.hex())
        print(" ".join(fields))
    return EXIT_OK


def cmd_adv(args: argparse.Namespace) -> int:
    if args.adv_command == "encode":
        key = _hex(args.key, "--key", 32)
        adv = encode_advertisement(key, TagStatus(lost=args.lost, battery_low=args.battery_low))
        print(adv.hex())
        return EXIT_OK
    raw = _hex(args.hex, "advertisement")
    try:
        key, status = decode_advertisement(Advertisement.from_bytes(raw))
    except MalformedAdvertisementError as exc:
        print(f"malformed advertisement: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"key {key.hex()}")
    print(f"lost {int(status.lost)}")
    print(f"battery_low {int(status.battery_low)}")
    print(f"key_id {key_id(key).hex()}")
    return EXIT_OK


# -- node --------------------------------------------------------------------

def cmd_node(args: argparse.Namespace) -> int:
    from .relay import EmitterClient, RelayClient, ReplayCommand, read_capture_log

    host, port = args.relay
    try:
        if args.node_command == "collector":
            messages = read_capture_log(args.capture)
            with RelayClient(host, port, "collector", args.id) as client:
                for msg in messages:
                    try:
                        beacon = client.observe(msg)
                    except ProtocolError as exc:
                        print(f"rejected {msg.advertisement.hex()} {exc}")
                        continue
                    print(f"beacon {beacon['beacon_id']} seen {beacon['seen_count']} "
                          f"first_seen {beacon['first_seen']:g}")
        elif args.node_command == "emitter":
            with EmitterClient(host, port, args.id, timeout=None) as client:
                print(f"emitter {args.id} ready", flush=True)
                for n, emission in enumerate(client.emissions(), 1):
                    print(f"emit {emission.at:g} beacon {emission.beacon_id} "
                          f"{emission.advertisement.hex()}", flush=True)
                    if args.count and n >= args.count:
                        break
        elif args.node_command == "schedule":
            with RelayClient(host, port, "controller", args.id) as client:
                cmd = ReplayCommand(args.beacon, args.emitter, args.start_at, args.interval, args.repeat)
                print(f"scheduled command {client.schedule(cmd)}")
                if args.advance is not None:
                    print(f"advanced clock to {args.advance:g}, emitted {client.advance_clock(args.advance)}")
    except OSError as exc:
        print(f"error: relay {host}:{port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .presets import PRESETS

    parser = argparse.ArgumentParser(prog="tagrelay", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run a scenario or preset and write the event CSV")
    source = sim.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=sorted(PRESETS))
    source.add_argument("--scenario", metavar="PATH")
    sim.add_argument("--until", type=_duration, default=None, help='e.g. "3600", "36h", "10d"')
    sim.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    sim.add_argument("--param", type=_param, action="append", metavar="KEY=VALUE")
    sim.add_argument("--all-events", action="store_true", help="include per-frame events")
    sim.add_argument("--captures", metavar="PATH", help="write collector captures as JSONL")
    sim.set_defaults(func=cmd_sim)

    serve = sub.add_parser("serve", help="run the cloud store or relay server")
    serve.add_argument("role", choices=("cloud", "relay"))
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=None)
    serve.add_argument("--journal", metavar="PATH")
    serve.add_argument("--clock", choices=("virtual", "wall"), default="wall",
                       help="relay schedule clock (default: wall)")
    serve.set_defaults(func=cmd_serve)

    keys = sub.add_parser("keys", help="derive epoch keys from a master secret")
    keys.add_argument("--secret", required=True, metavar="HEX")
    group = keys.add_mutually_exclusive_group()
    group.add_argument("--epoch", default="0", help="N or A..B (inclusive)")
    group.add_argument("--at", type=_duration, help="derive the key current at this time")
    keys.add_argument("--pairing-time", type=_duration, default=0)
    keys.add_argument("--period", type=_duration, default=86400)
    keys.add_argument("--private", action="store_true", help="also print private scalars")
    keys.set_defaults(func=cmd_keys)

    adv = sub.add_parser("adv", help="encode or decode advertisements")
    adv_sub = adv.add_subparsers(dest="adv_command", required=True)
    enc = adv_sub.add_parser("encode")
    enc.add_argument("--key", required=True, metavar="HEX")
    enc.add_argument("--lost", action="store_true")
    enc.add_argument("--battery-low", action="store_true")
    dec = adv_sub.add_parser("decode")
    dec.add_argument("hex")
    adv.set_defaults(func=cmd_adv)

    node = sub.add_parser("node", help="run an attack node against a relay server")
    node_sub = node.add_subparsers(dest="node_command", required=True)
    for name in ("collector", "emitter", "schedule"):
        p = node_sub.add_parser(name)
        p.add_argument("--relay", type=_address, default=("127.0.0.1", DEFAULT_PORTS["relay"]),
                       metavar="HOST:PORT")
        p.add_argument("--id", default=name)
        if name == "collector":
            p.add_argument("--capture", required=True, metavar="JSONL")
        elif name == "emitter":
            p.add_argument("--count", type=int, default=0, help="exit after N emissions")
        else:
            p.add_argument("--beacon", type=int, required=True)
            p.add_argument("--emitter", required=True)
            p.add_argument("--start-at", type=float, required=True)
            p.add_argument("--interval", type=float, required=True)
            p.add_argument("--repeat", type=int, default=None)
            p.add_argument("--advance", type=float, default=None,
                           help="virtual-clock relays: advance the clock afterwards")
    node.set_defaults(func=cmd_node)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, CodecError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
