"""Scenario scripts: JSON documents describing a world, its entities, and a timeline.

Example::

    {
      "seed": 7,
      "world": {"finder_cooldown": 120},
      "entities": [
        {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
        {"id": "phone", "kind": "owner_phone", "position": [5000, 0], "tag": "tag"}
      ],
      "timeline": [
        {"at": "1h", "action": "power", "args": {"tag": "tag", "on": false}}
      ]
    }

Plane coordinates are meters; report latitude/longitude come from the
affine mapping around ``world.origin_lat``/``origin_lon``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..errors import ScenarioError, ValidationError
from ..timeutil import parse_duration
from .world import ENTITY_KINDS, WorldConfig

ACTIONS = ("move", "power", "pair", "owner_contact", "start_relay", "stop_relay")
RELAY_MODES = ("live", "replay")


@dataclass(frozen=True)
class TimelineEntry:
    at: float
    action: str
    args: dict[str, Any]
    index: int


@dataclass(frozen=True)
class EntitySpec:
    id: str
    kind: str
    position: tuple[float, float]
    options: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioScript:
    world: WorldConfig
    entities: tuple[EntitySpec, ...]
    timeline: tuple[TimelineEntry, ...]
    seed: int = 0
    name: str = ""

    def entity(self, entity_id: str) -> EntitySpec:
        for spec in self.entities:
            if spec.id == entity_id:
                return spec
        raise KeyError(entity_id)


def _line_index(text: str) -> dict[tuple, int]:
    """Map JSON paths to 1-based line numbers; empty if the text is not YAML-parsable."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    index: dict[tuple, int] = {}

    def walk(node, path):
        index[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                walk(value, path + (key.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, path + (i,))

    if root is not None:
        walk(root, ())
    return index


def _fmt_path(path: tuple) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


class _Problems:
    def __init__(self, lines: dict[tuple, int]):
        self.lines = lines
        self.items: list[tuple[str, str]] = []

    def add(self, path: tuple, message: str) -> None:
        loc = _fmt_path(path)
        for cut in range(len(path), -1, -1):
            line = self.lines.get(path[:cut])
            if line is not None:
                loc = f"line {line}: {loc}"
                break
        self.items.append((loc, message))


def _position(value: Any) -> tuple[float, float] | None:
    if (
        isinstance(value, (list, tuple)) and len(value) == 2
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    ):
        return float(value[0]), float(value[1])
    return None


def _time(value: Any, path: tuple, problems: _Problems) -> float | None:
    try:
        return parse_duration(value)
    except (TypeError, ValueError):
        problems.add(path, f"expected a non-negative time, got {value!r}")
        return None


def parse_scenario(obj: Any, lines: dict[tuple, int] | None = None, name: str = "") -> ScenarioScript:
    """Validate a decoded scenario document; raises ScenarioError listing every problem."""
    problems = _Problems(lines or {})
    if not isinstance(obj, dict):
        raise ScenarioError([("<root>", "scenario must be a JSON object")])
    unknown = set(obj) - {"seed", "world", "entities", "timeline", "name", "description"}
    for key in sorted(unknown):
        problems.add((key,), "unknown top-level key")

    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.add(("seed",), "seed must be an integer")
        seed = 0

    world_obj = obj.get("world", {})
    world = WorldConfig()
    if not isinstance(world_obj, dict):
        problems.add(("world",), "world must be an object")
    else:
        try:
            world = WorldConfig.from_overrides(world_obj)
        except (ValidationError, TypeError) as exc:
            problems.add(("world",), str(exc))

    entities: list[EntitySpec] = []
    kinds: dict[str, str] = {}
    raw_entities = obj.get("entities", [])
    if not isinstance(raw_entities, list):
        problems.add(("entities",), "entities must be a list")
        raw_entities = []
    for i, ent in enumerate(raw_entities):
        path = ("entities", i)
        if not isinstance(ent, dict):
            problems.add(path, "entity must be an object")
            continue
        ident, kind = ent.get("id"), ent.get("kind")
        if not isinstance(ident, str) or not ident:
            problems.add(path + ("id",), "id must be a non-empty string")
            continue
        if ident in kinds:
            problems.add(path + ("id",), f"duplicate entity id {ident!r}")
            continue
        if kind not in ENTITY_KINDS:
            problems.add(path + ("kind",), f"kind must be one of {', '.join(ENTITY_KINDS)}")
            continue
        pos = _position(ent.get("position"))
        if pos is None:
            problems.add(path + ("position",), "position must be [x, y] in meters")
            continue
        options = {k: v for k, v in ent.items() if k not in ("id", "kind", "position")}
        _check_entity_options(kind, options, path, problems)
        kinds[ident] = kind
        entities.append(EntitySpec(ident, kind, pos, options))

    for i, spec in enumerate(entities):
        if spec.kind == "owner_phone":
            tag = spec.options.get("tag")
            if kinds.get(tag) != "tag":
                problems.add(("entities", i, "tag"), f"owner_phone must name a tag entity, got {tag!r}")

    timeline: list[TimelineEntry] = []
    raw_timeline = obj.get("timeline", [])
    if not isinstance(raw_timeline, list):
        problems.add(("timeline",), "timeline must be a list")
        raw_timeline = []
    for i, entry in enumerate(raw_timeline):
        path = ("timeline", i)
        if not isinstance(entry, dict):
            problems.add(path, "timeline entry must be an object")
            continue
        at = _time(entry.get("at"), path + ("at",), problems)
        action = entry.get("action")
        args = entry.get("args", {})
        if action not in ACTIONS:
            problems.add(path + ("action",), f"action must be one of {', '.join(ACTIONS)}")
            continue
        if not isinstance(args, dict):
            problems.add(path + ("args",), "args must be an object")
            continue
        args = _check_action(action, dict(args), kinds, path + ("args",), problems)
        if at is not None and args is not None:
            timeline.append(TimelineEntry(at, action, args, i))

    if problems.items:
        raise ScenarioError(problems.items)
    return ScenarioScript(world, tuple(entities), tuple(timeline), seed, name or str(obj.get("name", "")))


def _check_entity_options(kind: str, options: dict, path: tuple, problems: _Problems) -> None:
    if kind == "tag":
        secret = options.get("secret")
        if secret is not None:
            try:
                if len(bytes.fromhex(secret)) != 32:
                    raise ValueError
            except (TypeError, ValueError):
                problems.add(path + ("secret",), "secret must be 64 hex characters")
        for key in ("pairing_time", "period"):
            if key in options:
                value = _time(options[key], path + (key,), problems)
                if value is not None:
                    options[key] = value
        if options.get("period", 1) == 0:
            problems.add(path + ("period",), "period must be > 0")
        if options.get("mode", "connected") not in ("connected", "lost"):
            problems.add(path + ("mode",), "mode must be 'connected' or 'lost'")
        if not isinstance(options.get("powered", True), bool):
            problems.add(path + ("powered",), "powered must be a boolean")
    elif kind == "owner_phone":
        for key in ("poll_interval", "poll_offset"):
            if key in options:
                value = _time(options[key], path + (key,), problems)
                if value is not None:
                    options[key] = value
        if options.get("poll_interval", 1) == 0:
            problems.add(path + ("poll_interval",), "poll_interval must be > 0")


def _need(args: dict, key: str, kinds: dict, wanted: tuple, path: tuple, problems: _Problems) -> bool:
    ident = args.get(key)
    if ident not in kinds:
        problems.add(path + (key,), f"unknown entity {ident!r}")
        return False
    if kinds[ident] not in wanted:
        problems.add(path + (key,), f"{ident!r} is a {kinds[ident]}, expected {'/'.join(wanted)}")
        return False
    return True


def _check_action(action: str, args: dict, kinds: dict, path: tuple, problems: _Problems) -> dict | None:
    ok = True
    if action == "move":
        ok = _need(args, "entity", kinds, ENTITY_KINDS, path, problems)
        pos = _position(args.get("position"))
        if pos is None:
            problems.add(path + ("position",), "position must be [x, y]")
            ok = False
        else:
            args["position"] = pos
    elif action == "power":
        ok = _need(args, "tag", kinds, ("tag",), path, problems)
        if not isinstance(args.get("on"), bool):
            problems.add(path + ("on",), "on must be a boolean")
            ok = False
    elif action == "pair":
        ok = _need(args, "tag", kinds, ("tag",), path, problems)
        if "secret" in args:
            try:
                if len(bytes.fromhex(args["secret"])) != 32:
                    raise ValueError
            except (TypeError, ValueError):
                problems.add(path + ("secret",), "secret must be 64 hex characters")
                ok = False
    elif action == "owner_contact":
        ok = _need(args, "tag", kinds, ("tag",), path, problems)
    elif action == "stop_relay":
        ok = _need(args, "emitter", kinds, ("emitter",), path, problems)
    elif action == "start_relay":
        ok = _need(args, "emitter", kinds, ("emitter",), path, problems)
        mode = args.setdefault("mode", "live")
        if mode not in RELAY_MODES:
            problems.add(path + ("mode",), "mode must be 'live' or 'replay'")
            return None
        for key in ("delay", "interval", "start_at", "captured_before"):
            if key in args:
                value = _time(args[key], path + (key,), problems)
                if value is None:
                    ok = False
                args[key] = value
        if mode == "replay":
            if not args.get("interval"):
                problems.add(path + ("interval",), "replay needs interval > 0")
                ok = False
            if ("beacon" in args) == ("captured_before" in args):
                problems.add(path, "replay needs exactly one of beacon, captured_before")
                ok = False
            repeat = args.get("repeat")
            if repeat is not None and (not isinstance(repeat, int) or isinstance(repeat, bool) or repeat < 1):
                problems.add(path + ("repeat",), "repeat must be a positive integer or null")
                ok = False
    return args if ok else None


def load_scenario(path: str | Path) -> ScenarioScript:
    """Read and validate a scenario file; JSON syntax errors carry line/column."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError([(str(path), f"cannot read scenario: {exc.strerror or exc}")]) from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([(f"line {exc.lineno}, column {exc.colno}", exc.msg)]) from exc
    return parse_scenario(obj, _line_index(text), name=path.stem)
