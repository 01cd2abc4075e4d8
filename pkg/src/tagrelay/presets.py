"""Ready-made scenarios, one per experiment.

Site A (the real tag) sits at the plane origin; site B (where the relay
rebroadcasts) sits ``distance`` meters east. Every preset accepts world
setting overrides plus the preset-specific knobs listed in ``PRESETS``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ValidationError
from .simnet.scenario import ScenarioScript, parse_scenario
from .simnet.world import WorldConfig

DAY = 86400


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    parameters: dict[str, Any] = field(default_factory=dict)

    def expand(self) -> dict[str, Any]:
        return build_preset_document(self.name, self.parameters)

    def scenario(self) -> ScenarioScript:
        return parse_scenario(self.expand(), name=self.name)

    @property
    def default_until(self) -> float:
        return PRESETS[self.name][1]


def _relay_basic(p: dict) -> dict:
    d = p["distance"]
    return {
        "description": "live relay of a tag at A to an emitter at B; owner sees B",
        "world": {"finder_cooldown": 60},
        "entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0]},
            {"id": "collector", "kind": "collector", "position": [3, 0]},
            {"id": "emitter", "kind": "emitter", "position": [d, 0]},
            {"id": "finder_b", "kind": "finder", "position": [d + 5, 0]},
            {"id": "owner", "kind": "owner_phone", "position": [-5000, 3000], "tag": "tag"},
        ],
        "timeline": [
            {"at": 0, "action": "start_relay", "args": {"emitter": "emitter", "mode": "live"}},
        ],
    }


def _key_rotation(p: dict) -> dict:
    d = p["distance"]
    return {
        "description": "replay an epoch-0 beacon at B forever; a legitimate epoch-1 report at A "
                       "invalidates it",
        "world": {"finder_cooldown": 300, "owner_poll_interval": 300},
        "entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
            {"id": "collector", "kind": "collector", "position": [3, 0]},
            {"id": "emitter", "kind": "emitter", "position": [d, 0]},
            {"id": "finder_b", "kind": "finder", "position": [d + 5, 0]},
            {"id": "finder_a", "kind": "finder", "position": [0, 5000]},
            {"id": "owner", "kind": "owner_phone", "position": [-5000, 3000], "tag": "tag"},
        ],
        "timeline": [
            {"at": 60, "action": "start_relay",
             "args": {"emitter": "emitter", "mode": "replay", "captured_before": 60, "interval": 60}},
            {"at": 600, "action": "move", "args": {"entity": "collector", "position": [3, 9000]}},
            {"at": p["legit_at"], "action": "move", "args": {"entity": "finder_a", "position": [5, 0]}},
        ],
    }


def _alternation(p: dict) -> dict:
    d = p["distance"]
    return {
        "description": "legitimate reports at A and relayed reports at B, 60 s apart",
        "world": {"finder_cooldown": 120, "relay_delay": 60, "owner_poll_interval": 60},
        "entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
            {"id": "finder_a", "kind": "finder", "position": [5, 0]},
            {"id": "collector", "kind": "collector", "position": [3, 0]},
            {"id": "emitter", "kind": "emitter", "position": [d, 0]},
            {"id": "finder_b", "kind": "finder", "position": [d + 5, 0]},
            {"id": "owner", "kind": "owner_phone", "position": [-5000, 3000], "tag": "tag",
             "poll_offset": 30},
        ],
        "timeline": [
            {"at": 0, "action": "start_relay", "args": {"emitter": "emitter", "mode": "live"}},
        ],
    }


def _local_override(p: dict) -> dict:
    start = p["replay_at"]
    return {
        "description": "replay a three-epoch-old beacon next to the owner phone",
        "world": {"finder_cooldown": 300},
        "entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
            {"id": "finder_a", "kind": "finder", "position": [5, 0]},
            {"id": "collector", "kind": "collector", "position": [3, 0]},
            {"id": "owner", "kind": "owner_phone", "position": [0, 2000], "tag": "tag"},
            {"id": "emitter", "kind": "emitter", "position": [2, 2000]},
        ],
        "timeline": [
            {"at": 3600, "action": "move", "args": {"entity": "collector", "position": [3, 9000]}},
            {"at": start, "action": "start_relay",
             "args": {"emitter": "emitter", "mode": "replay", "captured_before": 3600,
                      "interval": 2, "repeat": p["replay_count"]}},
        ],
    }


def _replay_lifetime(p: dict) -> dict:
    d = p["distance"]
    capture = p["capture_at"]
    return {
        "description": "battery pulled right after capture; the frozen beacon is replayed at B "
                       "until the owner app marks it outdated",
        "world": {"owner_poll_interval": 300},
        "entities": [
            {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost"},
            {"id": "collector", "kind": "collector", "position": [3, 0]},
            {"id": "emitter", "kind": "emitter", "position": [d, 0]},
            {"id": "finder_b", "kind": "finder", "position": [d + 5, 0]},
            {"id": "owner", "kind": "owner_phone", "position": [-5000, 3000], "tag": "tag"},
        ],
        "timeline": [
            {"at": capture, "action": "power", "args": {"tag": "tag", "on": False}},
            {"at": capture + 1, "action": "start_relay",
             "args": {"emitter": "emitter", "mode": "replay", "captured_before": capture,
                      "interval": p["replay_interval"]}},
        ],
    }


# name -> (builder, default until, preset-specific defaults)
PRESETS: dict[str, tuple[Callable[[dict], dict], float, dict[str, Any]]] = {
    "relay-basic": (_relay_basic, 3600, {"distance": 1000}),
    "key-rotation": (_key_rotation, 2 * DAY, {"distance": 1000, "legit_at": DAY + 3600}),
    "alternation": (_alternation, 3600, {"distance": 1000}),
    "local-override": (_local_override, 3 * DAY + 2 * 3600,
                       {"replay_at": 3 * DAY + 1800, "replay_count": 1800}),
    "replay-lifetime": (_replay_lifetime, 10 * DAY,
                        {"distance": 1000, "capture_at": 2 * DAY - 1, "replay_interval": 600}),
}


def build_preset_document(name: str, parameters: dict[str, Any] | None = None) -> dict[str, Any]:
    """Expand a preset into a scenario document; ``seed`` and world settings may be overridden."""
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    builder, _until, defaults = PRESETS[name]
    params = dict(parameters or {})
    seed = params.pop("seed", 0)
    world = {k: params.pop(k) for k in list(params) if k in WorldConfig.field_names()}
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown parameters for {name}: {', '.join(sorted(unknown))}")
    doc = builder({**defaults, **params})
    doc["name"] = name
    doc["seed"] = seed
    doc["world"] = {**doc["world"], **world}
    return doc


def load_preset(name: str, parameters: dict[str, Any] | None = None) -> ScenarioScript:
    return parse_scenario(build_preset_document(name, parameters), name=name)
