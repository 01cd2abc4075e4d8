"""Duration parsing for flags and scenario files ("90s", "36h", "7d", "1.5h")."""

from __future__ import annotations

import re

_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}
_DURATION = re.compile(r"^\s*(\d+(?:\.\d*)?|\.\d+)\s*([smhdw]?)\s*$")


def parse_duration(value: str | int | float) -> float:
    if isinstance(value, bool):
        raise ValueError(f"not a duration: {value!r}")
    if isinstance(value, (int, float)):
        seconds = float(value)
    else:
        match = _DURATION.match(value)
        if not match:
            raise ValueError(f"not a duration: {value!r}")
        seconds = float(match.group(1)) * _UNITS[match.group(2)]
    if seconds < 0:
        raise ValueError(f"duration must be non-negative: {value!r}")
    return int(seconds) if seconds.is_integer() else seconds


def format_time(t: float) -> str:
    if float(t).is_integer():
        return str(int(t))
    return repr(float(t))
