"""Discrete-event world: tags, finders, owner phones, and relay nodes."""

from .engine import Simulation, finder_behavior, run
from .eventlog import CSV_COLUMNS, Event, EventLog
from .scenario import ScenarioScript, load_scenario, parse_scenario
from .world import Observation, WorldConfig, deliver_advertisement, rssi_at

__all__ = [
    "CSV_COLUMNS", "Event", "EventLog", "Observation", "ScenarioScript", "Simulation",
    "WorldConfig", "deliver_advertisement", "finder_behavior", "load_scenario",
    "parse_scenario", "rssi_at", "run",
]
