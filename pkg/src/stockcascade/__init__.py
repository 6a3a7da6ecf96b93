"""Stage-by-stage simulation of capacity trading between autonomous networks."""
from importlib import resources

from .engine import SimulationReport, run, run_stage
from .topology import Scenario, ScenarioConfig, load_scenario, parse_topology

__all__ = ["bundled_text", "Scenario", "ScenarioConfig", "SimulationReport", "load_scenario",
           "parse_topology", "reference_scenario", "run", "run_stage"]


def bundled_text() -> str:
    return resources.files(__package__).joinpath("data/seven_node.scn").read_text(encoding="utf-8")


def reference_scenario() -> Scenario:
    """The bundled seven-node scenario with destination 6."""
    return parse_topology(bundled_text())
