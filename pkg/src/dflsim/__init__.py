"""Simulator for committee-run decentralized federated learning.

Nodes train sub-models, a small elected committee orders their requests with
PBFT, and a simulated state contract verifies transition proofs, keeps
pledges and pays incentives. Everything runs on a seeded virtual clock.
"""

from .scenario import ConfigError, RunResult, ScenarioConfig, load_config, parse_config, run_scenario, write_outputs

__all__ = ["ConfigError", "RunResult", "ScenarioConfig", "load_config", "parse_config", "run_scenario",
           "write_outputs"]
__version__ = "0.1.0"
