from __future__ import annotations

import os
import glob
import yaml
from typing import List

from pydantic import ValidationError

from lbsc.errors import ScenarioError
from .scenario import ScenarioConfig


DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data")
DEFAULT_SCENARIO = os.path.join(DATA_DIR, "ccc_scenario.yaml")


def load_scenario(scenario_path: str | None = None) -> ScenarioConfig:
    path = scenario_path or DEFAULT_SCENARIO
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ScenarioError(f"scenario {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioError(f"scenario {path} must be a key/value mapping")
    try:
        return ScenarioConfig(**data)
    except ValidationError as e:
        raise ScenarioError(f"invalid scenario {path}: {e}") from e


def list_scenarios() -> List[str]:
    pattern = os.path.join(DATA_DIR, "*.yaml")
    return sorted(glob.glob(pattern))


def list_log_files(logs_dir: str) -> List[str]:
    """Episode exports (csv or json) in a directory, sorted by name."""
    found = glob.glob(os.path.join(logs_dir, "*.csv")) + glob.glob(os.path.join(logs_dir, "*.json"))
    return sorted(found)
