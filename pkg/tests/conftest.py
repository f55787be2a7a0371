import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("tct", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tct")

FROZEN = Path(__file__).parent / "oracles" / "frozen.json"


@pytest.fixture(scope="session")
def frozen() -> dict:
    return json.loads(FROZEN.read_text(encoding="utf-8"))
