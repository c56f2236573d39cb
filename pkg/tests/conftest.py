import json

import numpy as np
import pytest

from mudpt.config import from_dict
from mudpt.encoders import BackboneConfig, DualEncoder
from mudpt.runner import ensure_backbone

# Desk tuning settings pinned after the learning-rate sweep (see README).
DESK_SCHEDULE = {"learning_rate": 1e-4, "epochs": 10, "batch_size": 4, "max_steps": 300}


def desk_config_dict(out, **fields):
    doc = {"schema_version": 1, "protocol": "few_shot", "mode": ["mudpt"], "seed": 0,
           "shots": 16, "schedule": dict(DESK_SCHEDULE), "output": str(out)}
    doc.update(fields)
    return doc


@pytest.fixture(scope="session")
def backbone_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("backbone")


@pytest.fixture(scope="session")
def pretrained_config(backbone_dir):
    """Default desk config whose backbone checkpoint is shared by the whole session."""
    return from_dict(desk_config_dict(backbone_dir / "run",
                                      pretrain={"checkpoint": str(backbone_dir / "backbone.json")}))


@pytest.fixture(scope="session")
def pretrained_backbone(pretrained_config):
    return ensure_backbone(pretrained_config)


@pytest.fixture()
def fresh_backbone():
    return DualEncoder(BackboneConfig(), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
