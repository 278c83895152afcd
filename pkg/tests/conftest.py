import json

import pytest

# small enough that a full run takes a few seconds
TINY_CONFIG = {
    "dtype": "float64",
    "data": {
        "video": {"height": 16, "width": 16, "n_frames_range": [24, 40], "anomaly_len_range": [8, 12]},
        "source_classes": 3,
        "source_per_class": 4,
        "n_normal": 12,
        "n_per_type": 6,
        "anomaly_types": ["jitter", "stop"],
    },
    "encoder": {"widths": [4, 4, 4], "feature_dim": 6},
    "pretrain": {"epochs": 2, "batch_size": 4},
    "dam": {"epochs": 2, "batch_size": 4, "bank_size": 4},
    "mcpm": {"d_graph": 6, "epochs": 3},
    "head": {"epochs": 5},
    "episodes": {"k_shots": 2, "q_queries": 3, "n_episodes": 4, "type_filters": ["all", "jitter"]},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Generated corpora shared by CLI tests that only read them."""
    from fsvad.cli import main

    root = tmp_path_factory.mktemp("tiny_data")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen-data", "--config", str(cfg), "--set", f"data.root={json.dumps(str(root / 'data'))}"]) == 0
    return cfg, root / "data"


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
