import numpy as np
import pytest

from spatial_iml.datastore import synth_medsat


def small_synth(n=600, p=6, n_districts=12, seed=0, noise_sd=0.5, active=None, **kw):
    cfg = {
        "n": n, "p": p, "n_districts": n_districts, "rho": 0.2,
        "outcomes": {"o_y": {"active": active or {0: 2.0, 1: -1.0}, "noise_sd": noise_sd,
                             "intercept": 1.0}},
    }
    cfg.update(kw)
    return synth_medsat(cfg, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_small():
    return small_synth()


# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts survive output capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    def info(text: str) -> None:
        ACCEPTANCE_LINES.append(f"info {text}")
        print(f"info {text}")

    record.info = info
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
