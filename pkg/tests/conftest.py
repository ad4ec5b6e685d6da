import time

import numpy as np
import pytest

from flowdenoise import cli, training
from flowdenoise.flow import FlowModel


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default three-stage training through the CLI (several minutes).

    Returns model paths, loaded models and loss reports keyed by stage.
    """
    root = tmp_path_factory.mktemp("trained")
    out = {"dir": root}
    prev = None
    start = time.perf_counter()
    for stage in training.STAGES:
        path = root / f"stage_{stage}.spcf"
        report = root / f"stage_{stage}.csv"
        argv = ["train", "--stage", stage, "--output", str(path), "--report", str(report), "--seed", "0"]
        if prev is not None:
            argv += ["--init", str(prev)]
        assert cli.main(argv) == 0
        out[stage] = FlowModel.load(path)
        out[f"path_{stage}"] = path
        out[f"losses_{stage}"] = np.loadtxt(report, delimiter=",", skiprows=1)[:, 1]
        prev = path
    out["seconds"] = time.perf_counter() - start
    return out


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
