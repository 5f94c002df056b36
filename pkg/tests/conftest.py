"""Shared fixtures.

The expensive artifacts — a pretrained backbone and a fully trained desk-scale
model — are built once per session and reused by the training tests and the
acceptance suite.
"""

from __future__ import annotations

import time
from types import SimpleNamespace

import pytest

from diffvos import config as config_mod
from diffvos.reporting import read_csv
from diffvos.train import make_dataset, train_backbone

# one "[PASS]/[FAIL] <criterion>" line per acceptance check, echoed after the
# test summary so a tee'd pytest run doubles as the acceptance report
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def quick_cfg():
    return config_mod.preset("quick")


@pytest.fixture(scope="session")
def quick_data(quick_cfg):
    return SimpleNamespace(
        train=make_dataset(quick_cfg, "train"),
        eval=make_dataset(quick_cfg, "eval"),
    )


@pytest.fixture(scope="session")
def quick_backbone(quick_cfg, quick_data):
    """Codec + generator pretrained once on the quick preset."""
    t0 = time.time()
    codec_state, gen_states, history, log = train_backbone(quick_cfg, quick_data.train)
    return SimpleNamespace(
        codec_state=codec_state,
        gen_states=gen_states,
        codec_history=history,
        generator_log=log,
        seconds=time.time() - t0,
    )


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full default-preset pipeline: pretraining, referring training, eval."""
    from diffvos import cli

    cfg = config_mod.preset("desk")
    run = cli.prepare_run_dir(tmp_path_factory.mktemp("desk"), "train", cfg)
    t0 = time.time()
    model, result = cli.run_train(cfg, run)
    seconds = time.time() - t0
    _, _, rows = read_csv(run / "pretrain_summary.csv")
    pretrain_summary = {key: float(value) for key, value in rows}
    return SimpleNamespace(
        cfg=cfg,
        run=run,
        model=model,
        result=result,
        seconds=seconds,
        pretrain_summary=pretrain_summary,
    )


@pytest.fixture(scope="session")
def quick_ablate(quick_cfg, tmp_path_factory):
    """Ablation grids on the quick preset (component/fusion/step/temporal)."""
    from diffvos import cli

    run = cli.prepare_run_dir(tmp_path_factory.mktemp("ablate"), "ablate", quick_cfg)
    t0 = time.time()
    tables = cli.run_ablate(quick_cfg, run)
    return SimpleNamespace(cfg=quick_cfg, run=run, tables=tables, seconds=time.time() - t0)
