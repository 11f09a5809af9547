"""Shared fixtures: the cached toy training run and the acceptance summary."""
from __future__ import annotations

import hashlib
import json
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

_acceptance: dict = {}
_details: dict = {}


def pytest_addoption(parser):
    parser.addoption("--retrain-toy", action="store_true", help="ignore the cached toy training run")


def _toy_key() -> str:
    h = hashlib.sha256()
    h.update(TOY_CONFIG.read_bytes())
    for src in sorted((ROOT / "src" / "sphere_encoder").glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    h.update(torch.__version__.encode())
    h.update(np.__version__.encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def toy_run(request):
    """The shipped toy recipe trained once through the CLI.

    The run directory is cached under pytest's cache, keyed by the config and the
    package sources, so unchanged code reuses it. The recorded wall-clock
    training time is that of the run that produced the checkpoint.
    """
    from sphere_encoder import config as run_config
    from sphere_encoder.checkpoint import load_checkpoint
    from sphere_encoder.cli import main
    from sphere_encoder.data import load_dataset
    from sphere_encoder.network import SphereAutoencoder

    base = Path(request.config.cache.mkdir("toy_run"))
    out = base / _toy_key()
    meta_path = out / "run.json"
    if request.config.getoption("--retrain-toy") or not meta_path.exists():
        shutil.rmtree(out, ignore_errors=True)
        start = time.perf_counter()
        code = main(["train", "--config", str(TOY_CONFIG), "--output-dir", str(out)])
        elapsed = time.perf_counter() - start
        assert code == 0, "toy training failed"
        meta_path.write_text(json.dumps({"train_seconds": elapsed}))
    meta = json.loads(meta_path.read_text())

    cfg = run_config.load_config(out / "config.resolved.yaml")
    data = load_dataset(cfg.data)
    train, holdout = data.split(cfg.holdout_fraction, np.random.default_rng(cfg.data.seed))
    ckpt = load_checkpoint(out / "last.npz")
    return SimpleNamespace(
        out=out,
        checkpoint=out / "last.npz",
        config=cfg,
        model=ckpt.model.eval(),
        untrained=SphereAutoencoder(cfg.model, seed=cfg.train.seed).eval(),
        train=train,
        holdout=holdout,
        sigma_max=cfg.noise.sigma_max,
        steps=ckpt.step,
        train_seconds=meta["train_seconds"],
    )


# -- acceptance reporting ----------------------------------------------------


@pytest.fixture
def record(request):
    """``record(text)`` attaches a measurement line to the acceptance summary."""
    lines = _details.setdefault(request.node.name, [])
    return lines.append


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        status = "PASS" if _acceptance[name] == "passed" else "FAIL"
        number, _, label = name[len("test_criterion_"):].partition("_")
        terminalreporter.write_line(f"criterion {number}: {status}  {label.replace('_', ' ')}")
        for line in _details.get(name, []):
            terminalreporter.write_line(f"    {line}")
