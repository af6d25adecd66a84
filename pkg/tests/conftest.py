"""Shared fixtures and the acceptance-criterion result reporter."""

from __future__ import annotations

import contextlib
import os
import sys

import numpy as np
import pytest

_CRITERION_RESULTS: dict[int, tuple[bool, str]] = {}

# --- hidden-truth access auditing ---------------------------------------
# The dataset's _truth sidecar exists for tests only.  A process-wide audit
# hook records any file access under a _truth directory while watching is
# enabled, so pipeline tests can prove the stages never read it.

_TRUTH_WATCH = {"on": False, "hits": []}


def _audit(event, args):
    if not _TRUTH_WATCH["on"]:
        return
    if event in ("open", "os.open") and args:
        p = args[0]
        if isinstance(p, (str, bytes, os.PathLike)) and "_truth" in str(p):
            _TRUTH_WATCH["hits"].append((event, str(p)))


sys.addaudithook(_audit)


@contextlib.contextmanager
def watch_truth_access():
    """Collect _truth file accesses made inside the block."""
    _TRUTH_WATCH["hits"].clear()
    _TRUTH_WATCH["on"] = True
    try:
        yield _TRUTH_WATCH["hits"]
    finally:
        _TRUTH_WATCH["on"] = False


# --- shared smoke pipeline run -------------------------------------------

def smoke_config(out: str) -> dict:
    """Small end-to-end config: 2 level-1 instances, 5 epochs."""
    return {
        "schema_version": 1,
        "seed": 0,
        "out": out,
        "camera": {"distance": 6.0, "focal": 210.0,
                   "image_w": 128, "image_h": 128, "stride": 8},
        "dataset": {"train_instances": 2, "level": 1,
                    "test_specs": [[22.5, 7.5], [-37.5, -22.5], [52.5, 37.5]]},
        "train": {"d": 32, "level": 1, "epochs": 5,
                  "bank_size": 64, "bg_samples": 32},
        "infer": {"grid": [6, 2, 1], "steps": 15, "step_size": 2.0,
                  "anchor": None},
    }


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Two completed cmd_run outputs of the same config in different
    directories.  The first run's train/merge/infer/eval stages execute
    under the _truth audit; gen runs beforehand so its sidecar write is
    not counted.  Returns (out_a, out_b, truth_hits)."""
    from meshpose.pipeline import (cmd_gen, cmd_run, default_config,
                                   _merge_dicts)
    out_a = tmp_path_factory.mktemp("smoke") / "a"
    out_b = tmp_path_factory.mktemp("smoke") / "b"
    cfg_a = _merge_dicts(default_config(), smoke_config(str(out_a)))
    cfg_b = _merge_dicts(default_config(), smoke_config(str(out_b)))
    cmd_gen(cfg_a)
    with watch_truth_access() as hits:
        cmd_run(cfg_a)
    cmd_run(cfg_b)
    return out_a, out_b, list(hits)


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store one acceptance-criterion verdict for the end-of-run table."""
    _CRITERION_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERION_RESULTS):
        passed, detail = _CRITERION_RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        tr.write_line(f"[criterion {number:2d}] {verdict}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix, det fixed."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q
