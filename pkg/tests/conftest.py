"""Shared fixtures: a small deterministic corpus, encoder, and source model."""

import re

import numpy as np
import pytest
import torch

from laden import data, synth
from laden.encoder import make_toy_encoder
from laden.model import AmConfig, AmModel, save_checkpoint, train_source

torch.set_num_threads(max(torch.get_num_threads(), 1))


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("laden_ws")


@pytest.fixture(scope="session")
def source_manifest(workspace):
    """10 labeled source utterances (1-2 s) with train-range SNR mixing."""
    clean_dir, noise_dir = synth.synth_corpus(
        workspace / "source_corpus", n_utts=10, seed=7, profile="source", duration_range=(1.0, 2.0)
    )
    path = workspace / "source_train.jsonl"
    records = data.build_manifest(clean_dir, noise_dir, (-2.5, 17.5), seed=1, split="train", out_path=path)
    return path, records


@pytest.fixture(scope="session")
def target_manifest(workspace):
    """8 shifted-noise target utterances for streaming tests."""
    clean_dir, noise_dir = synth.synth_corpus(
        workspace / "target_corpus", n_utts=8, seed=11, profile="shifted_noise", duration_range=(1.0, 2.0)
    )
    path = workspace / "target_test.jsonl"
    records = data.build_manifest(clean_dir, noise_dir, (0.0, 15.0), seed=2, split="test", out_path=path)
    return path, records


@pytest.fixture(scope="session")
def toy_encoder():
    return make_toy_encoder(seed=3, dim=32)


TINY_CONFIG = AmConfig(n_blocks=1, hidden_dim=32, attention_heads=2)


@pytest.fixture(scope="session")
def source_checkpoint(workspace, source_manifest):
    """A briefly trained tiny source model, shared by the adaptation tests."""
    _, records = source_manifest
    torch.manual_seed(0)
    model = AmModel(TINY_CONFIG)
    train_source(model, records, epochs=2, lr=1e-3, seed=0)
    path = workspace / "source_tiny.ckpt"
    save_checkpoint(model, path, extra_meta={"role": "source"})
    return path


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


_ACCEPTANCE_OUTCOMES: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid:
        match = re.search(r"test_c(\d+)_(\w+)", report.nodeid)
        if match:
            key = f"criterion {int(match.group(1)):2d} ({match.group(2)})"
            if report.when == "call":
                _ACCEPTANCE_OUTCOMES[key] = "PASS" if report.passed else "FAIL"
            elif report.when == "setup" and report.skipped:
                _ACCEPTANCE_OUTCOMES[key] = "SKIP"
            elif report.when == "setup" and report.failed:
                _ACCEPTANCE_OUTCOMES[key] = "FAIL (setup)"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_OUTCOMES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE_OUTCOMES):
            terminalreporter.write_line(f"{key}: {_ACCEPTANCE_OUTCOMES[key]}")
