from __future__ import annotations

import numpy as np
import pytest

from voxedit.dataset import DescriptorVocab, SyntheticSpec, generate_synthetic
from voxedit.trainer import Checkpoint, Model, TrainConfig, train, zero_moments


@pytest.fixture(scope="session")
def small_corpus():
    """(store, tuples, vocab, truth) for a 6+6 speaker, V=4, D=12 corpus."""
    spec = SyntheticSpec(num_speakers_per_gender=6, num_descriptors=4, dim=12, utterances_per_speaker=3,
                         threshold=1.0, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_ckpt(small_corpus):
    store, tuples, vocab, _ = small_corpus
    cfg = TrainConfig(M=8, N=3, steps=40, batch_size=8, lr=1e-2, tau=3.0, seed=5)
    return train(cfg, store, tuples, vocab)


def random_checkpoint(rng, D=6, M=5, N=3, V=3, mode="full", tau=2.0) -> Checkpoint:
    """Untrained checkpoint with random parameters, for pure editing tests."""
    cfg = TrainConfig(D=D, M=M, N=N, V=V, H=D, mode=mode, tau=tau)
    model = Model.init(cfg, rng)
    vocab = DescriptorVocab(("Bright", "Low", "Hoarse", "Soft", "Magnetic", "Coarse")[:V])
    return Checkpoint(cfg, model, vocab, zero_moments(model.flat()), 0, [],
                      np.random.PCG64(0).state)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
