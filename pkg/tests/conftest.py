from __future__ import annotations

import numpy as np
import pytest
import torch

from oneshot_landmarks.augment import AffineAugParams
from oneshot_landmarks.ingest import SynthConfig, generate_synthetic
from oneshot_landmarks.network import AdapterBank, TinyBackbone
from oneshot_landmarks.ssl import CascadeConfig
from oneshot_landmarks.trainer import TrainConfig

TINY_BACKBONE = (4, 4, 8, 8, 8)


def tiny_bank(landmark_ids=(1,), C_A=4, E=8, seed=0, dtype=torch.float32, decoder=(4, 8, 8, 8), rfb=8):
    torch.manual_seed(seed)
    bank = AdapterBank(TinyBackbone(TINY_BACKBONE, seed=seed), landmark_ids, C_A, decoder, rfb, None, E)
    return bank.to(dtype)


def tiny_config(**kw) -> TrainConfig:
    base = dict(mode="sla_atd", K=2, epochs=1, batch_size=4, learning_rate=1e-3, input_size=64, patch_size=32,
                C_A=4, E=8, decoder_channels=(4, 8, 8, 8), rfb_channels=8, template_aug_n=4,
                ssl=CascadeConfig(), aug=AffineAugParams(),
                backbone={"type": "tiny", "channels": list(TINY_BACKBONE), "seed": 0})
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(SynthConfig(n_train=6, n_test=3, image_size=64, K=2, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
