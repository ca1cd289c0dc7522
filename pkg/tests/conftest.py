import numpy as np
import pytest
import torch

from dlh.moving_ball import MovingBallConfig, generate_sequence
from dlh.networks import HierarchyModel, ModelConfig

torch.set_num_threads(1)

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    """Collect acceptance-criterion verdicts for the end-of-run summary."""
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)


def micro_config(num_levels: int = 2, **overrides) -> ModelConfig:
    """Small 16x16 model for fast structural tests."""
    kwargs = dict(
        num_levels=num_levels,
        latent_dim=4,
        det_dim=24,
        frame_shape=(16, 16, 3),
        conv_channels=(4, 8),
        enc_hidden=24,
        dec_hidden=24,
        factor_hidden=16,
        head_hidden=(16, 16),
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def micro_model(num_levels: int = 2, seed: int = 0, **overrides) -> HierarchyModel:
    torch.manual_seed(seed)
    return HierarchyModel(micro_config(num_levels, **overrides))


def micro_frames(batch: int = 3, length: int = 6, seed: int = 0) -> np.ndarray:
    cfg = MovingBallConfig(
        frame_size=16, ball_radius=3, sequence_length=length, seed=seed
    )
    out = np.zeros((batch, length, 16, 16, 3), dtype=np.float32)
    for b in range(batch):
        out[b], _ = generate_sequence(cfg, b)
    return out


@pytest.fixture
def model2():
    return micro_model(2)


@pytest.fixture
def model4():
    return micro_model(4)
