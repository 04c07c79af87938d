import math

import numpy as np
import pytest
import torch

from snsr.field import FieldConfig, HashGridConfig, ScaleField


def mini_config(**kw) -> FieldConfig:
    """Miniature field: 2 hash levels sharing a 16-entry table, hidden width 8."""
    cfg = FieldConfig(
        hash=HashGridConfig(n_levels=2, features_per_level=2, log2_table_size=4, base_resolution=2,
                            finest_resolution=4),
        plane_resolution=6, scale_resolution=4, plane_features=2, hidden=8, s_min=1e-3, s_max=1e-2,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def randomized(field: ScaleField, seed: int = 0, std: float = 0.3) -> ScaleField:
    """Fill every parameter with random values (away from the init's special structure)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in field.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
        field.log_sharpness.fill_(math.log(8.0))
    return field


def random_scales(n, field, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    lo, hi = math.log(field.triplane.s_min), math.log(field.triplane.s_max)
    return torch.exp(lo + (hi - lo) * torch.rand(n, generator=g, dtype=dtype))


@pytest.fixture
def mini_field():
    return randomized(ScaleField(mini_config()).double())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
