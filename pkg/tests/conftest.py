import os
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

os.environ.setdefault("SODA_CACHE_DIR", str(Path.home() / ".cache" / "soda"))
torch.set_num_threads(1)

settings.register_profile(
    "repo", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def fd_check(f, x: torch.Tensor, idx, h: float = 1e-5):
    """Central finite differences of scalar f at the flat coordinates idx."""
    out = []
    flat = x.data.view(-1)
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


@pytest.fixture
def fd():
    return fd_check
