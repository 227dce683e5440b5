import pytest
import torch

from subswap.backend.toy import ToyDenoiser


@pytest.fixture
def backend():
    """Fresh toy denoiser (concept registrations must not leak across tests)."""
    return ToyDenoiser()


def stochastic_map(n_query: int, n_key: int, seed: int = 0) -> torch.Tensor:
    """Random row-stochastic map for building attention records."""
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(n_query, n_key, generator=g, dtype=torch.float64)
    return torch.softmax(logits, dim=-1)
