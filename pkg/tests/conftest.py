import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def f64():
    """Run a test in 64-bit precision."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
