import numpy as np
import pytest

from ctrlfl.data import generate_synthetic_domains, default_domain_specs
from ctrlfl.subword import train_bpe


def central_difference(f, arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numerical gradient of scalar f() w.r.t. arr, perturbing arr in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


@pytest.fixture(scope="session")
def small_corpora():
    specs = default_domain_specs(train_size=120, dev_size=20, test_size=20)
    return generate_synthetic_domains(specs, seed=0)


@pytest.fixture(scope="session")
def small_vocab(small_corpora):
    return train_bpe([x for c in small_corpora for p in c.train for x in p], 120)
