import numpy as np
import pytest

from lngt import datagen, noise


@pytest.fixture(scope="session")
def small_rings():
    """A quick corrupted rings problem: 100 per class, symmetric 40% flips."""
    train = datagen.make_rings(100, 0.05, seed=5, nuisance_dims=8, nuisance_std=0.05)
    test = datagen.make_rings(100, 0.05, seed=1005, nuisance_dims=8, nuisance_std=0.05)
    return noise.apply_label_noise(train, noise.build_symmetric(2, 0.4), seed=5), test


def param_fd(model, loss_of_model, h=1e-5):
    """Central differences of a scalar function of the model, in ``params`` order."""
    out = []
    for prm in model.params:
        g = np.zeros_like(prm)
        it = np.nditer(prm, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = prm[i]
            prm[i] = old + h
            up = loss_of_model(model)
            prm[i] = old - h
            dn = loss_of_model(model)
            prm[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_err(a_list, b_list):
    a = np.concatenate([np.ravel(x) for x in a_list])
    b = np.concatenate([np.ravel(x) for x in b_list])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
