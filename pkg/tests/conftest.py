import numpy as np
import pytest

from gbm import kernels
from gbm.core import Dims, ModelParams, Run


def random_model(rng, Z, K, X, floor=0.0):
    n_perm = Dims(Z, K, X).num_permutations
    psi = rng.dirichlet(np.ones(X), size=(K, Z))
    if floor:
        psi = (1 - floor) * psi + floor / X
    return ModelParams(pi=rng.dirichlet(np.ones(Z)), omega=rng.dirichlet(np.ones(Z), size=Z),
                       psi=psi, xi=np.full(n_perm, 1.0 / n_perm))


def random_run(rng, T, K, X, missing_rate=0.0, hard=False, run_id="r0"):
    if hard:
        probs = np.zeros((T, K, X))
        cats = rng.integers(0, X, size=(T, K))
        probs[np.arange(T)[:, None], np.arange(K)[None, :], cats] = 1.0
    else:
        probs = rng.dirichlet(np.ones(X), size=(T, K))
    missing = rng.random((T, K)) < missing_rate
    probs[missing] = 0.0
    return Run(run_id, probs, missing)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


def separated_params(Z=3, K=3):
    """Sticky regimes; each channel emits from its own block of behaviours,
    and states differ within the block."""
    X = 2 * K
    psi = np.full((K, Z, X), 0.02)
    for k in range(K):
        for z in range(Z):
            psi[k, z, 2 * k + (z % 2)] = 0.9
            psi[k, z, (2 * k + 2 + z) % X] += 0.3 * (z >= 2)
    psi /= psi.sum(axis=2, keepdims=True)
    omega = np.full((Z, Z), 0.15 / (Z - 1)) + np.eye(Z) * (0.85 - 0.15 / (Z - 1))
    n_perm = Dims(Z, K, X).num_permutations
    return ModelParams(np.full(Z, 1 / Z), omega, psi, np.full(n_perm, 1 / n_perm))


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
