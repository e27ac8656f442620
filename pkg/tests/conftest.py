import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def finite_diff_grad(loss_fn, params, step=1e-3):
    """Central-difference gradients of a scalar loss w.r.t. a list of tensors.

    `loss_fn()` must read the current values of `params` (it is re-invoked
    after in-place perturbations), so any sampling inside it has to be
    re-seeded per call.  Returns one gradient tensor per parameter.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rel_tol=1e-4):
    """Norm-wise relative error per parameter tensor.

    Central differences carry O(step^2) truncation on every element, so
    per-element ratios against near-zero entries measure truncation rather
    than correctness; the l2-relative error is the meaningful check.
    """
    for a, n in zip(analytic, numeric):
        err = ((a - n).norm() / n.norm().clamp_min(1e-12)).item()
        assert err < rel_tol, f"gradient mismatch: relative error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def torch_gen():
    g = torch.Generator()
    g.manual_seed(0)
    return g
