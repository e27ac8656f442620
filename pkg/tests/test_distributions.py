import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grads_close, finite_diff_grad
from flowseg import distributions as dist


def test_softmax_uniform_for_zero_logits():
    probs = dist.softmax_k(torch.zeros(2, 5), k=2, d=5)
    assert torch.allclose(probs, torch.full((2, 5), 0.5))


def test_softmax_accepts_flat_layout():
    logits = torch.randn(3, 4 * 6, dtype=torch.float64)
    a = dist.softmax_k(logits, k=4, d=6)
    b = dist.softmax_k(logits.reshape(3, 4, 6), k=4, d=6)
    assert torch.equal(a, b)
    assert torch.allclose(a.sum(dim=-2), torch.ones(3, 6, dtype=torch.float64), atol=1e-12)


def test_softmax_shift_invariance():
    logits = torch.randn(3, 7, dtype=torch.float64)
    shifted = logits + torch.randn(1, 7, dtype=torch.float64)
    assert torch.allclose(
        dist.softmax_k(logits, 3, 7), dist.softmax_k(shifted, 3, 7), atol=1e-12
    )


def test_softmax_single_pixel_value():
    probs = dist.softmax_k(torch.tensor([[1.0], [0.0], [0.0]]), k=3, d=1)
    expected = torch.tensor([[0.5761], [0.2119], [0.2119]])
    assert torch.allclose(probs, expected, atol=1e-4)


def test_softmax_rejects_bad_shape():
    with pytest.raises(ValueError):
        dist.softmax_k(torch.zeros(5), k=2, d=3)


def test_categorical_ll_uniform_predictive():
    k, d = 3, 11
    y = torch.eye(k)[torch.randint(0, k, (d,))].T
    ll = dist.categorical_log_likelihood(y, torch.zeros(k, d))
    assert ll.item() == pytest.approx(-d * math.log(k), rel=1e-6)


def test_categorical_ll_saturates_with_large_margin():
    k, d = 2, 9
    labels = torch.randint(0, k, (d,))
    y = torch.eye(k)[labels].T
    logits = 30.0 * (y - 0.5) * 2.0
    ll = dist.categorical_log_likelihood(y, logits)
    assert ll.item() >= -d * 1e-9


def test_categorical_ll_scalar_value():
    y = torch.tensor([[1.0], [0.0]])
    logits = torch.tensor([[1.0], [0.0]])
    ll = dist.categorical_log_likelihood(y, logits)
    assert ll.item() == pytest.approx(math.log(0.7311), abs=1e-4)


def test_categorical_ll_shift_invariance_exact():
    k, d = 4, 13
    y = torch.eye(k, dtype=torch.float64)[torch.randint(0, k, (d,))].T
    logits = torch.randn(k, d, dtype=torch.float64)
    shifted = logits + torch.randn(1, d, dtype=torch.float64)
    a = dist.categorical_log_likelihood(y, logits)
    b = dist.categorical_log_likelihood(y, shifted)
    assert abs((a - b).item()) < 1e-12


def test_categorical_ll_shape_mismatch():
    with pytest.raises(ValueError):
        dist.categorical_log_likelihood(torch.zeros(2, 4), torch.zeros(2, 5))


def test_categorical_ll_broadcasts_over_samples():
    k, d, m = 2, 6, 5
    y = torch.eye(k)[torch.randint(0, k, (d,))].T
    logits = torch.randn(m, k, d)
    out = dist.categorical_log_likelihood(y, logits)
    assert out.shape == (m,)
    assert torch.all(out <= 0)


def test_diag_sample_at_scale_floor_collapses_to_mean(torch_gen):
    mean = torch.randn(6)
    field = dist.DiagGaussianField(mean, torch.full((6,), -60.0))
    samples = dist.diag_sample(field, torch_gen, 1000)
    assert (samples - mean).abs().max().item() < 1e-3


def test_diag_sample_determinism():
    field = dist.DiagGaussianField(torch.zeros(4), torch.zeros(4))
    g1 = torch.Generator().manual_seed(42)
    g2 = torch.Generator().manual_seed(42)
    assert torch.equal(dist.diag_sample(field, g1, 8), dist.diag_sample(field, g2, 8))


@pytest.mark.slow
def test_diag_sample_covariance_matches_identity(torch_gen):
    field = dist.DiagGaussianField(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    samples = dist.diag_sample(field, torch_gen, 1_000_000).numpy()
    cov = np.cov(samples.T)
    assert np.linalg.norm(cov - np.eye(4)) / np.linalg.norm(np.eye(4)) < 0.01


def test_diag_entropy_standard_normal():
    n = 7
    field = dist.DiagGaussianField(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    assert dist.diag_entropy(field).item() == pytest.approx(0.5 * n * math.log(2 * math.pi * math.e), rel=1e-12)


def test_diag_entropy_doubling_scales():
    n = 5
    base = dist.DiagGaussianField(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    doubled = dist.DiagGaussianField(torch.zeros(n, dtype=torch.float64), torch.full((n,), math.log(2.0), dtype=torch.float64))
    gap = (dist.diag_entropy(doubled) - dist.diag_entropy(base)).item()
    assert gap == pytest.approx(n * math.log(2.0), abs=1e-12)


def test_diag_entropy_closed_form_mixed_scales():
    scales = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64)
    field = dist.DiagGaussianField(torch.zeros(3, dtype=torch.float64), scales.log())
    expected = 1.5 * math.log(2 * math.pi * math.e) + math.log(8.0)
    assert abs(dist.diag_entropy(field).item() - expected) < 1e-10


def test_diag_log_prob_matches_scipy():
    from scipy import stats

    mean = torch.randn(5, dtype=torch.float64)
    log_scale = torch.randn(5, dtype=torch.float64) * 0.3
    field = dist.DiagGaussianField(mean, log_scale)
    x = torch.randn(3, 5, dtype=torch.float64)
    expected = stats.norm.logpdf(x.numpy(), mean.numpy(), field.scale.numpy()).sum(axis=1)
    assert np.allclose(field.log_prob(x).numpy(), expected, atol=1e-12)


def test_lowrank_spec_validation():
    with pytest.raises(ValueError):
        dist.LowRankGaussianSpec(torch.zeros(4), torch.zeros(4), torch.zeros(4, 2))
    with pytest.raises(ValueError):
        dist.LowRankGaussianSpec(torch.zeros(4), torch.ones(4), torch.zeros(3, 2))


@pytest.mark.slow
def test_lowrank_standard_normal_limit(torch_gen):
    n = 4
    spec = dist.LowRankGaussianSpec(
        torch.zeros(n, dtype=torch.float64),
        torch.ones(n, dtype=torch.float64),
        torch.zeros(n, 1, dtype=torch.float64),
    )
    samples = dist.lowrank_sample(spec, torch_gen, 1_000_000).numpy()
    cov = np.cov(samples.T)
    assert np.linalg.norm(cov - np.eye(n)) / np.linalg.norm(np.eye(n)) < 0.01


@pytest.mark.parametrize("floor", [0.5, 0.1, 0.01])
def test_lowrank_correlation_approaches_one(torch_gen, floor):
    spec = dist.LowRankGaussianSpec(
        torch.zeros(2, dtype=torch.float64),
        torch.full((2,), floor, dtype=torch.float64),
        torch.ones(2, 1, dtype=torch.float64),
    )
    samples = dist.lowrank_sample(spec, torch_gen, 200_000).numpy()
    corr = np.corrcoef(samples.T)[0, 1]
    assert corr == pytest.approx(1.0 / (1.0 + floor), abs=0.01)


def test_lowrank_mean_translation(torch_gen):
    c = 3.7
    spec = dist.LowRankGaussianSpec(
        torch.full((6,), c, dtype=torch.float64),
        torch.full((6,), 0.01, dtype=torch.float64),
        torch.zeros(6, 1, dtype=torch.float64),
    )
    samples = dist.lowrank_sample(spec, torch_gen, 50_000)
    assert samples.mean().item() == pytest.approx(c, abs=0.01)


@pytest.mark.slow
def test_lowrank_covariance_converges_at_mc_rate():
    n, r = 6, 2
    g = torch.Generator().manual_seed(1)
    factors = torch.randn(n, r, generator=g, dtype=torch.float64)
    spec = dist.LowRankGaussianSpec(
        torch.zeros(n, dtype=torch.float64), torch.full((n,), 0.5, dtype=torch.float64), factors
    )
    target = spec.covariance().numpy()

    def err(n_samples, seed):
        gen = torch.Generator().manual_seed(seed)
        s = dist.lowrank_sample(spec, gen, n_samples).numpy()
        return np.linalg.norm(np.cov(s.T) - target)

    small = np.mean([err(62_500, s) for s in range(5)])
    large = np.mean([err(250_000, s + 10) for s in range(5)])
    assert 1.5 <= small / large <= 2.7


def test_reparameterised_gradients_match_finite_differences():
    torch.manual_seed(0)
    n, r, m = 5, 2, 64
    mean = torch.randn(n, dtype=torch.float64, requires_grad=True)
    log_scale = (torch.randn(n, dtype=torch.float64) * 0.2).requires_grad_()
    diag_raw = (torch.rand(n, dtype=torch.float64) * 0.5 + 0.5).requires_grad_()
    factors = (torch.randn(n, r, dtype=torch.float64) * 0.7).requires_grad_()
    weights = torch.randn(n, dtype=torch.float64)

    def loss_fn():
        gen = torch.Generator().manual_seed(77)
        field = dist.DiagGaussianField(mean, log_scale)
        diag_part = dist.diag_sample(field, gen, m)
        spec = dist.LowRankGaussianSpec(mean.detach() * 0.0, diag_raw, factors)
        low_part = dist.lowrank_sample(spec, gen, m)
        return ((diag_part + low_part).sin() * weights).mean()

    loss = loss_fn()
    analytic = torch.autograd.grad(loss, [mean, log_scale, diag_raw, factors])
    numeric = finite_diff_grad(loss_fn, [mean, log_scale, diag_raw, factors])
    assert_grads_close(analytic, numeric, rel_tol=1e-4)


def test_diag_kl_closed_form_against_scipy_formula():
    p = dist.DiagGaussianField(torch.tensor([0.3, -0.2], dtype=torch.float64), torch.tensor([0.1, -0.3], dtype=torch.float64))
    q = dist.DiagGaussianField(torch.tensor([0.0, 0.1], dtype=torch.float64), torch.tensor([0.0, 0.2], dtype=torch.float64))
    sp, sq = p.scale.numpy(), q.scale.numpy()
    mp, mq = p.mean.numpy(), q.mean.numpy()
    expected = np.sum(np.log(sq / sp) + (sp**2 + (mp - mq) ** 2) / (2 * sq**2) - 0.5)
    assert dist.diag_kl(p, q).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-20, 20))
def test_softmax_shift_invariance_property(values, shift):
    logits = torch.tensor(values, dtype=torch.float64).reshape(-1, 1)
    a = dist.softmax_k(logits, logits.shape[0], 1)
    b = dist.softmax_k(logits + shift, logits.shape[0], 1)
    assert torch.allclose(a, b, atol=1e-12)
