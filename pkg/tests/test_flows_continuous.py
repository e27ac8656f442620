import math

import pytest
import torch

from conftest import assert_grads_close, finite_diff_grad
from flowseg import flows_continuous as fc
from flowseg import networks as nw


class ConstantExpectationNet(nw.FlowImageNetwork):
    """Ignores all inputs and emits fixed logits."""

    def __init__(self, logits):
        super().__init__(nw.FlowNetworkSpec(classes=logits.shape[0]))
        self.register_buffer("fixed", logits)

    def forward(self, y_t, t, x=None):
        return self.fixed.expand(y_t.shape[0], *self.fixed.shape).to(y_t.dtype)


class NoiseNet(nw.FlowImageNetwork):
    """Fresh noise on every call: the local error estimate can never shrink,
    so adaptive step control collapses to the underflow guard."""

    def __init__(self, classes=2):
        super().__init__(nw.FlowNetworkSpec(classes=classes))
        self.calls = 0

    def forward(self, y_t, t, x=None):
        self.calls += 1
        g = torch.Generator().manual_seed(self.calls)
        return 50.0 * torch.randn(y_t.shape, generator=g, dtype=y_t.dtype)


def randomized_flow_net(seed=0, classes=2, cond=0):
    torch.manual_seed(seed)
    net = nw.FlowImageNetwork(nw.FlowNetworkSpec(classes=classes, cond_channels=cond))
    with torch.no_grad():
        net.net.out_conv.weight.normal_(0, 0.4)
        net.net.out_conv.bias.normal_(0, 0.4)
    return net


def test_interpolate_endpoints_exact():
    u = torch.randn(2, 3, 3)
    y = torch.randint(0, 2, (2, 3, 3)).float()
    assert torch.equal(fc.interpolate(u, y, 0.0).y_t, u)
    assert torch.equal(fc.interpolate(u, y, 1.0).y_t, y)


def test_interpolate_midpoint():
    u = torch.zeros(2, 2, 2)
    y = torch.ones(2, 2, 2)
    pt = fc.interpolate(u, y, 0.5)
    assert torch.equal(pt.y_t, torch.full((2, 2, 2), 0.5))
    assert pt.u is u


def test_interpolate_validates_inputs():
    u = torch.zeros(2, 2, 2)
    with pytest.raises(ValueError):
        fc.interpolate(u, torch.zeros(2, 2, 3), 0.5)
    with pytest.raises(ValueError):
        fc.interpolate(u, u, 1.5)
    with pytest.raises(ValueError):
        fc.interpolate(u, u, -0.01)


def test_velocity_fixed_point_and_shapes():
    u = torch.randn(1, 2, 4, 4)
    assert torch.equal(fc.velocity(u, u), torch.zeros_like(u))
    with pytest.raises(ValueError):
        fc.velocity(torch.randn(1, 2, 4, 4), torch.randn(1, 2, 4, 5))


def test_predict_expectation_uniform_for_zero_head():
    net = nw.FlowImageNetwork(nw.FlowNetworkSpec(classes=2))
    exp = fc.predict_expectation(torch.randn(3, 2, 8, 8), 0.2, None, net)
    assert torch.allclose(exp, torch.full((3, 2, 8, 8), 0.5))
    assert torch.allclose(exp.sum(dim=1), torch.ones(3, 8, 8), atol=1e-6)


def test_predict_expectation_gradient_matches_finite_differences():
    net = randomized_flow_net(seed=5).double()
    y_t = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def loss_fn():
        return (fc.predict_expectation(y_t, 0.4, None, net) * weights).sum()

    analytic = torch.autograd.grad(loss_fn(), [y_t])
    numeric = finite_diff_grad(loss_fn, [y_t])
    assert_grads_close(analytic, numeric, rel_tol=1e-4)


@pytest.mark.parametrize("steps", [1, 3, 10, 50])
def test_euler_reaches_constant_target_exactly(steps):
    # Constant drift toward a fixed expectation telescopes to the target for
    # every step count; in float64 only roundoff of order steps*eps remains.
    torch.manual_seed(0)
    logits = torch.randn(2, 4, 4, dtype=torch.float64)
    net = ConstantExpectationNet(logits).double()
    target = torch.softmax(logits, dim=0)
    u = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    result = fc.integrate(u, None, net, fc.SolverConfig("euler", steps=steps))
    assert (result.final_state - target).abs().max().item() < 1e-12
    assert result.nfe == steps + 1
    single = fc.integrate(u.float(), None, net.float(), fc.SolverConfig("euler", steps=steps))
    assert (single.final_state - target.float()).abs().max().item() < 1e-5


def test_single_step_euler_is_one_velocity_update():
    net = randomized_flow_net(seed=2)
    u = torch.randn(2, 2, 8, 8)
    result = fc.integrate(u, None, net, fc.SolverConfig("euler", steps=1))
    with torch.no_grad():
        expected = u + fc.velocity(fc.predict_expectation(u, 0.0, None, net), u)
    assert torch.allclose(result.final_state, expected, atol=1e-7)


def test_adaptive_reaches_constant_target():
    torch.manual_seed(1)
    logits = torch.randn(2, 4, 4)
    net = ConstantExpectationNet(logits)
    target = torch.softmax(logits, dim=0)
    u = torch.randn(2, 2, 4, 4)
    result = fc.integrate(u, None, net, fc.SolverConfig("dopri5", atol=1e-6, rtol=1e-6))
    assert (result.final_state - target).abs().max().item() < 1e-6


def test_euler_first_order_convergence():
    net = randomized_flow_net(seed=3)
    u = torch.randn(2, 2, 8, 8)

    def solve(steps):
        return fc.integrate(u, None, net, fc.SolverConfig("euler", steps=steps)).final_state

    diffs = []
    for t_steps in (5, 10, 20, 40):
        diffs.append((solve(t_steps) - solve(2 * t_steps)).abs().max().item())
    # First-order behaviour: successive differences shrink, allowing one
    # non-monotone pair as noise.
    violations = sum(1 for a, b in zip(diffs, diffs[1:]) if b >= a)
    assert violations <= 1, diffs


def test_adaptive_agrees_with_fine_euler():
    net = randomized_flow_net(seed=4)
    u = torch.randn(2, 2, 8, 8)
    euler = fc.integrate(u, None, net, fc.SolverConfig("euler", steps=250)).final_state
    dopri = fc.integrate(u, None, net, fc.SolverConfig("dopri5", atol=1e-6, rtol=1e-6)).final_state
    assert (euler - dopri).abs().max().item() < 1e-2


def test_integration_determinism():
    net = randomized_flow_net(seed=6)
    u = torch.randn(1, 2, 8, 8)
    cfg = fc.SolverConfig("dopri5", atol=1e-6, rtol=1e-6)
    a = fc.integrate(u, None, net, cfg)
    b = fc.integrate(u, None, net, cfg)
    assert torch.equal(a.final_state, b.final_state)
    assert a.nfe == b.nfe


def test_labels_are_argmax_of_final_expectation():
    net = randomized_flow_net(seed=7)
    u = torch.randn(2, 2, 8, 8)
    result = fc.integrate(u, None, net, fc.SolverConfig("euler", steps=10))
    assert torch.equal(result.labels, result.expectation.argmax(dim=1))
    assert result.labels.shape == (2, 8, 8)


def test_adaptive_step_underflow_reported():
    # Noise-driven dynamics have O(h) local error, so a tolerance below the
    # minimum step forces the controller into the underflow guard.
    net = NoiseNet()
    u = torch.randn(1, 2, 4, 4)
    with pytest.raises(fc.StepSizeUnderflow):
        fc.integrate(u, None, net, fc.SolverConfig("dopri5", atol=1e-14, rtol=1e-14))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        fc.SolverConfig("rk4")
    with pytest.raises(ValueError):
        fc.SolverConfig("euler", steps=0)
    with pytest.raises(ValueError):
        fc.SolverConfig("dopri5", atol=0.0)


def test_sample_labels_shapes_conditional():
    from flowseg.distributions import DiagGaussianField

    net = randomized_flow_net(seed=8, cond=1)
    base = DiagGaussianField(torch.zeros(3, 2, 8, 8), torch.zeros(3, 2, 8, 8), event_ndim=3)
    x = torch.randn(3, 1, 8, 8)
    g = torch.Generator().manual_seed(0)
    result = fc.sample_labels(base, x, net, fc.SolverConfig("euler", steps=5), g, m=4)
    assert result.labels.shape == (12, 8, 8)
