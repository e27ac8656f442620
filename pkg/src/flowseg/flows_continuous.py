"""Continuous-time flow over label fields.

Sampling starts from the learned base distribution and integrates
d y_t = (E[y | y_t] - u) dt from t=0 to t=1, where the expectation is the
softmax of a small time-conditioned network and u is the base sample drawn
once and retained for the whole solve.  Training never simulates the ODE;
it maximises the categorical likelihood of the label at points of the
straight interpolation path y_t = (1 - t) u + t y.

Both a fixed-step Euler scheme and an adaptive embedded 4(5) pair are
provided; integration is deterministic given (base sample, parameters,
solver config).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .distributions import field_to_kd, softmax_k
from .networks import FlowImageNetwork, flow_forward

# Dormand-Prince embedded 4(5) coefficients.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)

_MIN_STEP = 1e-12


class StepSizeUnderflow(RuntimeError):
    """Adaptive solver shrank the step below the representable minimum."""


@dataclass
class PathPoint:
    """State (1-t) u + t y on the straight path, with the retained base sample."""

    y_t: torch.Tensor
    t: float
    u: torch.Tensor


@dataclass
class SolverConfig:
    method: str = "euler"  # euler | dopri5
    steps: int = 50
    atol: float = 1e-6
    rtol: float = 1e-6

    def __post_init__(self):
        if self.method not in ("euler", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("tolerances must be positive")


def interpolate(u: torch.Tensor, y: torch.Tensor, t: float) -> PathPoint:
    """Point on the straight path from the base sample (t=0) to the label (t=1).

    The endpoints are returned exactly for the literals t=0 and t=1.
    """
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if u.shape != y.shape:
        raise ValueError(f"shape mismatch: base {tuple(u.shape)} vs label {tuple(y.shape)}")
    t = float(t)
    if t == 0.0:
        y_t = u.clone()
    elif t == 1.0:
        y_t = y.clone().to(u.dtype)
    else:
        y_t = (1.0 - t) * u + t * y
    return PathPoint(y_t=y_t, t=t, u=u)


def velocity(expectation: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Projected drift E[y | y_t] - u toward the predicted expectation."""
    if expectation.shape != u.shape:
        raise ValueError(f"shape mismatch: expectation {tuple(expectation.shape)} vs base {tuple(u.shape)}")
    return expectation - u


def predict_expectation(y_t: torch.Tensor, t, x: torch.Tensor | None, network: FlowImageNetwork) -> torch.Tensor:
    """Per-pixel class expectation softmax(network(y_t, t, x)), shape (b, k, h, w)."""
    logits = flow_forward(network, y_t, t, x)
    k, d = logits.shape[-3], logits.shape[-2] * logits.shape[-1]
    probs = softmax_k(field_to_kd(logits), k, d)
    return probs.reshape(logits.shape)


@dataclass
class IntegrationResult:
    final_state: torch.Tensor
    expectation: torch.Tensor
    labels: torch.Tensor
    nfe: int


def _check_finite(y: torch.Tensor) -> None:
    if not bool(torch.isfinite(y).all()):
        raise FloatingPointError("integration state overflowed")


def integrate(
    u: torch.Tensor,
    x: torch.Tensor | None,
    network: FlowImageNetwork,
    solver: SolverConfig,
) -> IntegrationResult:
    """Solve the sampling ODE from the base sample at t=0 to t=1.

    Returns the final state, the expectation evaluated there, and the
    per-pixel argmax label map.  The -u drift term uses the retained
    initial sample throughout the solve.
    """
    with torch.no_grad():
        if solver.method == "euler":
            y, nfe = _integrate_euler(u, x, network, solver.steps)
        else:
            y, nfe = _integrate_dopri5(u, x, network, solver.atol, solver.rtol)
        expectation = predict_expectation(y, 1.0, x, network)
        nfe += 1
    labels = expectation.argmax(dim=-3)
    return IntegrationResult(final_state=y, expectation=expectation, labels=labels, nfe=nfe)


def _integrate_euler(u, x, network, steps):
    y = u.clone()
    for i in range(steps):
        t0 = i / steps
        h = (i + 1) / steps - t0
        y = y + h * velocity(predict_expectation(y, t0, x, network), u)
        _check_finite(y)
    return y, steps


def _integrate_dopri5(u, x, network, atol, rtol, safety=0.9, min_factor=0.2, max_factor=10.0):
    def f(t, y):
        return velocity(predict_expectation(y, min(max(t, 0.0), 1.0), x, network), u)

    t, y = 0.0, u.clone()
    h = 0.05
    nfe = 0
    k = [None] * 7
    k[0] = f(t, y)
    nfe += 1
    while 1.0 - t > _MIN_STEP:
        h = min(h, 1.0 - t)
        if h < _MIN_STEP:
            raise StepSizeUnderflow(f"step size underflow at t={t:.6g} (h={h:.3g})")
        for i in range(1, 7):
            yi = y
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    yi = yi + h * a * k[j]
            k[i] = f(t + _DP_C[i] * h, yi)
            nfe += 1
        y5 = y
        for b, ki in zip(_DP_B5, k):
            if b != 0.0:
                y5 = y5 + h * b * ki
        err = torch.zeros_like(y)
        for b5, b4, ki in zip(_DP_B5, _DP_B4, k):
            if b5 != b4:
                err = err + h * (b5 - b4) * ki
        tol = atol + rtol * torch.maximum(y.abs(), y5.abs())
        err_norm = float(((err / tol) ** 2).mean().sqrt())
        if err_norm <= 1.0:
            t = t + h
            y = y5
            _check_finite(y)
            k[0] = k[6]  # first-same-as-last: stage 7 sits at the accepted point
        # On rejection (t, y) are unchanged, so k[0] is still valid.
        factor = safety * (err_norm + 1e-16) ** -0.2
        h = h * min(max_factor, max(min_factor, factor))
    return y, nfe


def sample_labels(
    base_field,
    x: torch.Tensor | None,
    network: FlowImageNetwork,
    solver: SolverConfig,
    generator: torch.Generator,
    m: int,
) -> IntegrationResult:
    """Draw m base samples per batch element and integrate them to label maps.

    The base field is (b, k, h, w)-shaped for conditional models or
    (k, h, w) for unconditional ones; results stack samples on the leading
    axis as (m * b, ...) and (m, ...) respectively.
    """
    from .distributions import diag_sample

    u = diag_sample(base_field, generator, m)
    if u.dim() == 5:  # (m, b, k, h, w) -> flatten with batch fastest
        mb = u.shape[0] * u.shape[1]
        xrep = x.repeat(m, 1, 1, 1) if x is not None else None
        u = u.reshape(mb, *u.shape[2:])
    else:
        xrep = None if x is None else x
    return integrate(u, xrep, network, solver)
