"""Finite-difference validation of end-to-end gradients.

Central differences in double precision against a single backward pass,
on the micro-scale configuration in eval mode (fixed normalizer statistics,
no dropout) so the loss is a deterministic, almost-everywhere-smooth
function of the parameters.
"""

import numpy as np
import pytest
import torch

from drnet.config import preset
from drnet.model import DRNet
from drnet.training import candidate_loss

REL_TOL = 1e-3
DENOM_FLOOR = 1e-6  # below this, central differences are pure roundoff
SAMPLES_PER_TENSOR = 3
MIN_TOTAL_SAMPLES = 200


def _build():
    torch.manual_seed(7)
    model = DRNet(preset("micro")).double()
    model.eval()
    gen = torch.Generator().manual_seed(11)
    x = torch.rand(1, 16, 1, 32, 32, generator=gen, dtype=torch.float64)
    t = torch.tensor([4])
    return model, x, t


def _loss(model, x, t) -> torch.Tensor:
    return candidate_loss(model(x), t)


def finite_difference_errors(model, x, t):
    """Yield (name, flat_index, analytic, numeric, rel_err) samples."""
    loss = _loss(model, x, t)
    model.zero_grad()
    loss.backward()
    grads = {
        name: p.grad.detach().clone()
        for name, p in model.named_parameters()
    }
    rng = np.random.default_rng(3)
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad_flat = grads[name].view(-1)
            n = min(SAMPLES_PER_TENSOR, flat.numel())
            for idx in rng.choice(flat.numel(), size=n, replace=False):
                idx = int(idx)
                theta = flat[idx].item()
                h = 1e-6 * max(1.0, abs(theta))
                flat[idx] = theta + h
                up = _loss(model, x, t).item()
                flat[idx] = theta - h
                down = _loss(model, x, t).item()
                flat[idx] = theta
                numeric = (up - down) / (2.0 * h)
                analytic = grad_flat[idx].item()
                denom = max(abs(analytic), abs(numeric), DENOM_FLOOR)
                yield name, idx, analytic, numeric, abs(analytic - numeric) / denom


class TestGradients:
    def test_finite_differences_match_backward(self):
        model, x, t = _build()
        worst = 0.0
        worst_at = ""
        count = 0
        for name, idx, analytic, numeric, err in finite_difference_errors(
            model, x, t
        ):
            count += 1
            if err > worst:
                worst, worst_at = err, f"{name}[{idx}]"
            assert err < REL_TOL, (
                f"{name}[{idx}]: analytic {analytic:.6e} vs "
                f"numeric {numeric:.6e} (rel err {err:.3e})"
            )
        assert count >= MIN_TOTAL_SAMPLES
        assert worst < REL_TOL, f"worst {worst:.3e} at {worst_at}"

    def test_every_parameter_receives_gradient(self):
        model, x, t = _build()
        loss = _loss(model, x, t)
        model.zero_grad()
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert torch.all(torch.isfinite(p.grad)), name

    def test_loss_is_finite_and_near_uniform_at_init(self):
        model, x, t = _build()
        loss = _loss(model, x, t).item()
        assert np.isfinite(loss)
        assert abs(loss - np.log(8.0)) < 1.5
