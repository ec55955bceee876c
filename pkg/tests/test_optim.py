import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from osteo_ssl.optim import LARC, NonFiniteGradientError, OptimizerError, cosine_lr, lars_update, local_lr


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 0.3, 0.001) == 0.3
    assert math.isclose(cosine_lr(100, 100, 0.3, 0.001), 0.001)
    assert math.isclose(cosine_lr(50, 100, 0.3, 0.001), (0.3 + 0.001) / 2)


@pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
def test_cosine_out_of_range(step, total):
    with pytest.raises(OptimizerError):
        cosine_lr(step, total, 0.1)


@given(st.integers(1, 500), st.floats(1e-4, 2), st.floats(0, 1))
def test_cosine_non_increasing(total, base, frac):
    final = base * frac
    lrs = [cosine_lr(s, total, base, final) for s in range(total + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_local_lr_hand_example():
    assert math.isclose(local_lr(5.0, 5.0, 0.001, 0.0), 0.001)
    _, _, rates = lars_update([np.array([3.0, 4.0])], [np.array([0.0, 5.0])], 0.1, 0.001, 0.0)
    assert math.isclose(rates[0], 0.001)


def test_local_lr_fallback_and_clip():
    assert local_lr(0.0, 3.0, 0.001, 0.0) == 1.0
    assert local_lr(3.0, 0.0, 0.001, 0.0) == 1.0
    assert local_lr(1e6, 1e-6, 0.001, 0.0) == 1.0


def test_zero_gradient_leaves_weights():
    w = [np.array([1.0, -2.0]), np.ones((2, 2))]
    new, _, _ = lars_update(w, [np.zeros(2), np.zeros((2, 2))], 0.5, 0.001, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(new, w))


def test_tiny_lr_without_momentum_barely_moves(rng):
    w = [rng.normal(size=5)]
    new, _, _ = lars_update(w, [rng.normal(size=5)], 1e-300, 0.001, 1e-6, momentum=0.0)
    assert np.array_equal(new[0], w[0])


def test_update_formula(rng):
    w, g = rng.normal(size=4), rng.normal(size=4)
    wd, trust, lr, m = 0.01, 0.02, 0.3, 0.9
    rate = min(trust * np.linalg.norm(w) / (np.linalg.norm(g) + wd * np.linalg.norm(w)), 1.0)
    v0 = rng.normal(size=4)
    new, state, _ = lars_update([w], [g], lr, trust, wd, [v0], m)
    v = m * v0 + rate * (g + wd * w)
    assert np.allclose(state[0], v) and np.allclose(new[0], w - lr * v)


def test_non_finite_gradient_aborts():
    with pytest.raises(NonFiniteGradientError, match="layer 1"):
        lars_update([np.ones(2), np.ones(2)], [np.ones(2), np.array([np.nan, 0])], 0.1)
    with pytest.raises(OptimizerError):
        lars_update([np.ones(2)], [np.ones(3)], 0.1)
    with pytest.raises(OptimizerError):
        lars_update([np.ones(2)], [np.ones(2)], 0.0)


def test_torch_larc_matches_numpy(rng):
    ws = [rng.normal(size=(3, 4)), rng.normal(size=4)]
    params = [torch.nn.Parameter(torch.tensor(w)) for w in ws]
    opt = LARC(params, lr=0.2, momentum=0.9, weight_decay=1e-3, trust_coeff=0.01)
    state = None
    for _ in range(3):
        gs = [rng.normal(size=w.shape) for w in ws]
        for p, g in zip(params, gs):
            p.grad = torch.tensor(g)
        opt.step()
        ws, state, _ = lars_update(ws, gs, 0.2, 0.01, 1e-3, state, 0.9)
    for p, w in zip(params, ws):
        assert np.allclose(p.detach().numpy(), w, atol=1e-12)


def test_torch_larc_non_finite():
    p = torch.nn.Parameter(torch.ones(2))
    p.grad = torch.tensor([float("inf"), 0.0])
    with pytest.raises(NonFiniteGradientError):
        LARC([p]).step()
