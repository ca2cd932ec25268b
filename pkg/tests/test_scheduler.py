import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdc.scheduler import (
    ScheduleError,
    ScheduleUnsuitableError,
    add_noise,
    ddim_step,
    make_schedule,
    predict_eps_from_v,
    predict_x0_from_v,
    schedule_from_betas,
    target_velocity,
    toy_schedule,
    trailing_timesteps,
)

# values from a plain running product / hand evaluation, not from the module under test
AB_1000_LINEAR = 4.0358297653756754e-05
X2_HAND = 1.0082170750293267  # sqrt(.72)*1.5 + sqrt(.28)*(-0.5)
X1_HAND = 1.2649110640673515  # sqrt(.9)*1.5 + sqrt(.1)*(-0.5)
X1_ARBITRARY_V = 0.9022161196205982  # x_2 = 1.0, v = 0.3 stepped 2 -> 1
X0_ARBITRARY_V = 0.6897830587599817


def scalar(x):
    return torch.tensor([x], dtype=torch.float64)


@pytest.fixture
def two_step():
    return schedule_from_betas([0.1, 0.2], single_step=False)


def test_single_beta_schedule():
    s = schedule_from_betas([0.5], single_step=False)
    np.testing.assert_allclose(s.alpha_bars, [0.5])


def test_two_step_products(two_step):
    np.testing.assert_allclose(two_step.alpha_bars, [0.9, 0.72], rtol=1e-12)


def test_linear_1000_terminal_signal():
    s = make_schedule(1000, 1e-4, 0.02, "linear")
    assert s.alpha_bar(1000) == pytest.approx(AB_1000_LINEAR, rel=1e-9)


def test_default_schedule_invariants():
    for s in (make_schedule(), toy_schedule()):
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == s.alphas[0]
        assert s.alpha_bars[-1] < 1e-3


def test_scaled_linear_is_quadratic_in_sqrt_space():
    s = make_schedule(10, 0.01, 0.04, "scaled_linear", single_step=False)
    np.testing.assert_allclose(np.sqrt(s.betas), np.linspace(0.1, 0.2, 10))


def test_scaled_linear_stable_diffusion_endpoints_rejected_for_single_step():
    # alpha_bar_T ~ 4.7e-3 with these endpoints
    with pytest.raises(ScheduleUnsuitableError):
        make_schedule(1000, 0.00085, 0.012, "scaled_linear")
    with pytest.warns(UserWarning):
        make_schedule(1000, 0.00085, 0.012, "scaled_linear", single_step=False)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule_parameters(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


def test_schedule_is_immutable():
    s = toy_schedule()
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.0


def test_timestep_bounds():
    s = toy_schedule()
    with pytest.raises(ScheduleError):
        s.alpha_bar(0)
    with pytest.raises(ScheduleError):
        s.alpha_bar(101)


class FixedAB:
    """Schedule stand-in with a chosen alpha_bar at every timestep."""

    def __init__(self, ab):
        self.ab = ab
        self.T = 10

    def alpha_bar(self, t):
        return self.ab


def test_add_noise_examples():
    x0, eps = scalar(2.0), scalar(1.0)
    assert add_noise(x0, eps, 1, FixedAB(0.25)).item() == pytest.approx(1.8660254037844386, abs=1e-12)
    assert torch.equal(add_noise(x0, torch.randn(1, dtype=torch.float64), 1, FixedAB(1.0)), x0)
    assert add_noise(x0, scalar(0.0), 1, FixedAB(0.36)).item() == 0.6 * 2.0


def test_target_velocity_examples():
    x0 = torch.randn(5, dtype=torch.float64)
    eps = torch.randn(5, dtype=torch.float64)
    torch.testing.assert_close(target_velocity(x0, torch.zeros(5, dtype=torch.float64), 1, FixedAB(0.25)), -math.sqrt(0.75) * x0)
    torch.testing.assert_close(target_velocity(torch.zeros(5, dtype=torch.float64), eps, 1, FixedAB(0.25)), 0.5 * eps)
    assert target_velocity(scalar(2.0), scalar(1.0), 1, FixedAB(0.25)).item() == pytest.approx(-1.2320508075688772)


def test_predict_x0_examples():
    assert predict_x0_from_v(scalar(1.0), scalar(0.5), 1, FixedAB(0.25)).item() == pytest.approx(0.0669872981077807)
    x = torch.randn(3, dtype=torch.float64)
    torch.testing.assert_close(predict_x0_from_v(x, torch.randn(3, dtype=torch.float64), 1, FixedAB(1.0)), x)


def test_shape_mismatch_errors():
    s = toy_schedule()
    a, b = torch.zeros(2, 3), torch.zeros(3, 2)
    for fn in (add_noise, target_velocity, predict_x0_from_v):
        with pytest.raises(ValueError):
            fn(a, b, 1, s)


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31 - 1))
def test_exact_x0_and_noise_recovery(t, seed):
    sched = make_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
    x_t = add_noise(x0, eps, t, sched)
    v = target_velocity(x0, eps, t, sched)
    torch.testing.assert_close(predict_x0_from_v(x_t, v, t, sched), x0, rtol=1e-6, atol=1e-9)
    torch.testing.assert_close(predict_eps_from_v(x_t, v, t, sched), eps, rtol=1e-6, atol=1e-9)


def test_trailing_examples():
    assert trailing_timesteps(1000, 1) == [1000]
    assert trailing_timesteps(10, 10) == list(range(10, 0, -1))
    assert trailing_timesteps(1000, 4) == [1000, 750, 500, 250]
    with pytest.raises(ScheduleError):
        trailing_timesteps(10, 11)


@given(T=st.integers(1, 2000), data=st.data())
def test_trailing_properties(T, data):
    n = data.draw(st.integers(1, T))
    steps = trailing_timesteps(T, n)
    assert steps[0] == T
    assert all(1 <= s <= T for s in steps)
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_ddim_final_step_is_x0_prediction(two_step):
    x, v = scalar(0.7), scalar(-0.2)
    assert torch.equal(ddim_step(x, v, 2, None, two_step), predict_x0_from_v(x, v, 2, two_step))


def test_ddim_two_step_hand_oracle(two_step):
    x0, eps = scalar(1.5), scalar(-0.5)
    x2 = add_noise(x0, eps, 2, two_step)
    assert x2.item() == pytest.approx(X2_HAND, abs=1e-12)
    x1 = ddim_step(x2, target_velocity(x0, eps, 2, two_step), 2, 1, two_step)
    assert x1.item() == pytest.approx(X1_HAND, abs=1e-6)
    out = ddim_step(x1, target_velocity(x0, eps, 1, two_step), 1, None, two_step)
    assert out.item() == pytest.approx(1.5, abs=1e-6)


def test_ddim_arbitrary_velocity_hand_oracle(two_step):
    x1 = ddim_step(scalar(1.0), scalar(0.3), 2, 1, two_step)
    assert x1.item() == pytest.approx(X1_ARBITRARY_V, abs=1e-6)
    assert ddim_step(scalar(1.0), scalar(0.3), 2, None, two_step).item() == pytest.approx(X0_ARBITRARY_V, abs=1e-6)


def test_ddim_chain_with_true_velocity_recovers_x0():
    sched = make_schedule()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    steps = trailing_timesteps(sched.T, 10)
    x = add_noise(x0, eps, steps[0], sched)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else None
        x = ddim_step(x, target_velocity(x0, eps, t, sched), t, t_prev, sched)
    torch.testing.assert_close(x, x0, rtol=1e-6, atol=1e-9)


def test_ddim_rejects_non_decreasing_step(two_step):
    with pytest.raises(ScheduleError):
        ddim_step(scalar(1.0), scalar(0.0), 1, 2, two_step)
