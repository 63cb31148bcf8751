import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointdiffuse.schedule import (NoiseSchedule, decode_labels, encode_labels, forward_sample, forward_step,
                                   make_linear_schedule, predict_x0, reverse_step)


def test_linear_schedule_endpoints_and_products():
    s = make_linear_schedule(2, 1e-4, 0.02)
    np.testing.assert_allclose(s.betas, [1e-4, 0.02])
    assert s.alpha_bar(2) == pytest.approx(0.9999 * 0.98, abs=1e-15)
    assert s.alpha_bar(2) == pytest.approx(0.979902, abs=1e-12)
    assert make_linear_schedule(1, 0.5, 0.5).rhos[0] == pytest.approx(math.sqrt(0.5))
    assert make_linear_schedule(1, 0.5, 0.5).rhos[0] == pytest.approx(0.70711, abs=1e-5)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (5, 0.0, 0.02), (5, 0.03, 0.02), (5, 1e-4, 1.0)])
def test_linear_schedule_rejects(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


@given(st.integers(1, 200), st.floats(1e-5, 0.1), st.floats(0.0, 0.8))
def test_schedule_invariants(T, b0, extra):
    s = make_linear_schedule(T, b0, min(b0 + extra, 0.99))
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(s.rhos ** 2, s.betas, rtol=1e-12)


def test_step_range_checked():
    s = make_linear_schedule(3)
    x = torch.zeros(2, 2)
    for fn in (lambda t: forward_step(x, t, x, s), lambda t: forward_sample(x, t, x, s),
               lambda t: reverse_step(x, x, t, x, s)):
        with pytest.raises(ValueError):
            fn(0)
        with pytest.raises(ValueError):
            fn(4)


def test_forward_step_examples():
    s = NoiseSchedule.from_betas([0.19])
    out = forward_step(torch.tensor([[1.0]], dtype=torch.float64), 1, torch.ones(1, 1, dtype=torch.float64), s)
    assert out.item() == pytest.approx(0.9 + math.sqrt(0.19), abs=1e-12)
    assert out.item() == pytest.approx(1.33589, abs=1e-5)
    zero = NoiseSchedule.from_betas([0.0])
    x = torch.randn(4, 3, dtype=torch.float64)
    assert torch.equal(forward_step(x, 1, torch.randn(4, 3, dtype=torch.float64), zero), x)
    np.testing.assert_allclose(forward_step(x, 1, torch.zeros_like(x), s), math.sqrt(0.81) * x, rtol=1e-14)


def test_forward_sample_examples():
    s = NoiseSchedule.from_betas([0.75])
    one = torch.ones(1, 1, dtype=torch.float64)
    assert forward_sample(one, 1, one, s).item() == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)
    assert forward_sample(one, 1, one, s).item() == pytest.approx(1.36603, abs=1e-5)
    assert forward_sample(one, 1, 0 * one, s).item() == pytest.approx(0.5)
    long = make_linear_schedule(1000, 1e-4, 0.02)
    eps = torch.randn(100, 3, dtype=torch.float64)
    x0 = torch.ones(100, 3, dtype=torch.float64)
    assert torch.allclose(forward_sample(x0, 1000, eps, long), eps, atol=0.01)


def test_reverse_step_examples():
    s = NoiseSchedule.from_betas([0.19])
    x = torch.ones(1, 1, dtype=torch.float64)
    assert reverse_step(x, math.sqrt(0.19) * x, 1, None, s).item() == pytest.approx(0.9, abs=1e-12)
    zero = NoiseSchedule.from_betas([0.0, 0.0])
    y = torch.randn(5, 3, dtype=torch.float64)
    assert torch.equal(reverse_step(y, torch.randn(5, 3, dtype=torch.float64), 2, torch.randn(5, 3,
                                    dtype=torch.float64), zero), y)


def test_reverse_step_final_step_ignores_noise():
    s = make_linear_schedule(4)
    x, e, z = (torch.randn(3, 2, dtype=torch.float64) for _ in range(3))
    assert torch.equal(reverse_step(x, e, 1, z, s), reverse_step(x, e, 1, None, s))
    assert not torch.equal(reverse_step(x, e, 2, z, s), reverse_step(x, e, 2, None, s))


@settings(max_examples=50)
@given(st.floats(1e-4, 0.9), st.integers(0, 1000))
def test_forward_then_reverse_recovers_x0(beta, seed):
    s = NoiseSchedule.from_betas([beta])
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    x1 = forward_sample(x0, 1, eps, s)
    assert torch.allclose(reverse_step(x1, eps, 1, None, s), x0, atol=1e-9)
    assert torch.allclose(predict_x0(x1, eps, 1, s), x0, atol=1e-9)


def test_iterated_forward_marginals():
    # 10^4 chains, each over a 16 x 4 one-hot label field.
    s = make_linear_schedule(10, 1e-4, 0.2)
    gen = torch.Generator().manual_seed(0)
    x0 = encode_labels(np.arange(16) % 4, 4, dtype=torch.float64).expand(10_000, 16, 4)
    x = x0.clone()
    for t in range(1, 11):
        x = forward_step(x, t, torch.randn(x.shape, generator=gen, dtype=torch.float64), s)
        ab = s.alpha_bar(t)
        resid = x - math.sqrt(ab) * x0
        assert resid.var().item() == pytest.approx(1 - ab, rel=0.02)
        assert (x * x0).mean().item() == pytest.approx(math.sqrt(ab), rel=0.02)


def test_encode_decode_examples():
    assert encode_labels([1], 3).tolist() == [[-1.0, 1.0, -1.0]]
    assert decode_labels(np.array([[0.2, 0.2, 0.1]])).tolist() == [0]
    with pytest.raises(ValueError):
        encode_labels([3], 3)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.floats(1e-3, 100))
def test_encode_decode_round_trip(classes, scale):
    assert decode_labels(encode_labels(classes, 7, scale)).tolist() == classes


@given(st.lists(st.lists(st.floats(-10, 10), min_size=4, max_size=4), min_size=1, max_size=10))
def test_decode_monotone_invariance(rows):
    x = np.array(rows)
    top = np.sort(x, axis=1)
    assert decode_labels(4.0 * x).tolist() == decode_labels(x).tolist()
    if np.all(top[:, -1] - top[:, -2] > 1e-6):
        assert decode_labels(np.exp(x / 4) + x ** 3).tolist() == decode_labels(x).tolist()
