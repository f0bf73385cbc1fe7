import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from cantor_prufer.engine import IntegratorControls, idealized_stage, integrate_stage
from cantor_prufer.errors import TargetUnreachable
from cantor_prufer.oracles import (brute_force_small_instance, idealized_conserved, idealized_norm,
                                   idealized_x_closed_form, idealized_x_of_angle,
                                   small_angle_norm, tabulate_potential, tail_series_closed_form)
from cantor_prufer.potentials import wvn_stage
from cantor_prufer.verification import flip_distance_bound

F, DK = 0.01, 0.001
ALPHA = math.asin(DK / F)


def test_conserved_examples():
    assert idealized_conserved(F, DK, 0.0) == 1.0
    assert idealized_conserved(F, DK, math.pi - ALPHA) == pytest.approx(0.5, abs=1e-15)
    assert idealized_conserved(F, DK, math.pi / 2) == pytest.approx(1 / 11, rel=1e-15)


@given(f=st.floats(1e-6, 1.0), ratio=st.floats(1e-9, 0.999))
def test_conserved_half_at_flip(f, ratio):
    dk = ratio * f
    # sin near pi carries an absolute error ~1e-16 that is divided by dk/f
    tol = 1e-12 + 4e-16 / ratio
    assert idealized_conserved(f, dk, math.pi - math.asin(dk / f)) == pytest.approx(0.5, rel=tol)


def test_x_of_angle_examples():
    assert idealized_x_of_angle(F, DK, 0.0) == 0.0
    x = idealized_x_of_angle(F, DK, math.pi - ALPHA)
    assert math.isfinite(x)
    assert x <= flip_distance_bound(F, F / DK)
    with pytest.raises(TargetUnreachable):
        idealized_x_of_angle(F, DK, math.pi + ALPHA)


def test_quadrature_against_closed_form():
    for target in (0.1, 1.0, math.pi / 2, math.pi - ALPHA, math.pi):
        q = idealized_x_of_angle(F, DK, target)
        assert q == pytest.approx(idealized_x_closed_form(F, DK, target), rel=1e-10)


def test_reflection_symmetry():
    assert idealized_x_of_angle(F, DK, math.pi) == \
        pytest.approx(2 * idealized_x_of_angle(F, DK, math.pi / 2), rel=1e-12)


@settings(max_examples=50)
@given(f=st.floats(1e-4, 1.0), r=st.floats(1e-4, 0.9), t1=st.floats(0.01, 3.0),
       t2=st.floats(0.01, 3.0))
def test_x_of_angle_monotone(f, r, t1, t2):
    dk = r * f
    assume(abs(t1 - t2) > 1e-6)
    lo, hi = sorted((t1, t2))
    assert idealized_x_of_angle(f, dk, lo) < idealized_x_of_angle(f, dk, hi)
    # larger splitting reaches every angle sooner
    assert idealized_x_of_angle(f, 1.1 * dk, hi) < idealized_x_of_angle(f, dk, hi) or \
        1.1 * dk >= f


def test_norm_small_angle_limit():
    f, gt = 1e-3, 1e6
    dk = f / gt
    for gamma in (1e-3, 1e-2):
        q = idealized_norm(f, dk, gamma)
        assert q == pytest.approx(small_angle_norm(f, gt, gamma), rel=5 * gamma)
    assert idealized_norm(f, dk, 0.0) == 0.0


def test_norm_at_flip_tends_to_three_halves_over_f():
    # 1/f from the start of the drive plus 1/(2f) from the approach to the flip
    f = 1e-2
    vals = [f * idealized_norm(f, f * r, math.pi - math.asin(r)) for r in (1e-2, 1e-4, 1e-6)]
    errs = [abs(v - 1.5) for v in vals]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


def test_engine_norm_matches_quadrature():
    tr = integrate_stage(idealized_stage(F, DK), x_end=1000.0, model="idealized",
                         controls=IntegratorControls())
    xh = idealized_x_of_angle(F, DK, math.pi / 2)
    s = tr.state_at(xh).pairs[0]
    assert s.norm_r2_lo == pytest.approx(idealized_norm(F, DK, math.pi / 2), rel=1e-6)
    es = tr.event_state(0, "flip")
    assert es.norm_r2_lo == pytest.approx(idealized_norm(F, DK, math.pi - ALPHA), rel=1e-6)
    assert math.exp(es.log_r2_lo) == pytest.approx(0.5, abs=1e-6)


def test_brute_force_free():
    h = (math.pi / 2.0) / 200
    th, lr, nr = brute_force_small_instance(np.zeros(4 * 1000 + 1), 2.0, 1000 * h, h)
    assert abs(th - 2000 * h) <= 1e-10
    assert abs(lr) <= 1e-10
    assert abs(nr - 1000 * h) <= 1e-10


def test_brute_force_rejects_coarse_step():
    with pytest.raises(ValueError):
        brute_force_small_instance(np.zeros(41), 2.0, 10 * 0.1, 0.1)


def test_brute_force_matches_engine_on_reference_run():
    st = wvn_stage(2.0, 1e-3, 50.0, 1e6)
    k = 2.0
    h = (math.pi / k) / 200
    n = int(1000.0 / h)
    x_end = n * h
    _, v, _ = tabulate_potential(st, x_end, h / 4)
    th, lr, nr = brute_force_small_instance(v, k, x_end, h)
    p = integrate_stage(st, x_end=x_end).final_state().pairs[0]
    assert abs(p.log_r2_lo - lr) <= 1e-7
    assert p.theta_lo == pytest.approx(th, rel=1e-9)
    assert p.norm_r2_lo == pytest.approx(nr, rel=1e-7)


def richardson_order(seed, k=0.5, amp0=0.1, omax=4.0, n=1000):
    rng = np.random.default_rng(seed)
    amp = rng.uniform(-amp0, amp0, 5)
    om = rng.uniform(0.2, omax, 5)
    ph = rng.uniform(0, 2 * math.pi, 5)
    x_end = n * (math.pi / k) / 200
    out = []
    for m in (1, 2, 4):
        h = x_end / (n * m)
        grid = np.arange(4 * n * m + 1) * h / 4
        v = (amp[:, None] * np.sin(om[:, None] * grid[None, :] + ph[:, None])).sum(0)
        out.append(brute_force_small_instance(v, k, x_end, h)[1])
    return math.log2(abs(out[0] - out[1]) / abs(out[1] - out[2]))


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_richardson_order(seed):
    assert richardson_order(seed) >= 4.0


def test_tail_series_closed_form():
    assert tail_series_closed_form(1.0, 1e-3, 8.0, 10.0) == math.inf     # p = g/16 <= 1
    val = tail_series_closed_form(1e-8, 1e-9, 50.0, 1e5)
    assert 0 < val < math.inf
