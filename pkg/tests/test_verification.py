import json
import math
from dataclasses import replace

import numpy as np
import pytest

from cantor_prufer.construction import stage_report
from cantor_prufer.errors import DivergentTailEstimate, TailNotConverged
from cantor_prufer.verification import (TailCertificate, Tolerances, VerificationReport,
                                        conditional_integral_profile, continuity_check,
                                        continuity_radius, mass_conservation_check, point_mass,
                                        tail_decrements, tail_norm_bound, verify_stage)


def cert(norm_u2, bound=0.0, energy=2.0):
    return TailCertificate(energy, 1e6, 2 * energy**2 * norm_u2, norm_u2, bound, 0.0, 1.0,
                           False, True)


def test_point_mass():
    assert point_mass(4.0, cert(4.0)) == 0.25
    with pytest.raises(TailNotConverged):
        point_mass(4.0, None)
    with pytest.raises(TailNotConverged):
        point_mass(4.0, replace(cert(4.0), converged=False))


def test_tail_norm_bound_example():
    b = tail_norm_bound(math.log(1e-8), 1e-9, 50.0, 1e6, k_parent=2.0, k=2.0)
    assert math.isfinite(b) and b > 0
    # the first interval alone holds at least R^2 * pi/dk, so f * bound >= pi * 1e-2
    assert 1e-8 * math.pi / 1e-9 <= b <= 10 * 1e-8 * math.pi / 1e-9


def test_tail_norm_bound_divergent():
    with pytest.raises(DivergentTailEstimate):
        tail_norm_bound(math.log(1e-8), 1e-9, 0.1, 1e6)


def test_tail_decrements_nonincreasing():
    b = tail_decrements(1e-6, 50.0, 1e5, 500)
    assert np.all(np.diff(b) <= 0)
    assert np.all(b > 0)


def test_conditional_integral_zero():
    x = np.linspace(0.0, 100.0, 1001)
    assert conditional_integral_profile(x, np.zeros_like(x)) == 0.0


def test_conditional_integral_sinusoid():
    f, k0 = 1e-3, 2.0
    x = np.linspace(0.0, 50 * math.pi, 200_001)
    # from the origin the antiderivative is f (cos 2k0x - 1), whose sup is 2f
    s = conditional_integral_profile(x, -2 * f * k0 * np.sin(2 * k0 * x))
    assert s == pytest.approx(2 * f, rel=1e-6)
    # the phase-shifted drive has antiderivative -f sin 2k0x and sup f
    c = conditional_integral_profile(x, -2 * f * k0 * np.cos(2 * k0 * x))
    assert c == pytest.approx(f, rel=1e-6)


def test_default_split_records(split_run):
    state, report = split_run
    assert report.passed
    assert len(report.energies) == 2
    for rec in report.energies:
        assert 0.85 <= rec["norm_vs_prediction"] <= 1.15
        assert 0.45 <= rec["r2_at_flip"] <= 0.55
        assert rec["x_flip"] <= rec["x_flip_bound"]
        assert rec["tail_converged"]
    assert report.check("pair0.norm_split_asymmetry").measured <= 0.05
    sup = report.stage["cond_integral_sup"]
    assert sup <= 10 * 50.0 * 1e-3


def test_wvn_record(wvn_run):
    _, report = wvn_run
    assert 0.9 <= report.check("pair0.lo.f_norm").measured <= 1.1
    assert report.passed


def test_continuity_center_is_exact(split_run):
    tr = split_run[0].stages[0].traj
    k = tr.stage.pairs[0].k_lo.value
    rec, checks = continuity_check(tr, 0, "lo", [k], tr.stage.drive_end, 1e8, decimation=64)
    assert max(rec["dev_r2"]) <= 1e-9
    assert max(rec["dev_dtheta_dk"]) <= 1e-9
    assert all(c.passed for c in checks)


def test_continuity_negative_control(two_stage):
    state = two_stage.payload
    tr = state.stages[0].traj
    ho = state.stages[1].report.extra["context"]["handoff"]
    gt, x2 = ho["g_tilde_next"], ho["x"]
    k = tr.stage.pairs[0].k_lo.value
    r = continuity_radius(gt, ho["parents"][0]["dtheta_dk"])
    inside, ci = continuity_check(tr, 0, "lo", [k - r, k + r], x2, gt, decimation=8)
    outside, _ = continuity_check(tr, 0, "lo", [k - 10 * r, k + 10 * r], x2, gt, decimation=8)
    far, fc = continuity_check(tr, 0, "lo", [k - 100 * r, k + 100 * r], x2, gt, decimation=8)
    assert all(c.passed for c in ci)
    # deviation grows faster than the distance: 10x the radius is > 10x the in-window deviation
    assert outside["worst"] > 10 * inside["worst"]
    assert not all(c.passed for c in fc)


def test_mass_conservation_idealized():
    rec, checks = mass_conservation_check(cert(10.0), [cert(20.0), cert(20.0)])
    assert rec["ratio"] == 1.0 and rec["ratio_lower"] == 1.0
    assert checks[0].passed
    rec, checks = mass_conservation_check(cert(10.0), [cert(40.0), cert(40.0)])
    assert rec["ratio"] == 0.5 and not checks[0].passed


def test_report_round_trip(split_run):
    report = split_run[1]
    d = json.loads(report.to_json())
    back = VerificationReport.from_dict(d)
    assert back.passed == report.passed
    assert [c.name for c in back.checks] == [c.name for c in report.checks]
    assert back.to_json() == report.to_json()
    header = report.to_csv().splitlines()[1]
    assert header == "check_name,measured,predicted,tolerance,pass"


def test_report_deterministic_and_echoes_tolerances(split_run, default_cfg):
    state, report = split_run
    tr = state.stages[0].traj
    ctx = report.extra["context"]
    again, _ = stage_report(tr, default_cfg, ctx, None, state.tree)
    assert again.to_json() == report.to_json()
    assert report.tolerances["split_norm_band"] == list(default_cfg.tolerances.split_norm_band)


def test_tighter_tolerances_fail(split_run):
    tr = split_run[0].stages[0].traj
    tight = Tolerances(split_norm_band=(0.999999, 1.000001), r2_flip_band=(0.4999999, 0.5000001))
    rep = verify_stage(tr, tight)
    assert not rep.passed
    names = {c.name for c in rep.failures()}
    assert any("half_f_norm" in n for n in names)
