"""The fourteen acceptance criteria, one test each, each printing a PASS/FAIL line.

The summary section "acceptance criteria" at the end of the pytest run
collects the lines in order.
"""

import math
import time

import numpy as np

from cantor_prufer import cli
from cantor_prufer.construction import builtin_profile, run_construction
from cantor_prufer.engine import IntegratorControls, idealized_stage, integrate_stage, run_probe
from cantor_prufer.oracles import (brute_force_small_instance, idealized_x_of_angle,
                                   tabulate_potential)
from cantor_prufer.potentials import Energy, PairParams, StageParams, wvn_stage
from cantor_prufer.verification import flip_distance_bound, verify_stage

from test_oracles import richardson_order

F, DK = 0.01, 0.001
ALPHA = math.asin(DK / F)


def _idealized():
    x_end = 1.5 * idealized_x_of_angle(F, DK, math.pi - ALPHA)
    return integrate_stage(idealized_stage(F, DK), x_end=x_end,
                           controls=IntegratorControls(decimation=1), model="idealized")


def test_c01_idealized_conservation(acceptance_line):
    # warm-up: the first call compiles the kernel, which is not part of the sweep
    integrate_stage(idealized_stage(F, DK), x_end=10.0, model="idealized")
    t0 = time.perf_counter()
    tr = _idealized()
    dt = time.perf_counter() - t0
    m = tr.rec_x <= tr.x_flip(0)
    r2 = np.exp(tr.column(0, "log_r2_lo")[m])
    q = r2 * (DK + F * np.sin(tr.column(0, "delta_theta")[m])) / DK
    drift = float(np.max(np.abs(q - 1.0)))
    ok = drift <= 1e-8 and dt < 1.0 and m.sum() > 1000
    acceptance_line(1, ok, f"max drift {drift:.2e} <= 1e-8 over {m.sum()} steps, {dt:.3f} s < 1 s")
    assert ok


def test_c02_flip_value(acceptance_line):
    tr = _idealized()
    ideal = math.exp(tr.event_state(0, "flip").log_r2_lo)
    t0 = time.perf_counter()
    _, reports = run_construction(builtin_profile("default"), max_stage=1)
    dt = time.perf_counter() - t0
    full = [rec["r2_at_flip"] for rec in reports[0].energies]
    ok = abs(ideal - 0.5) <= 1e-6 and all(0.45 <= v <= 0.55 for v in [ideal] + full) and dt < 300
    acceptance_line(2, ok, f"idealized R^2 = {ideal:.9f} (|-1/2| {abs(ideal - 0.5):.1e}), "
                           f"full {full[0]:.6f}/{full[1]:.6f} in [0.45, 0.55], {dt:.1f} s")
    assert ok


def test_c03_flip_point_bound(split_run, acceptance_line):
    tr = split_run[0].stages[0].traj
    bound = flip_distance_bound(1e-3, 1e6)
    x_flip = tr.x_flip(0)
    ideal = _idealized().x_flip(0)
    oracle = idealized_x_of_angle(F, DK, math.pi - ALPHA)
    rel = abs(ideal / oracle - 1)
    ok = x_flip <= 1.2 * bound and rel <= 1e-8
    acceptance_line(3, ok, f"x_flip {x_flip:.6g} <= 1.2 x {bound:.6g}; idealized vs quadrature "
                           f"rel {rel:.1e} <= 1e-8")
    assert ok


def test_c04_wvn_norm(wvn_run, acceptance_line):
    _, report = wvn_run
    fn = report.check("pair0.lo.f_norm").measured
    ok = 0.9 <= fn <= 1.1 and report.energies[0]["tail_converged"]
    acceptance_line(4, ok, f"f ||R||^2 = {fn:.6f} in [0.9, 1.1]")
    assert ok


def test_c05_norm_doubling(split_run, acceptance_line):
    report = split_run[1]
    vals = [rec["norm_vs_prediction"] for rec in report.energies]
    asym = report.check("pair0.norm_split_asymmetry").measured
    ok = all(0.85 <= v <= 1.15 for v in vals) and asym <= 0.05
    acceptance_line(5, ok, f"f ||R||^2 / 2 = {vals[0]:.6f}, {vals[1]:.6f} in [0.85, 1.15]; "
                           f"asymmetry {asym:.1e} <= 5%")
    assert ok


def test_c06_point_mass_halving(split_run, wvn_run, acceptance_line):
    mu0 = wvn_run[1].energies[0]["point_mass"]
    ratios = [rec["point_mass"] / mu0 for rec in split_run[1].energies]
    ok = all(0.4 <= r <= 0.6 for r in ratios)
    acceptance_line(6, ok, f"mu_split / mu_ref = {ratios[0]:.6f}, {ratios[1]:.6f} in [0.4, 0.6]")
    assert ok


def test_c07_discrimination(split_run, default_cfg, acceptance_line):
    tr = split_run[0].stages[0].traj
    rep = verify_stage(tr, default_cfg.tolerances, probes=True)
    certified = all(rec["tail_converged"] for rec in rep.energies)
    slopes = [rep.check(f"pair0.{s}.detuned_probe.slope").measured for s in ("lo", "hi")]
    fits = [rep.check(f"pair0.{s}.detuned_probe.fit_r2").measured for s in ("lo", "hi")]
    ok = certified and all(s > 0 for s in slopes) and all(f >= 0.9 for f in fits)
    acceptance_line(7, ok, f"anchors tail-certified: {certified}; detuned slopes "
                           f"{slopes[0]:.3g}, {slopes[1]:.3g} > 0, fit R^2 >= {min(fits):.6f}")
    assert ok


def test_c08_dual_dtheta_dk(wvn_run, acceptance_line):
    tr, _ = wvn_run
    vmax = float(np.max(np.abs(tr.v)))
    res = run_probe(tr, [tr.stage.pairs[0].k_parent.value], decimation=16)
    t = res.probes[:, 0, 2]
    t_int = res.probes[:, 0, 5] * np.exp(-res.probes[:, 0, 1])
    m = res.x > 1.0
    dual = float(np.max(np.abs(t_int[m] / t[m] - 1.0)))
    free = StageParams(0, 1.0, 1e6, 0.0,
                       (PairParams(Energy(1.0), 1e-300, 0.0, kind="wvn", tail_delta_k=1e-306),))
    ftr = integrate_stage(free, x_end=500.0)
    fres = run_probe(ftr, [1.0], decimation=8)
    free_err = float(np.max(np.abs(fres.probes[:, 0, 2] - fres.x) / np.maximum(fres.x, 1.0)))
    ok = vmax <= 0.1 and dual <= 1e-4 and free_err <= 1e-8
    acceptance_line(8, ok, f"variational vs integral form {dual:.1e} <= 1e-4 (|V| <= {vmax:.3g}); "
                           f"V = 0: |dtheta/dk - x|/x {free_err:.1e} <= 1e-8")
    assert ok


def _stage2(two_stage):
    assert two_stage.exit_code == 0, "two-stage construction did not complete"
    return two_stage.payload.stages[1].report


def test_c09_continuity(two_stage, acceptance_line):
    rep = _stage2(two_stage)
    cs = [c for c in rep.checks if ".continuity." in c.name]
    worst = max(c.measured for c in cs)
    limit = two_stage.payload.config.tolerances.continuity_factor * cs[0].predicted
    ok = len(cs) == 4 and all(c.passed for c in cs)
    acceptance_line(9, ok, f"{len(cs)} window checks, worst deviation {worst:.2e} "
                           f"<= 5 g~2^-1/4 = {limit:.3g}")
    assert ok


def test_c10_connection_and_mass(two_stage, acceptance_line):
    rep = _stage2(two_stage)
    ratios = [c.measured for c in rep.checks if c.name.endswith(".ratio") and "connection" in c.name]
    masses = [c.measured for c in rep.checks if c.name.endswith("mass_conservation")]
    audit = rep.check("stage2.interval_audit").passed
    ok = (len(ratios) == 4 and all(0.7 <= r <= 1.3 for r in ratios) and len(masses) == 2
          and all(m >= 0.7 for m in masses) and audit)
    acceptance_line(10, ok, f"connection ratios {min(ratios):.4f}..{max(ratios):.4f} in [0.7, 1.3]; "
                            f"mass ratios >= {min(masses):.4f} >= 0.7; interval audit {audit}")
    assert ok


def test_c11_conditional_integrability(two_stage, split_run, acceptance_line):
    st = two_stage.payload.stages
    sups = [r.report.stage["cond_integral_sup"] for r in st]
    caps = [10 * r.stage.g * r.stage.sum_f for r in st]
    d = split_run[1].stage["cond_integral_sup"]
    dcap = 10 * 50.0 * 1e-3
    ok = all(s <= c for s, c in zip(sups, caps)) and sups[1] < sups[0] and d <= dcap
    acceptance_line(11, ok, f"sup|int V| {sups[0]:.4g} <= {caps[0]:.4g}, {sups[1]:.4g} <= "
                            f"{caps[1]:.4g}, decreasing; default stage 1 {d:.4g} <= {dcap:.4g}")
    assert ok


def test_c12_envelope(two_stage, acceptance_line):
    state = two_stage.payload
    env = state.config.envelope
    xs, vs = state.frozen_potential()
    ratio = float(np.max(np.abs(vs) * (1 + xs) / (10 * np.log(2 + xs))))
    stored = _stage2(two_stage).stage["assembled_envelope_ratio"]
    ok = env.family == "log" and env.c == 10 and ratio < 1 and stored < 1
    acceptance_line(12, ok, f"assembled 2-stage sup |V|(1+x)/h = {ratio:.4f} < 1 "
                            f"(report {stored:.4f}), h = 10 log(2+x)")
    assert ok


def test_c13_performance_and_determinism(tmp_path, acceptance_line):
    digests, times = [], []
    for i in range(2):
        out = tmp_path / f"run{i}"
        t0 = time.perf_counter()
        res = cli.run(["split", "--out", str(out), "-q"])
        times.append(time.perf_counter() - t0)
        assert res.exit_code == 0
        digests.append({p.relative_to(out).as_posix(): p.read_bytes() for p in out.rglob("*")
                        if p.is_file() and p.name != "manifest.json"})
    same = digests[0] == digests[1]
    ok = max(times) < 60 and same
    acceptance_line(13, ok, f"split end to end {times[0]:.1f} s, {times[1]:.1f} s < 60 s; "
                            f"{len(digests[0])} output files byte-identical: {same}")
    assert ok


def test_c14_oracle_cross_check(acceptance_line):
    st = wvn_stage(2.0, 1e-3, 50.0, 1e6)
    h = (math.pi / 2.0) / 200
    n = int(1000.0 / h)
    x_end = n * h
    _, v, _ = tabulate_potential(st, x_end, h / 4)
    _, lr, _ = brute_force_small_instance(v, 2.0, x_end, h)
    p = integrate_stage(st, x_end=x_end).final_state().pairs[0]
    diff = abs(p.log_r2_lo - lr)
    orders = [richardson_order(seed) for seed in (1, 2, 3)]
    ok = diff <= 1e-7 and min(orders) >= 4
    acceptance_line(14, ok, f"|log R^2 engine - brute force| = {diff:.1e} <= 1e-7; Richardson "
                            f"order {min(orders):.2f}..{max(orders):.2f} >= 4")
    assert ok
