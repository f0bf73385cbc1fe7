import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cantor_prufer.construction import (EnergyTree, TreeNode, builtin_profile,
                                        compute_growth_certificates, config_to_ini,
                                        interval_audit, load_config, next_pair_params,
                                        run_construction)
from cantor_prufer.engine import integrate_stage
from cantor_prufer.errors import ConfigError, StageTooShort
from cantor_prufer.potentials import Energy, PairParams, StageParams


def test_config_round_trip(default_cfg):
    assert load_config(config_to_ini(default_cfg), base=None) == default_cfg
    two = builtin_profile("two-stage")
    assert load_config(config_to_ini(two), base=None) == two


def test_config_overrides_and_base():
    cfg = load_config("[profile]\nbase = two-stage\ng = 30\n[tolerances]\ncert_tol = 0.01\n")
    assert cfg.k0 == 0.5 and cfg.g == 30.0
    assert cfg.tolerances.cert_tol == 0.01


@pytest.mark.parametrize("text", [
    "[profile\n",
    "[nosuch]\na = 1\n",
    "[profile]\nwhat = 1\n",
    "[profile]\nf = abc\n",
    "[profile]\nf = -1\n",
    "[mode]\nmode = loose\n",
    "[tolerances]\nnope = 1\n",
    "[envelope]\nfamily = power\neps = 2\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        load_config(text)


def test_unknown_profile():
    with pytest.raises(ConfigError):
        builtin_profile("nosuch")


def test_interval_size():
    nd = TreeNode(1, 0, Energy(2.0), 0, 3e-3, 1e-3)
    lo, hi = nd.interval
    assert lo == pytest.approx(2 - 5e-4, abs=1e-15)
    assert hi == pytest.approx(2 + 5e-4, abs=1e-15)


def _tree(pairs):
    tree = EnergyTree.root(2.0)
    tree.add_stage(StageParams(1, 50.0, 1e6, 0.0, tuple(pairs)))
    return tree


def test_audit_disjoint_and_overlap():
    assert interval_audit(_tree([PairParams(Energy(2.0), 1e-3, 1e-9)])).passed
    # two pairs whose doubled intervals overlap
    a = PairParams(Energy(2.0), 1e-3, 3e-3)
    b = PairParams(Energy(2.0, 2e-3), 1e-3, 3e-3)
    audit = interval_audit(_tree([a, b]))
    assert not audit.disjoint and audit.violations


def test_audit_nesting_and_summability():
    tree = _tree([PairParams(Energy(2.0), 1e-3, 1e-9)])
    kids = [PairParams(nd.energy, 1e-3, 1e-12) for nd in tree.nodes[1]]
    tree.add_stage(StageParams(2, 60.0, 1e9, 1e6, tuple(kids)))
    audit = interval_audit(tree)
    assert audit.passed
    # a stage-2 split as wide as its parent breaks both nesting and summability
    bad = _tree([PairParams(Energy(2.0), 1e-3, 1e-9)])
    bad.add_stage(StageParams(2, 60.0, 1e9, 1e6,
                              tuple(PairParams(nd.energy, 1e-3, 1e-9) for nd in bad.nodes[1])))
    audit = interval_audit(bad)
    assert not audit.nested and not audit.summable


def test_audit_needs_a_split():
    with pytest.raises(ValueError):
        interval_audit(EnergyTree.root(2.0))


def test_next_pair_params():
    f, dk = next_pair_params(1e6, 1e6)
    assert f == pytest.approx(1e-3, rel=1e-15)
    assert dk == pytest.approx(1e-9, rel=1e-15)


def test_children_offsets():
    p = PairParams(Energy(2.0), 1e-3, 1e-9)
    assert p.k_lo.base == 2.0 and p.k_lo.offset == -5e-10
    assert p.k_hi.offset == 5e-10


@given(t=st.floats(1.0, 1e12), gt=st.floats(10.0, 1e15))
def test_schedule_consistency(t, gt):
    f, dk = next_pair_params(t, gt)
    assert abs(dk * gt - f) <= 4e-16 * f


def test_max_stage_zero(default_cfg):
    state, reports = run_construction(default_cfg, max_stage=0)
    assert reports == [] and state.n == 0
    assert state.tree.depth == 0 and len(state.tree.leaves()) == 1


def test_max_stage_one(split_run):
    state, report = split_run
    assert report.passed and state.passed
    assert len(state.tree.leaves()) == 2
    masses = [nd.mass for nd in state.tree.leaves()]
    assert abs(masses[0] / masses[1] - 1) <= 0.05
    # norm budget: f ||R||^2 <= 2 (1 + budget)
    assert report.check("stage1.norm_budget").passed


def test_two_stage_tree(two_stage):
    assert two_stage.exit_code == 0
    state = two_stage.payload
    leaves = state.tree.leaves()
    assert len(leaves) == 4
    parents = state.tree.nodes[1]
    for j, par in enumerate(parents):
        # stage-2 pair j splits stage-1 energy j
        kids = [nd for nd in leaves if nd.parent == j]
        assert len(kids) == 2
        lo, hi = par.interval
        assert all(lo < nd.energy.value < hi for nd in kids)
    rep = state.stages[1].report
    for i in range(2):
        assert rep.check(f"handoff.k{i}.mass_conservation").measured >= 0.7
    assert rep.check("stage2.interval_audit").passed


def test_schedule_and_localization_on_realized_tree(two_stage):
    tree = two_stage.payload.tree
    for level in tree.nodes[1:]:
        for nd in level:
            assert nd.energy.value > 0
    for stage_rec in two_stage.payload.stages:
        for p in stage_rec.stage.pairs:
            assert abs(p.delta_k * stage_rec.stage.g_tilde - p.f) <= 4e-16 * p.f
            # children centred on the parent to one ulp of the offset
            mid = 0.5 * (p.k_lo.offset + p.k_hi.offset)
            assert p.k_lo.base == p.k_parent.base == p.k_hi.base
            assert abs(mid - p.k_parent.offset) <= np.spacing(abs(p.k_parent.offset)) + 1e-300
    d1 = min(nd.delta_k for nd in tree.nodes[1])
    d2 = max(nd.delta_k for nd in tree.nodes[2])
    assert d2 < d1 / 3


def test_prefix_stability(two_stage):
    cfg = builtin_profile("two-stage")
    state1, _ = run_construction(cfg, max_stage=1)
    a = state1.stages[0].traj
    b = two_stage.payload.stages[0].traj
    x2 = two_stage.payload.stages[1].stage.x_start
    n = int(np.searchsorted(a.xs, x2))
    assert n > 1000
    assert a.xs[:n].tobytes() == b.xs[:n].tobytes()
    assert a.v[:n].tobytes() == b.v[:n].tobytes()
    xs, vs = two_stage.payload.frozen_potential()
    m = xs <= x2
    assert vs[m].tobytes() == b.v[b.xs <= x2].tobytes()


def test_growth_certificates(two_stage, split_run):
    rec = two_stage.payload.stages[0]
    gc = rec.growth
    p = rec.stage.pairs[0]
    for b, e in zip(gc.beta, (p.k_lo, p.k_hi)):
        assert b == pytest.approx(p.k_parent.value * 24.0 / (16 * e.value), rel=1e-14)
        # k close to its parent gives beta = g/16
        assert b == pytest.approx(24.0 / 16, rel=2 * p.delta_k / e.value)
    assert gc.envelopes_hold and not gc.special_case
    with pytest.raises(StageTooShort):
        compute_growth_certificates(split_run[0].stages[0].traj)


def test_growth_certificates_free_case():
    # V vanishes in floating point; g is scaled down so the drive extent g/f stays finite
    p = PairParams(Energy(2.0), 1e-300, 1e-310)
    stage = StageParams(1, 1e-297, 1e6, 0.0, (p,))
    tr = integrate_stage(stage, x_end=4.0 * stage.drive_end)
    gc = compute_growth_certificates(tr, a_next=1e-3)
    assert gc.special_case and gc.beta == [0.0, 0.0]
    assert gc.envelopes_hold
    col = tr.column(0, "dtheta_dk_lo")
    assert np.max(np.abs(col - (tr.rec_x - tr.x0)) / np.maximum(tr.rec_x, 1.0)) <= 1e-8
