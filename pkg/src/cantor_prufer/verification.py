"""Checks on completed stage runs and the report they produce.

Every check records the measured value, the leading-order prediction and
the tolerance it was judged against.  Thresholds live in :class:`Tolerances`
and are echoed into the report.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernel as kern
from .engine import AnchorTrajectory, IntegratorControls, integrate_stage, run_probe
from .errors import DivergentTailEstimate, TailNotConverged
from .potentials import TAIL, EnvelopeSpec, StageParams, check_envelope

REPORT_SCHEMA = "cantor_prufer report v1"


@dataclass(frozen=True)
class Tolerances:
    split_norm_band: tuple = (0.85, 1.15)
    wvn_norm_band: tuple = (0.9, 1.1)
    split_symmetry: float = 0.05
    r2_flip_band: tuple = (0.45, 0.55)
    drive_end_band: tuple = (0.5, 2.0)
    x_flip_factor: float = 1.2
    cert_tol: float = 0.05
    truncation_fraction: float = 1e-6
    cond_int_factor: float = 10.0
    continuity_factor: float = 5.0
    connection_band: tuple = (0.7, 1.3)
    sibling_tol: float = 0.10
    mass_loss: float = 0.3
    halving_band: tuple = (0.4, 0.6)
    norm_budget: float = 0.3
    detune: float = 1e3
    growth_fit_min: float = 0.9

    @classmethod
    def from_mapping(cls, m):
        kw = {}
        for name, default in asdict(cls()).items():
            if name not in m:
                continue
            raw = m[name]
            if isinstance(default, tuple):
                if isinstance(raw, str):
                    raw = [float(t) for t in raw.replace(",", " ").split()]
                kw[name] = tuple(float(t) for t in raw)
            else:
                kw[name] = float(raw)
        return cls(**kw)


@dataclass
class Check:
    name: str
    measured: float
    predicted: float
    tolerance: str
    passed: bool
    gating: bool = True
    note: str = ""

    def as_dict(self):
        return {"check_name": self.name, "measured": self.measured, "predicted": self.predicted,
                "tolerance": self.tolerance, "pass": bool(self.passed), "gating": self.gating,
                "note": self.note}


def _band(name, measured, predicted, lo, hi, gating=True, note=""):
    ok = bool(lo <= measured <= hi)
    return Check(name, float(measured), float(predicted), f"[{lo:g}, {hi:g}]", ok, gating, note)


def _upper(name, measured, predicted, limit, gating=True, note="", strict=False):
    ok = bool(measured < limit) if strict else bool(measured <= limit)
    op = "<" if strict else "<="
    return Check(name, float(measured), float(predicted), f"{op} {limit:.6g}", ok, gating, note)


def _lower(name, measured, predicted, limit, gating=True, note=""):
    return Check(name, float(measured), float(predicted), f">= {limit:.6g}",
                 bool(measured >= limit), gating, note)


# ---------------------------------------------------------------- tail bound

def _tail_geometry(delta_k, cap, ratio, kind):
    if kind == "wvn":
        ell = math.pi / cap
        per = 0.25 * ratio * ell   # decrement per unit m
        p_unit = 0.25 * ratio       # p = p_unit * g / 2
    else:
        c = 0.125 * ratio * cap
        if not c < delta_k:
            raise DivergentTailEstimate("tail rotation rate does not dominate the drive")
        ell = math.pi / math.sqrt(delta_k * delta_k - c * c)
        per = 0.125 * ratio * math.pi / delta_k
        p_unit = per / ell
    return ell, per, p_unit


def tail_decrements(delta_k, g, x, n_terms, *, k_parent=None, k=None, kind="split",
                    kappa=1.0, tail_cap=None):
    """Lower bounds ``b_1 .. b_n`` on the per-interval drop of ``log R^2``."""
    cap = tail_cap if tail_cap is not None else delta_k
    ratio = (k_parent / k) if (k_parent and k) else 1.0
    ell, per, _ = _tail_geometry(delta_k, cap, ratio, kind)
    j = np.arange(1, n_terms + 1, dtype=float)
    y_end = x + j * ell
    return kappa * per * np.minimum(cap, g / (2.0 * y_end))


def tail_norm_bound(current_log_r2, delta_k, g, g_tilde=None, k_parent=None, *, x=None, k=None,
                    kind="split", kappa=1.0, tail_cap=None):
    """Upper bound on ``int_x^inf R^2`` for a channel already in its tail.

    The tail is cut into intervals over which the pair angle advances by pi
    (length ``ell``, about ``pi/dk``); on the n-th interval ``R^2`` is at most
    ``R^2(x) exp(-b_1 - .. - b_n)``.  While ``g/2x`` exceeds the cap the
    decrements are constant and the sum is geometric; beyond that they decay
    like ``1/y`` and the remainder is bounded by a power-law integral with
    exponent ``p = kappa (k_parent/k) (g/16) sqrt(1 - 1/64)``.

    ``x`` defaults to the tail start ``g/f = g/(g_tilde dk)``.  For the WvN
    reference (``kind="wvn"``) there is no pair rotation and the rate is
    ``m/4`` throughout.
    """
    if not (delta_k > 0 and g > 0):
        raise ValueError("need delta_k > 0 and g > 0")
    cap = tail_cap if tail_cap is not None else delta_k
    if x is None:
        if g_tilde is None:
            raise ValueError("give x or g_tilde")
        x = g / (g_tilde * delta_k)
    ratio = (k_parent / k) if (k_parent and k) else 1.0
    ell, per, p_unit = _tail_geometry(delta_k, cap, ratio, kind)
    p = kappa * p_unit * g / 2.0
    if p <= 1.0:
        raise DivergentTailEstimate(f"tail series does not contract: exponent {p:.4g} <= 1 "
                                    f"(g={g} too small)")
    x_star = g / (2.0 * cap)
    n_a = max(0, math.ceil((x_star - x) / ell))
    b = kappa * per * cap
    if n_a > 0:
        sum_a = ell * -math.expm1(-n_a * b) / -math.expm1(-b)
    else:
        sum_a = 0.0
    e_a = math.exp(-n_a * b)
    y = x + n_a * ell + 2.0 * ell
    sum_b = e_a * (ell + y / (p - 1.0))
    return math.exp(current_log_r2) * (sum_a + sum_b)


@dataclass
class TailCertificate:
    energy: float
    x_end: float
    norm_r2: float
    norm_u2: float
    bound: float
    relative: float
    kappa: float
    kappa_measured: bool
    converged: bool

    @property
    def norm_r2_upper(self):
        return self.norm_r2 + self.bound

    @property
    def norm_u2_upper(self):
        return self.norm_u2 + self.bound / self.energy**2

    def as_dict(self):
        return asdict(self)


def _channel_slots(side):
    off = 0 if side == "lo" else 1
    return 2 + off, 4 + off, 6 + off, 8 + off


def measure_tail_kappa(traj: AnchorTrajectory, j, side="lo", min_pred=0.5):
    """Measured tail decrement over the averaged-model prediction, capped at 1.

    Returns ``(kappa, measured)``; with too little recorded tail the
    prediction is below ``min_pred`` and ``kappa = 1`` is assumed.
    """
    pair = traj.stage.pairs[j]
    t0 = traj.stage.tail_start(j)
    m = traj.rec_x >= t0
    if m.sum() < 3:
        return 1.0, False
    xr = traj.rec_x[m]
    b = kern.PAIR_W * j
    il, *_ = _channel_slots(side)
    lr = traj.rec_y[m, b + il]
    d = traj.rec_y[m, b + 1] if pair.kind != "wvn" else np.zeros_like(xr)
    k = (pair.k_lo if side == "lo" else pair.k_hi).value if pair.kind != "wvn" else pair.k_parent.value
    rate = np.minimum(pair.tail_cap, traj.stage.g / (2.0 * xr)) * pair.k_parent.value / k / 8.0
    integrand = rate * (1.0 + np.cos(2.0 * d))
    pred = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(xr)))
    if pred < min_pred:
        return 1.0, False
    actual = float(lr[0] - lr[-1])
    return min(1.0, actual / pred), True


def tail_certificate(traj: AnchorTrajectory, j, side="lo", cert_tol=0.05, kappa=None):
    """Tail bound for one energy of pair ``j`` at the end of the run."""
    pair = traj.stage.pairs[j]
    b = kern.PAIR_W * j
    il, _, inr, inu = _channel_slots(side)
    y = traj.final_y
    if pair.kind == "wvn":
        k = pair.k_parent.value
    else:
        k = (pair.k_lo if side == "lo" else pair.k_hi).value
    nr2, nu2 = float(y[b + inr]), float(y[b + inu])
    measured = False
    if kappa is None:
        kappa, measured = measure_tail_kappa(traj, j, side)
    if int(traj.final_phase[j]) != TAIL:
        bound = math.inf
    else:
        try:
            dk = pair.tail_cap if pair.kind == "wvn" else pair.delta_k
            bound = tail_norm_bound(float(y[b + il]), dk, traj.stage.g, x=traj.x_end,
                                    k_parent=pair.k_parent.value, k=k,
                                    kind=pair.kind, kappa=kappa, tail_cap=pair.tail_cap)
        except DivergentTailEstimate:
            bound = math.inf
    rel = bound / nr2 if nr2 > 0 else math.inf
    return TailCertificate(k, traj.x_end, nr2, nu2, bound, rel, float(kappa), measured,
                           bool(rel <= cert_tol))


def truncation_monitor(stage: StageParams, controls: IntegratorControls | None = None,
                       cert_tol=0.05, min_x=None, truncation_fraction=1e-6):
    """Callback for :func:`integrate_stage` deciding when the tail is certified.

    Stops when every channel either meets the strict truncation rule (log R^2
    down by ``truncation_drop`` from its running maximum and a remaining norm
    below ``truncation_fraction`` of the accumulated one) or carries a tail
    bound below ``cert_tol`` of its norm, and ``x >= min_x``.
    """
    controls = controls or IntegratorControls()
    drop = controls.truncation_drop
    min_x = stage.drive_end if min_x is None else min_x
    npair = len(stage.pairs)
    peak = np.zeros(2 * npair)

    def check(x, y, phase):
        ok = True
        for j, pair in enumerate(stage.pairs):
            b = kern.PAIR_W * j
            sides = ("lo",) if pair.kind == "wvn" else ("lo", "hi")
            for s_i, side in enumerate(sides):
                il, _, inr, _ = _channel_slots(side)
                lr = y[b + il]
                peak[2 * j + s_i] = max(peak[2 * j + s_i], lr)
                if phase[j] != TAIL:
                    ok = False
                    continue
                k = pair.k_parent.value if pair.kind == "wvn" else \
                    (pair.k_lo if side == "lo" else pair.k_hi).value
                dk = pair.tail_cap if pair.kind == "wvn" else pair.delta_k
                try:
                    bound = tail_norm_bound(lr, dk, stage.g, x=x, k_parent=pair.k_parent.value,
                                            k=k, kind=pair.kind, tail_cap=pair.tail_cap)
                except DivergentTailEstimate:
                    ok = False
                    continue
                strict = (peak[2 * j + s_i] - lr >= drop
                          and bound < truncation_fraction * y[b + inr])
                if not (strict or bound <= cert_tol * y[b + inr]):
                    ok = False
        return ok and x >= min_x

    return check


def run_certified(stage: StageParams, init=None, controls=None, model="full", cert_tol=0.05,
                  tail_window=0.2, x_max=None):
    """Integrate a stage until every anchor carries a tail certificate.

    Runs at least ``tail_window`` times the drive extent into the tail so the
    decay is visible, and at most to ``x_max`` (default: 100 drive extents).
    """
    extent = stage.drive_end - stage.x_start
    min_x = stage.drive_end + tail_window * extent
    x_max = x_max or stage.x_start + 100.0 * extent
    mon = truncation_monitor(stage, controls, cert_tol, min_x=min_x)
    return integrate_stage(stage, init=init, x_end=x_max, controls=controls, model=model,
                           tail_check=mon, check_every=max(0.05 * extent, 1.0))


# ------------------------------------------------------------------- masses

def point_mass(norm_u2, certificate=None):
    """Spectral point mass ``1/||u||^2`` of a certified eigenfunction."""
    if certificate is None or not getattr(certificate, "converged", bool(certificate)):
        raise TailNotConverged("no converged tail certificate for this eigenfunction")
    if not norm_u2 > 0:
        raise ValueError("norm_u2 must be positive")
    return 1.0 / norm_u2


# ------------------------------------------------------------ splitting data

def flip_distance_bound(f, g_tilde):
    """Upper bound ``pi f^-1 log(2 g_tilde)`` on the distance to the flip point."""
    return math.pi / f * math.log(2.0 * g_tilde)


def verify_splitting(traj: AnchorTrajectory, stage: StageParams | None = None,
                     tol: Tolerances | None = None, certificates=None):
    """Per-energy records and checks for a completed stage run."""
    stage = stage or traj.stage
    tol = tol or Tolerances()
    records, checks = [], []
    for j, pair in enumerate(stage.pairs):
        sides = ("lo",) if pair.kind == "wvn" else ("lo", "hi")
        certs = certificates[j] if certificates else \
            [tail_certificate(traj, j, s, tol.cert_tol) for s in sides]
        x_flip = traj.x_flip(j)
        fs = traj.event_state(j, "flip") if x_flip is not None else None
        tail_x = stage.tail_start(j)
        # R^2 at the drive end is read at the tail switch record
        ts = traj.event_state(j, "tail")
        for s_i, side in enumerate(sides):
            c = certs[s_i]
            rec = {"pair": j, "side": side, "energy": c.energy, "f": pair.f,
                   "delta_k": pair.delta_k, "kind": pair.kind,
                   "norm_r2": c.norm_r2, "norm_r2_upper": c.norm_r2_upper,
                   "tail_bound": c.bound, "tail_relative": c.relative,
                   "tail_kappa": c.kappa, "tail_converged": c.converged,
                   "norm_u2": c.norm_u2, "norm_u2_upper": c.norm_u2_upper,
                   "point_mass": 1.0 / c.norm_u2, "point_mass_lower": 1.0 / c.norm_u2_upper}
            tag = f"pair{j}.{side}"
            checks.append(_upper(f"{tag}.tail_relative", c.relative, 0.0, tol.cert_tol,
                                 note=f"kappa={c.kappa:.4g}"
                                      + ("" if c.kappa_measured else " (assumed)")))
            if pair.kind == "wvn":
                fn = pair.f * c.norm_r2
                rec["norm_vs_prediction"] = fn
                lo, hi = tol.wvn_norm_band
                checks.append(_band(f"{tag}.f_norm", fn, 1.0, lo, hi))
                checks.append(_band(f"{tag}.f_norm_upper", pair.f * c.norm_r2_upper, 1.0, lo, hi))
            else:
                s0 = traj.pair_state_at_record(0, j)
                r2s = math.exp(getattr(s0, f"log_r2_{side}"))
                q0 = r2s * (pair.delta_k + pair.f * math.sin(s0.delta_theta)) / pair.delta_k
                n0 = getattr(s0, f"norm_r2_{side}")
                rec["r2_conserved_start"] = q0
                lo, hi = tol.split_norm_band
                if s0.delta_theta == 0.0:
                    # fresh start: two eigenfunctions of norm 2 R^2/f each
                    fn = 0.5 * pair.f * (c.norm_r2 - n0) / q0
                    fu = 0.5 * pair.f * (c.norm_r2_upper - n0) / q0
                    name = "half_f_norm"
                else:
                    # started after a split: the small-angle decay is lost, norm is q0/f
                    fn = pair.f * (c.norm_r2 - n0) / q0
                    fu = pair.f * (c.norm_r2_upper - n0) / q0
                    name = "f_norm_from_start"
                rec["norm_vs_prediction"] = fn
                checks.append(_band(f"{tag}.{name}", fn, 1.0, lo, hi))
                checks.append(_band(f"{tag}.{name}_upper", fu, 1.0, lo, hi))
                if fs is not None:
                    r2f = math.exp(getattr(fs, f"log_r2_{side}"))
                    rec["r2_at_flip"] = r2f
                    checks.append(_band(f"{tag}.r2_at_flip", r2f / q0, 0.5, *tol.r2_flip_band,
                                        note="relative to R^2 (dk + f sin dth)/dk at stage start"))
                if ts is not None and fs is not None:
                    r2e = math.exp(getattr(ts, f"log_r2_{side}"))
                    pred = r2f * math.exp(-pair.f * (tail_x - x_flip))
                    rec["r2_at_drive_end"] = r2e
                    rec["r2_at_drive_end_predicted"] = pred
                    lo, hi = tol.drive_end_band
                    # with several pairs the other drives feed the post-flip instability
                    single = len(stage.pairs) == 1
                    checks.append(Check(f"{tag}.r2_drive_end_ratio", r2e / pred, 1.0,
                                        f"[{lo:g}, {hi:g}]", bool(lo <= r2e / pred <= hi),
                                        gating=single,
                                        note="" if single else "single-pair estimate; "
                                        f"cross-talk f^2 L/a = {_cross_talk(stage, j):.3g}"))
                    ceil = math.exp(-stage.g / 2.0) * q0
                    checks.append(_upper(f"{tag}.r2_drive_end_ceiling", r2e, ceil, ceil,
                                         gating=False, note="asymptotic ceiling e^-g/2"))
            records.append(rec)
        if pair.kind != "wvn":
            n_lo, n_hi = certs[0].norm_r2, certs[1].norm_r2
            checks.append(_upper(f"pair{j}.norm_split_asymmetry", abs(n_lo / n_hi - 1.0), 0.0,
                                 tol.split_symmetry))
            if x_flip is None:
                checks.append(Check(f"pair{j}.x_flip", math.nan, flip_distance_bound(pair.f, stage.g_tilde),
                                    "flip reached", False))
            else:
                bound = flip_distance_bound(pair.f, stage.g_tilde)
                checks.append(_upper(f"pair{j}.x_flip", x_flip - stage.x_start, bound,
                                     tol.x_flip_factor * bound))
                for r in records[-2:]:
                    r["x_flip"] = x_flip
                    r["x_flip_bound"] = bound
            ev = [e for e in traj.events if e["pair"] == j]
            checks.append(Check(f"pair{j}.event_order", float(all(e["order_ok"] for e in ev)), 1.0,
                                "flip before tail", all(e["order_ok"] for e in ev)))
    return records, checks


def _cross_talk(stage, j):
    """Second-order drive felt by pair ``j`` from the others over its drive."""
    p = stage.pairs[j]
    out = 0.0
    for i, q in enumerate(stage.pairs):
        if i != j:
            sep = abs(q.k_parent.value - p.k_parent.value)
            out += q.f * p.f * stage.g / p.f / sep
    return out


# ----------------------------------------------------- conditional integral

def conditional_integral_profile(run, v=None):
    """Supremum over ``x`` of ``|int_{x_n}^x V|``.

    ``run`` is an :class:`AnchorTrajectory` (the running integral is part of
    the integrated state) or an array of sample points with ``v`` the
    potential there (trapezoid rule).
    """
    stored = getattr(run, "stored_cond_int_sup", None)
    if stored is not None:
        return stored
    if isinstance(run, AnchorTrajectory):
        if run.int_v.size == 0:
            return 0.0
        return float(np.max(np.abs(run.int_v - run.y0[-1])))
    x = np.asarray(run, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.size < 2:
        return 0.0
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(x))])
    return float(np.max(np.abs(cum)))


def conditional_integral_check(traj: AnchorTrajectory, tol: Tolerances | None = None,
                               previous_sup=None):
    tol = tol or Tolerances()
    s = conditional_integral_profile(traj)
    scale = traj.stage.g * traj.stage.sum_f
    out = [_upper(f"stage{traj.stage.n}.cond_integral_sup", s, scale, tol.cond_int_factor * scale)]
    if previous_sup is not None:
        out.append(_upper(f"stage{traj.stage.n}.cond_integral_decreasing", s, previous_sup,
                          previous_sup, strict=True))
    return s, out


# --------------------------------------------------------------- continuity

def continuity_radius(g_tilde_next, dtheta_dk):
    return 2.0 / math.sqrt(g_tilde_next) / dtheta_dk


def continuity_check(traj: AnchorTrajectory, j, side, probe_k, x_stop, g_tilde_next,
                     tol: Tolerances | None = None, decimation=4, probe_init=None,
                     anchor_init=None, name=None):
    """Worst relative deviation of probe channels from the anchor up to ``x_stop``.

    The anchor is energy ``side`` of pair ``j``.  It is replayed as a probe
    alongside the others so both are read on the same records.
    """
    tol = tol or Tolerances()
    pair = traj.stage.pairs[j]
    k_a = pair.k_parent.value if pair.kind == "wvn" else \
        (pair.k_lo if side == "lo" else pair.k_hi).value
    ks = [k_a] + list(probe_k)
    init = None
    if probe_init is not None:
        init = [anchor_init] + list(probe_init)
    res = run_probe(traj, ks, x_end=x_stop, decimation=decimation, probe_init=init)
    pr = res.probes
    dev_r2 = np.max(np.abs(np.expm1(pr[:, 1:, 1] - pr[:, :1, 1])), axis=0)
    t_a = pr[:, :1, 2]
    t_p = pr[:, 1:, 2]
    good = np.abs(t_a[:, 0]) > 0
    dev_t = np.max(np.abs(t_p[good] / t_a[good] - 1.0), axis=0)
    rec = {"anchor": k_a, "probes": list(map(float, probe_k)), "x_stop": float(x_stop),
           "dev_r2": dev_r2.tolist(), "dev_dtheta_dk": dev_t.tolist(),
           "max_error_norm": res.max_error_norm}
    tag = name or f"pair{j}.{side}.continuity"
    return rec, continuity_checks(rec, g_tilde_next, tol, tag)


def continuity_checks(rec, g_tilde_next, tol: Tolerances | None = None, tag="continuity"):
    """Judge stored continuity deviations against ``1 + c g~^-1/4``."""
    tol = tol or Tolerances()
    limit = tol.continuity_factor * g_tilde_next**-0.25
    rec["limit"] = limit
    rec["worst"] = float(max(max(rec["dev_r2"]), max(rec["dev_dtheta_dk"])))
    return [_upper(f"{tag}.r2_ratio", max(rec["dev_r2"]), g_tilde_next**-0.25, limit),
            _upper(f"{tag}.dtheta_dk_ratio", max(rec["dev_dtheta_dk"]), g_tilde_next**-0.25,
                   limit)]


# -------------------------------------------------- connection and masses

def connection_check(parent_r2_x, parent_dtheta_dk_x, parent_norm_x, child_certs, child_norm_x,
                     tol: Tolerances | None = None, name="connection", g_tilde=None):
    """Child norm beyond the splitting point against ``A = dtheta/dk * R^2``.

    ``child_certs`` are the two children's tail certificates,
    ``child_norm_x`` their accumulated norms at the splitting point.
    """
    tol = tol or Tolerances()
    a_direct = parent_dtheta_dk_x * parent_r2_x
    a_identity = parent_norm_x
    ratios = [(c.norm_r2 - nx) / a_direct for c, nx in zip(child_certs, child_norm_x)]
    pred = 1.0
    checks = []
    lo, hi = tol.connection_band
    for i, r in enumerate(ratios):
        checks.append(_band(f"{name}.child{i}.ratio", r, pred, lo, hi,
                            note="" if g_tilde is None else f"O(g~^-1/4)={g_tilde**-0.25:.3g}"))
    if len(ratios) == 2:
        checks.append(_upper(f"{name}.sibling_asymmetry", abs(ratios[0] / ratios[1] - 1.0), 0.0,
                             tol.sibling_tol))
    checks.append(_upper(f"{name}.A_two_ways", abs(a_identity / a_direct - 1.0), 0.0, 0.01,
                         gating=False, note="direct product vs accumulated norm"))
    rec = {"A_direct": a_direct, "A_identity": a_identity, "ratios": ratios}
    return rec, checks


def mass_conservation_check(parent_cert: TailCertificate, child_certs, tol: Tolerances | None = None,
                            name="mass_conservation"):
    """Summed child point masses over the parent mass (conservative bound)."""
    tol = tol or Tolerances()
    parent_upper = 1.0 / parent_cert.norm_u2
    child_lower = math.fsum(1.0 / c.norm_u2_upper for c in child_certs)
    ratio_lo = child_lower / parent_upper
    ratio = math.fsum(1.0 / c.norm_u2 for c in child_certs) * parent_cert.norm_u2
    chk = _lower(name, ratio_lo, 1.0, 1.0 - tol.mass_loss,
                 note=f"central estimate {ratio:.6g}")
    return {"ratio_lower": ratio_lo, "ratio": ratio}, [chk]


def probe_growth(traj: AnchorTrajectory, k, x_from=None, n_fit=64):
    """Least-squares slope and coefficient of determination of ``norm_r2(x)``."""
    x_from = traj.stage.drive_end if x_from is None else x_from
    res = run_probe(traj, [k])
    m = res.x >= x_from
    xs, ns = res.x[m], res.probes[m, 0, 3]
    if xs.size < 3:
        return math.nan, math.nan
    idx = np.unique(np.linspace(0, xs.size - 1, min(n_fit, xs.size)).astype(int))
    xs, ns = xs[idx], ns[idx]
    slope, icpt = np.polyfit(xs, ns, 1)
    fit = slope * xs + icpt
    ss_res = float(np.sum((ns - fit) ** 2))
    ss_tot = float(np.sum((ns - ns.mean()) ** 2))
    return float(slope), 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan


# -------------------------------------------------------------- the report

@dataclass
class VerificationReport:
    stage_id: int
    energies: list
    stage: dict
    checks: list
    tolerances: dict
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.gating)

    def failures(self):
        return [c for c in self.checks if c.gating and not c.passed]

    def check(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"schema": REPORT_SCHEMA, "stage_id": self.stage_id, "pass": self.passed,
                "energies": self.energies, "stage": self.stage,
                "checks": [c.as_dict() for c in self.checks], "tolerances": self.tolerances,
                "extra": self.extra}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# {REPORT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check_name", "measured", "predicted", "tolerance", "pass"])
        for c in self.checks:
            w.writerow([c.name, repr(c.measured), repr(c.predicted), c.tolerance,
                        "PASS" if c.passed else ("FAIL" if c.gating else "INFO")])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d):
        checks = [Check(c["check_name"], c["measured"], c["predicted"], c["tolerance"], c["pass"],
                        c.get("gating", True), c.get("note", "")) for c in d["checks"]]
        return cls(d["stage_id"], d["energies"], d["stage"], checks, d["tolerances"],
                   d.get("extra", {}))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else repr(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def verify_stage(traj: AnchorTrajectory, tol: Tolerances | None = None,
                 envelope: EnvelopeSpec | None = None, probes=False, previous_sup=None):
    """Full single-stage report."""
    tol = tol or Tolerances()
    stage = traj.stage
    records, checks = verify_splitting(traj, stage, tol)
    sup, cchecks = conditional_integral_check(traj, tol, previous_sup)
    checks += cchecks
    info = {"n": stage.n, "g": stage.g, "g_tilde": stage.g_tilde, "x_start": stage.x_start,
            "drive_end": stage.drive_end, "x_end": traj.x_end, "n_steps": traj.n_steps,
            "n_rejected": traj.n_rejected, "order_failures": traj.order_failures,
            "cond_integral_sup": sup, "truncated": traj.stopped_by_truncation}
    checks.append(Check(f"stage{stage.n}.order_failures", float(traj.order_failures), 0.0, "== 0",
                        traj.order_failures == 0))
    if envelope is not None:
        res = check_envelope(traj.xs, traj.v, envelope)
        info["envelope_ratio"] = res.ratio
        info["envelope_witness"] = res.x_witness
        checks.append(_upper(f"stage{stage.n}.envelope", res.ratio, 0.0, 1.0, strict=True))
    if probes:
        for j, pair in enumerate(stage.pairs):
            if pair.kind == "wvn":
                continue
            for side, sign in (("lo", -1.0), ("hi", 1.0)):
                e = pair.k_lo if side == "lo" else pair.k_hi
                kd = e.value + sign * tol.detune * pair.delta_k
                slope, fit = probe_growth(traj, kd)
                tag = f"pair{j}.{side}.detuned_probe"
                info[f"{tag}.slope"] = slope
                info[f"{tag}.fit"] = fit
                checks.append(Check(f"{tag}.slope", slope, math.nan, "> 0", bool(slope > 0)))
                checks.append(_lower(f"{tag}.fit_r2", fit, 1.0, tol.growth_fit_min))
                for r in records:
                    if r["pair"] == j and r["side"] == side:
                        r["detuned_probe_growth"] = slope
    return VerificationReport(stage.n, records, info, checks, _jsonable(asdict(tol)))


def calibrate(stage: StageParams, controls: IntegratorControls | None = None, factor=10.0,
              tol: Tolerances | None = None, runner=None):
    """Rerun a stage at tighter integrator tolerance and compare every check.

    A measured quantity whose change under tightening is small next to its
    deviation from the prediction is limited by the model, not the method.
    """
    controls = controls or IntegratorControls()
    runner = runner or (lambda s, c: run_certified(s, controls=c, cert_tol=(tol or Tolerances()).cert_tol))
    rep1 = verify_stage(runner(stage, controls), tol)
    rep2 = verify_stage(runner(stage, controls.tightened(factor)), tol)
    rows = []
    for c1 in rep1.checks:
        try:
            c2 = rep2.check(c1.name)
        except KeyError:
            continue
        if not (math.isfinite(c1.measured) and math.isfinite(c2.measured)):
            continue
        change = abs(c2.measured - c1.measured)
        dev = abs(c1.measured - c1.predicted) if math.isfinite(c1.predicted) else math.nan
        kind = "model" if (math.isfinite(dev) and change <= 0.1 * dev) else "method"
        rows.append({"check_name": c1.name, "measured": c1.measured, "measured_tight": c2.measured,
                     "change": change, "deviation": dev, "limited_by": kind})
    return rep1, rep2, rows
