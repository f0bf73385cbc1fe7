"""Joint Prufer integration for a stage potential.

The anchor energies of a stage are integrated together because the potential
is built from their angles.  Everything else (probe energies, the children
of the next stage before they start driving) is obtained by replaying the
recorded step grid, which reproduces the anchors exactly and lets passive
channels ride along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as kern
from .errors import EventNotBracketed, ProbeOutOfRange, StepSizeUnderflow
from .potentials import POST_FLIP, PRE_FLIP, TAIL, StageParams

PAIR_FIELDS = ("theta_lo", "delta_theta", "log_r2_lo", "log_r2_hi", "dtheta_dk_lo",
               "dtheta_dk_hi", "norm_r2_lo", "norm_r2_hi", "norm_u2_lo", "norm_u2_hi")
PROBE_FIELDS = ("theta", "log_r2", "dtheta_dk", "norm_r2", "norm_u2", "weighted_norm")


def prufer_rhs(k, theta, v):
    """Rates ``(theta', (log R^2)')`` of the Prufer system."""
    s = math.sin(theta)
    return k - v / k * s * s, v / k * math.sin(2.0 * theta)


def variational_rhs(k, theta, dtheta_dk, v):
    """Rate of ``d theta / d k``."""
    s = math.sin(theta)
    return 1.0 + v / (k * k) * s * s - v / k * math.sin(2.0 * theta) * dtheta_dk


@dataclass(frozen=True)
class IntegratorControls:
    rel_tol: float = 1e-10
    abs_tol_angle: float = 1e-12
    abs_tol_logr2: float = 1e-10
    abs_tol_norm: float = 1e-12
    max_step_fraction: float = 0.125
    event_tol: float = 1e-10
    truncation_drop: float = 40.0
    decimation: int = 64
    h_min: float = 1e-13
    theta0: float = 0.0

    def atol_vector(self, npair, nprobe):
        pa = [self.abs_tol_angle, self.abs_tol_angle, self.abs_tol_logr2, self.abs_tol_logr2,
              self.abs_tol_angle, self.abs_tol_angle] + [self.abs_tol_norm] * 4
        pr = [self.abs_tol_angle, self.abs_tol_logr2, self.abs_tol_angle,
              self.abs_tol_norm, self.abs_tol_norm, self.abs_tol_norm]
        return np.array(pa * npair + pr * nprobe + [self.abs_tol_norm])

    def tightened(self, factor=10.0):
        return IntegratorControls(
            rel_tol=self.rel_tol / factor, abs_tol_angle=self.abs_tol_angle / factor,
            abs_tol_logr2=self.abs_tol_logr2 / factor, abs_tol_norm=self.abs_tol_norm / factor,
            max_step_fraction=self.max_step_fraction, event_tol=self.event_tol,
            truncation_drop=self.truncation_drop, decimation=self.decimation,
            h_min=self.h_min, theta0=self.theta0)


@dataclass
class PruferPoint:
    x: float
    theta: float
    log_r2: float
    dtheta_dk: float
    norm_r2: float
    norm_u2: float
    weighted_norm: float = math.nan

    @property
    def dtheta_dk_integral(self) -> float:
        """``d theta/d k`` from ``R^-2 int R^2 (1 + V sin^2/k^2)`` (probes only)."""
        return self.weighted_norm * math.exp(-self.log_r2)


@dataclass
class PairState:
    theta_lo_mod: float
    winding: int
    delta_theta: float
    log_r2_lo: float
    log_r2_hi: float
    dtheta_dk_lo: float
    dtheta_dk_hi: float
    norm_r2_lo: float
    norm_r2_hi: float
    norm_u2_lo: float
    norm_u2_hi: float
    phase: int = PRE_FLIP
    x_flip: float | None = None

    @property
    def theta_lo(self) -> float:
        """Unwrapped angle (loses the exactness of the split representation)."""
        return self.winding * math.pi + self.theta_lo_mod

    @property
    def theta_hi(self) -> float:
        return self.theta_lo + self.delta_theta

    def vector(self):
        return [self.theta_lo_mod, self.delta_theta, self.log_r2_lo, self.log_r2_hi,
                self.dtheta_dk_lo, self.dtheta_dk_hi, self.norm_r2_lo, self.norm_r2_hi,
                self.norm_u2_lo, self.norm_u2_hi]

    @classmethod
    def from_slots(cls, v, winding, phase=PRE_FLIP, x_flip=None):
        return cls(float(v[0]), int(winding), *map(float, v[1:10]), phase=phase, x_flip=x_flip)

    def lo(self, x) -> PruferPoint:
        return PruferPoint(x, self.theta_lo, self.log_r2_lo, self.dtheta_dk_lo,
                           self.norm_r2_lo, self.norm_u2_lo)

    def hi(self, x) -> PruferPoint:
        return PruferPoint(x, self.theta_hi, self.log_r2_hi, self.dtheta_dk_hi,
                           self.norm_r2_hi, self.norm_u2_hi)


def _fresh_pair(theta0=0.0):
    w, t = divmod(theta0, math.pi)
    return PairState(t, int(w), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class JointState:
    x: float
    pairs: list
    probes: list = field(default_factory=list)
    int_v: float = 0.0

    @classmethod
    def initial(cls, npair, theta0=0.0, x=0.0):
        return cls(x=x, pairs=[_fresh_pair(theta0) for _ in range(npair)])


@dataclass
class AnchorTrajectory:
    """Accepted-step record of one stage run.

    ``xs``/``hs``/``v``/``int_v`` are per accepted step; ``rec_*`` is the
    decimated full state (every ``decimation``-th step plus every event).
    """

    stage: StageParams
    controls: IntegratorControls
    model: int
    x0: float
    y0: np.ndarray
    wind0: np.ndarray
    phase0: np.ndarray
    xs: np.ndarray
    hs: np.ndarray
    v: np.ndarray
    int_v: np.ndarray
    rec_x: np.ndarray
    rec_y: np.ndarray
    rec_w: np.ndarray
    rec_step: np.ndarray
    events: list
    order_failures: int
    n_rejected: int
    n_rhs: int
    final_phase: np.ndarray
    final_y: np.ndarray
    final_wind: np.ndarray
    stopped_by_truncation: bool = False

    @property
    def npair(self):
        return len(self.stage.pairs)

    @property
    def x_end(self):
        return float(self.xs[-1]) if self.xs.size else self.x0

    @property
    def n_steps(self):
        return int(self.xs.size)

    def column(self, j, name):
        """Recorded series of one pair field."""
        return self.rec_y[:, kern.PAIR_W * j + PAIR_FIELDS.index(name)]

    def x_flip(self, j):
        for e in self.events:
            if e["pair"] == j and e["kind"] == "flip":
                return e["x"]
        return None

    def event_state(self, j, kind):
        """Full pair state recorded at an event (flip or tail switch)."""
        for e in self.events:
            if e["pair"] == j and e["kind"] == kind:
                r = int(np.searchsorted(self.rec_step, e["step"] + 1))
                return self.pair_state_at_record(r, j)
        return None

    def pair_state_at_record(self, r, j):
        b = kern.PAIR_W * j
        return PairState.from_slots(self.rec_y[r, b:b + 10], self.rec_w[r, j],
                                    phase=self.phase_at_step(int(self.rec_step[r]))[j])

    def final_state(self) -> JointState:
        pairs = []
        for j in range(self.npair):
            b = kern.PAIR_W * j
            pairs.append(PairState.from_slots(self.final_y[b:b + 10], self.final_wind[j],
                                              phase=int(self.final_phase[j]),
                                              x_flip=self.x_flip(j)))
        return JointState(self.x_end, pairs, int_v=float(self.final_y[-1]))

    def switches(self):
        """Phase switches as arrays (step index, pair, new phase)."""
        st, pr, ph = [], [], []
        for e in self.events:
            st.append(e["step"])
            pr.append(e["pair"])
            ph.append(POST_FLIP if e["kind"] == "flip" else TAIL)
        return (np.array(st, dtype=np.int64), np.array(pr, dtype=np.int64),
                np.array(ph, dtype=np.int64))

    def phase_at_step(self, nstep):
        """Phases in force after ``nstep`` accepted steps."""
        ph = self.phase0.copy()
        for e in self.events:
            if e["step"] < nstep:
                ph[e["pair"]] = POST_FLIP if e["kind"] == "flip" else TAIL
        return ph

    def pair_table(self):
        return _pair_table(self.stage)


def _pair_table(stage: StageParams):
    pk = np.empty((len(stage.pairs), 8))
    for j, p in enumerate(stage.pairs):
        pk[j, kern.K_LO] = p.k_lo.value if p.kind != "wvn" else p.k_parent.value
        pk[j, kern.K_HI] = p.k_hi.value if p.kind != "wvn" else p.k_parent.value
        pk[j, kern.DK] = p.delta_k
        pk[j, kern.KP] = p.k_parent.value
        pk[j, kern.F] = p.f
        pk[j, kern.TAILCAP] = p.tail_cap
        pk[j, kern.TAIL_AT] = stage.tail_start(j)
        pk[j, kern.FLIP_AT] = p.flip_target
    return pk


def _passive_table(pairs):
    """Parameter rows for passive pairs given as (k_lo, k_hi, delta_k)."""
    pk = np.zeros((len(pairs), 8))
    for j, (klo, khi, dk) in enumerate(pairs):
        pk[j, kern.K_LO] = klo
        pk[j, kern.K_HI] = khi
        pk[j, kern.DK] = dk
        pk[j, kern.TAIL_AT] = math.inf
        pk[j, kern.FLIP_AT] = math.inf
    return pk


def _state_vector(state: JointState, nprobe=0):
    v = []
    wind = []
    for p in state.pairs:
        v.extend(p.vector())
        wind.append(p.winding)
    v.extend([0.0] * (kern.PROBE_W * nprobe))
    v.append(state.int_v)
    return np.array(v, dtype=float), np.array(wind, dtype=np.int64)


MODELS = {"full": kern.MODEL_FULL, "idealized": kern.MODEL_IDEAL}


def integrate_stage(stage: StageParams, init: JointState | None = None, x_end: float | None = None,
                    controls: IntegratorControls | None = None, model: str = "full",
                    tail_check=None, check_every: float | None = None) -> AnchorTrajectory:
    """Integrate the anchor pairs of ``stage`` from its start to ``x_end``.

    ``tail_check(traj_so_far_state)`` is consulted every ``check_every``
    length units once all pairs are in the tail; returning True stops the
    run early (truncation).  Giving ``check_every`` alone keeps the same
    step boundaries without the check.
    """
    controls = controls or IntegratorControls()
    if init is None:
        init = JointState.initial(len(stage.pairs), controls.theta0, stage.x_start)
    if abs(init.x - stage.x_start) > 0:
        raise ValueError("initial state must sit at the stage start")
    if x_end is None:
        x_end = stage.drive_end
    if not x_end > init.x:
        raise ValueError("x_end must exceed the start point")
    npair = len(stage.pairs)
    pk = _pair_table(stage)
    y, wind = _state_vector(init)
    y0, wind0 = y.copy(), wind.copy()
    phase = np.array([p.phase for p in init.pairs], dtype=np.int64)
    phase0 = phase.copy()
    comp = np.zeros_like(y)
    n = y.size
    K = np.empty((13, n))
    mdl = MODELS[model]
    kern.rhs(init.x, y, K[0], pk, npair, 0, np.empty(0), phase, stage.g, mdl)
    atol = controls.atol_vector(npair, 0)
    hmax = controls.max_step_fraction * math.pi / stage.k_max
    est = int((x_end - init.x) / hmax * 1.05) + 64
    cap = min(max(est, 1024), 1 << 21)
    xs = np.empty(cap)
    hs = np.empty(cap)
    vs = np.empty(cap)
    ivs = np.empty(cap)
    rcap = cap // controls.decimation + 64
    rec_x = np.empty(rcap)
    rec_y = np.empty((rcap, n))
    rec_w = np.empty((rcap, npair), dtype=np.int64)
    rec_step = np.empty(rcap, dtype=np.int64)
    ecap = 4 * npair + 8
    ev_step = np.empty(ecap, dtype=np.int64)
    ev_pair = np.empty(ecap, dtype=np.int64)
    ev_kind = np.empty(ecap, dtype=np.int64)
    ev_x = np.empty(ecap)
    st_x = np.array([init.x])
    st_h = np.array([hmax])
    nstep = np.zeros(1, dtype=np.int64)
    nrec = np.zeros(1, dtype=np.int64)
    nev = np.zeros(1, dtype=np.int64)
    order_fail = np.zeros(1, dtype=np.int64)
    # initial record
    rec_x[0] = init.x
    rec_y[0] = y
    rec_w[0] = wind
    rec_step[0] = 0
    nrec[0] = 1
    nrej = 0
    nrhs = 1
    truncated = False
    drive_end = stage.drive_end
    # chunk boundaries cut steps, so they depend only on the stage and check_every
    chunked = tail_check is not None or check_every is not None
    while True:
        target = x_end
        if chunked and st_x[0] >= drive_end:
            target = min(x_end, st_x[0] + (check_every or 0.05 * (x_end - init.x)))
        elif chunked:
            target = min(x_end, drive_end)
        status, rj, nr = kern.integrate(
            st_x, y, comp, wind, K, st_h, target, pk, npair, phase, stage.g, mdl,
            atol, controls.rel_tol, hmax, controls.h_min, controls.event_tol,
            controls.decimation, xs, hs, vs, ivs, nstep, rec_x, rec_y, rec_w, rec_step, nrec,
            ev_step, ev_pair, ev_kind, ev_x, nev, order_fail)
        nrej += rj
        nrhs += nr
        if status == kern.ST_FULL:
            grow = max(xs.size // 2, 1024)
            xs, hs, vs, ivs = (np.concatenate([a, np.empty(grow)]) for a in (xs, hs, vs, ivs))
            rg = grow // controls.decimation + 64
            rec_x = np.concatenate([rec_x, np.empty(rg)])
            rec_y = np.concatenate([rec_y, np.empty((rg, n))])
            rec_w = np.concatenate([rec_w, np.empty((rg, npair), dtype=np.int64)])
            rec_step = np.concatenate([rec_step, np.empty(rg, dtype=np.int64)])
            ev_step, ev_pair, ev_kind = (np.concatenate([a, np.empty(ecap, dtype=np.int64)])
                                         for a in (ev_step, ev_pair, ev_kind))
            ev_x = np.concatenate([ev_x, np.empty(ecap)])
            continue
        if status == kern.ST_UNDERFLOW:
            raise StepSizeUnderflow(float(st_x[0]), float(st_h[0]))
        if status == kern.ST_NOT_BRACKETED:
            j = int(ev_pair[nev[0]])
            raise EventNotBracketed(f"pair {j}: delta_theta already past pi - alpha at step start",
                                    pair_index=j, x=float(ev_x[nev[0]]))
        if st_x[0] >= x_end:
            break
        if tail_check is not None and st_x[0] >= drive_end:
            # the last record sits at st_x because target was reached
            if tail_check(float(st_x[0]), y.copy(), phase.copy()):
                truncated = True
                if rec_x[nrec[0] - 1] != st_x[0]:
                    rec_x[nrec[0]] = st_x[0]
                    rec_y[nrec[0]] = y
                    rec_w[nrec[0]] = wind
                    rec_step[nrec[0]] = nstep[0]
                    nrec[0] += 1
                break
    ns, nr_, ne = int(nstep[0]), int(nrec[0]), int(nev[0])
    kinds = {0: "flip", 1: "tail", 2: "tail"}
    events = [{"step": int(ev_step[i]), "pair": int(ev_pair[i]), "kind": kinds[int(ev_kind[i])],
               "x": float(ev_x[i]), "order_ok": int(ev_kind[i]) != 2} for i in range(ne)]
    return AnchorTrajectory(
        stage=stage, controls=controls, model=mdl, x0=init.x, y0=y0, wind0=wind0, phase0=phase0,
        xs=xs[:ns].copy(), hs=hs[:ns].copy(), v=vs[:ns].copy(), int_v=ivs[:ns].copy(),
        rec_x=rec_x[:nr_].copy(), rec_y=rec_y[:nr_].copy(), rec_w=rec_w[:nr_].copy(),
        rec_step=rec_step[:nr_].copy(), events=events, order_failures=int(order_fail[0]),
        n_rejected=nrej, n_rhs=nrhs, final_phase=phase.copy(), final_y=y.copy(),
        final_wind=wind.copy(), stopped_by_truncation=truncated)


@dataclass
class ReplayResult:
    """Decimated history of passive channels replayed on an anchor grid."""

    x: np.ndarray
    pairs: np.ndarray     # (nrec, npas, 10)
    pair_wind: np.ndarray
    probes: np.ndarray    # (nrec, nprobe, 6)
    probe_wind: np.ndarray
    anchors: np.ndarray   # (nrec, nact, 10)
    anchor_wind: np.ndarray
    int_v: np.ndarray
    step: np.ndarray
    x_reached: float
    max_error_norm: float
    probe_k: np.ndarray

    def probe_point(self, i, r=-1) -> PruferPoint:
        v = self.probes[r, i]
        th = self.probe_wind[r, i] * math.pi + v[0]
        return PruferPoint(float(self.x[r]), th, *map(float, v[1:]))

    def pair_state(self, j, r=-1) -> PairState:
        return PairState.from_slots(self.pairs[r, j], self.pair_wind[r, j])

    def anchor_state(self, j, r=-1) -> PairState:
        return PairState.from_slots(self.anchors[r, j], self.anchor_wind[r, j])


def _replay_core(traj, x0, y_anchor, wind_anchor, phase, xs, hs, sw_st, sw_pr, sw_ph, x_stop,
                 probe_k, npas, passive_pk=None, passive_init=None, decim=None,
                 probe_init=None):
    nact = traj.npair
    nprobe = probe_k.size
    pk = traj.pair_table()
    if npas:
        pk = np.vstack([pk, passive_pk])
    na = kern.PAIR_W * nact
    npv = kern.PAIR_W * npas
    y = np.zeros(na + npv + kern.PROBE_W * nprobe + 1)
    y[:na] = y_anchor[:na]
    y[-1] = y_anchor[-1]
    wind = np.zeros(nact + npas + nprobe, dtype=np.int64)
    wind[:nact] = wind_anchor[:nact]
    if npas:
        vecs, winds = passive_init
        y[na:na + npv] = vecs
        wind[nact:nact + npas] = winds
    base = na + npv
    th0 = traj.controls.theta0
    for i in range(nprobe):
        b = base + kern.PROBE_W * i
        if probe_init is not None:
            pt = probe_init[i]
            w, t = divmod(pt.theta, math.pi)
            y[b:b + kern.PROBE_W] = [t, pt.log_r2, pt.dtheta_dk, pt.norm_r2, pt.norm_u2,
                                     pt.weighted_norm]
        else:
            w, t = divmod(th0, math.pi)
            y[b] = t
        wind[nact + npas + i] = int(w)
    comp = np.zeros_like(y)
    decim = decim or traj.controls.decimation
    cap = xs.size // decim + 16 + sw_st.size
    rec_x = np.empty(cap)
    rec_y = np.empty((cap, y.size))
    rec_w = np.empty((cap, wind.size), dtype=np.int64)
    rec_step = np.empty(cap, dtype=np.int64)
    atol = traj.controls.atol_vector(nact + npas, nprobe)
    nrec, xr, worst = kern.replay(x0, y, comp, wind, pk, nact, npas, probe_k, phase.copy(),
                                  traj.stage.g, traj.model, xs, hs, sw_st, sw_pr, sw_ph, x_stop,
                                  decim, rec_x, rec_y, rec_w, rec_step, atol,
                                  traj.controls.rel_tol)
    rec_x, rec_y, rec_w, rec_step = rec_x[:nrec], rec_y[:nrec], rec_w[:nrec], rec_step[:nrec]
    return ReplayResult(
        x=rec_x,
        anchors=rec_y[:, :na].reshape(nrec, nact, kern.PAIR_W),
        anchor_wind=rec_w[:, :nact],
        pairs=rec_y[:, na:na + npv].reshape(nrec, npas, kern.PAIR_W),
        pair_wind=rec_w[:, nact:nact + npas],
        probes=rec_y[:, base:base + kern.PROBE_W * nprobe].reshape(nrec, nprobe, kern.PROBE_W),
        probe_wind=rec_w[:, nact + npas:],
        int_v=rec_y[:, -1], step=rec_step, x_reached=float(xr), max_error_norm=float(worst),
        probe_k=probe_k), nrec, worst


def run_probe(traj: AnchorTrajectory, k, x_end=None, passive_pairs=(), decimation=None,
              probe_init=None):
    """Integrate probe energies (and passive pairs) against a recorded stage run.

    ``k`` may be a scalar or a sequence.  Probes start from ``theta0`` with
    zero accumulators unless ``probe_init`` gives one :class:`PruferPoint`
    per probe at the stage start.  ``passive_pairs`` is a list of
    ``(k_lo, k_hi, delta_k, init_state)`` tuples; these carry their own
    angle difference like anchors but do not drive the potential.
    """
    probe_k = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(probe_k <= 0):
        raise ValueError("probe energies must be positive")
    x_end = traj.x_end if x_end is None else float(x_end)
    if x_end > traj.x_end * (1 + 1e-15) or x_end < traj.x0:
        raise ProbeOutOfRange(f"x_end={x_end} outside the anchor record [{traj.x0}, {traj.x_end}]")
    npas = len(passive_pairs)
    ppk = _passive_table([(a, b, c) for a, b, c, _ in passive_pairs]) if npas else None
    pinit = None
    if npas:
        vecs = np.concatenate([np.asarray(s.vector(), dtype=float) for *_, s in passive_pairs])
        winds = np.array([s.winding for *_, s in passive_pairs], dtype=np.int64)
        pinit = (vecs, winds)
    st, pr, ph = traj.switches()
    res, _, _ = _replay_core(traj, traj.x0, traj.y0, traj.wind0, traj.phase0, traj.xs, traj.hs,
                             st, pr, ph, x_end, probe_k, npas, ppk, pinit, decim=decimation,
                             probe_init=probe_init)
    return res


def _state_at_impl(self, x):
    if x < self.x0 or x > self.x_end:
        raise ProbeOutOfRange(f"x={x} outside [{self.x0}, {self.x_end}]")
    r = max(int(np.searchsorted(self.rec_x, x, side="right")) - 1, 0)
    step0 = int(self.rec_step[r])
    st, pr, ph = self.switches()
    keep = st >= step0
    res, _, _ = _replay_core(self, float(self.rec_x[r]), self.rec_y[r], self.rec_w[r],
                             self.phase_at_step(step0), self.xs[step0:], self.hs[step0:],
                             st[keep] - step0, pr[keep], ph[keep], x, np.empty(0), 0,
                             decim=1 << 30)
    pairs = [res.anchor_state(j) for j in range(self.npair)]
    ph_now = self.phase_at_step(step0 + int(res.step[-1]))
    for j, p in enumerate(pairs):
        p.phase = int(ph_now[j])
    return JointState(res.x_reached, pairs, int_v=float(res.int_v[-1]))


_state_at_impl.__doc__ = "Joint state at an arbitrary ``x`` by replay from the nearest record."
AnchorTrajectory.state_at = _state_at_impl


def locate_event(delta_theta, bracket, target, pair_index=0, tol=1e-10, max_iter=200):
    """Position where ``delta_theta(x)`` first reaches ``target`` inside ``bracket``.

    ``delta_theta`` is a callable, or an :class:`AnchorTrajectory` (the
    value is then read off by replay for pair ``pair_index``).  Illinois
    false position on a monotone bracket.
    """
    if isinstance(delta_theta, AnchorTrajectory):
        traj = delta_theta

        def delta_theta(x):
            return traj.state_at(x).pairs[pair_index].delta_theta

    a, b = map(float, bracket)
    fa = delta_theta(a) - target
    fb = delta_theta(b) - target
    if not (fa < 0.0 <= fb):
        raise EventNotBracketed(f"target {target} not bracketed by delta_theta on [{a}, {b}]",
                                pair_index=pair_index, x=b)
    eps = tol * (1.0 + abs(target))
    if fb <= eps:
        return b
    side = 0
    x = b
    for _ in range(max_iter):
        x = b - fb * (b - a) / (fb - fa)
        if not (a < x < b):
            x = 0.5 * (a + b)
        fx = delta_theta(x) - target
        if abs(fx) <= eps:
            return x
        if fx < 0:
            a, fa = x, fx
            if side == -1:
                fb *= 0.5
            side = -1
        else:
            b, fb = x, fx
            if side == 1:
                fa *= 0.5
            side = 1
    return x


def idealized_stage(f, delta_k, *, k0=1.0, g=None):
    """Single-pair stage for the averaged system.  ``g`` defaults to no tail."""
    from .potentials import Energy, PairParams
    pair = PairParams(k_parent=Energy(k0), f=f, delta_k=delta_k)
    return StageParams(n=1, g=math.inf if g is None else g, g_tilde=f / delta_k, x_start=0.0,
                       pairs=(pair,))
