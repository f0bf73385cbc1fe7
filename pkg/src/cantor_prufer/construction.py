"""Multi-stage driver: energy tree, stage parameter choice and chained runs."""

import configparser
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from .engine import IntegratorControls, JointState, _fresh_pair, integrate_stage, run_probe
from .errors import CantorPruferError, ConfigError, NoFeasibleSplitPoint, StageTooShort
from .potentials import (PRE_FLIP, Energy, EnvelopeSpec, PairParams, StageParams, check_envelope,
                         check_stage, split_stage, splitting_constraints, wvn_stage)
from .verification import (Check, Tolerances, VerificationReport, _upper, connection_check,
                           continuity_check, continuity_checks, continuity_radius,
                           mass_conservation_check, run_certified, tail_certificate,
                           verify_stage)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ConstructionConfig:
    name: str = "default"
    k0: float = 2.0
    f: float = 1e-3
    g: float = 50.0
    g_tilde: float = 1e6
    mode: str = "toy"
    g_step: float = 10.0
    g_tilde_factor: float = 10.0
    drive_ceiling_c: float = 0.1
    smallness: float = 1.0
    envelope: EnvelopeSpec = field(default_factory=EnvelopeSpec)
    envelope_gating: bool = True
    controls: IntegratorControls = field(default_factory=IntegratorControls)
    tolerances: Tolerances = field(default_factory=Tolerances)
    x_budget: float = 1e9
    grid_factor: float = 1.25
    tail_window: float = 0.2
    max_extend: int = 6
    step_budget: float = 2e7
    continuity_decimation: int = 4

    def as_dict(self):
        d = asdict(self)
        d["envelope"] = {"family": self.envelope.family, "c": self.envelope.c,
                         "eps": self.envelope.eps}
        return d


_SECTIONS = {
    "profile": {"name": str, "k0": float, "f": float, "g": float, "g_tilde": float,
                "g_step": float, "g_tilde_factor": float, "drive_ceiling_c": float, "smallness": float},
    "mode": {"mode": str},
    "envelope": {"family": str, "c": float, "eps": float, "gating": bool},
    "integrator": {"rel_tol": float, "abs_tol_angle": float, "abs_tol_logr2": float,
                   "abs_tol_norm": float, "max_step_fraction": float, "event_tol": float,
                   "truncation_drop": float, "decimation": int, "theta0": float},
    "budgets": {"x_budget": float, "grid_factor": float, "tail_window": float,
                "max_extend": int, "continuity_decimation": int, "step_budget": float},
}


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_config(text=None, path=None, base="default") -> ConstructionConfig:
    """Parse an ini profile layered over a built-in one.

    A ``[profile]`` key ``base`` picks the built-in profile to start from.
    """
    cp = configparser.ConfigParser()
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        cp.read_string(text or "")
    except (configparser.Error, OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if cp.has_option("profile", "base"):
        base = cp.get("profile", "base")
    cfg = builtin_profile(base) if base else ConstructionConfig()
    return _apply(cfg, cp)


def _apply(cfg, cp):
    known = set(_SECTIONS) | {"tolerances"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    top, env, integ = {}, {}, {}
    try:
        for sec, fields in _SECTIONS.items():
            if not cp.has_section(sec):
                continue
            for key, raw in cp.items(sec):
                if sec == "profile" and key == "base":
                    continue
                if key not in fields:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                typ = fields[key]
                val = _parse_bool(raw) if typ is bool else typ(raw)
                if sec == "envelope":
                    env[key] = val
                elif sec == "integrator":
                    integ[key] = val
                else:
                    top[key] = val
        tol = cfg.tolerances
        if cp.has_section("tolerances"):
            names = set(asdict(Tolerances()))
            extra = set(cp.options("tolerances")) - names
            if extra:
                raise ConfigError(f"unknown tolerance(s): {sorted(extra)}")
            tol = Tolerances.from_mapping({**asdict(tol), **dict(cp.items("tolerances"))})
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value: {exc}") from exc
    if "mode" in top and top["mode"] not in ("toy", "strict"):
        raise ConfigError(f"mode must be toy or strict, got {top['mode']!r}")
    gating = env.pop("gating", cfg.envelope_gating)
    envelope = replace(cfg.envelope, **env) if env else cfg.envelope
    try:
        envelope.validate()
    except ValueError as exc:
        raise ConfigError(f"envelope: {exc}") from exc
    controls = replace(cfg.controls, **integ) if integ else cfg.controls
    out = replace(cfg, envelope=envelope, envelope_gating=gating, controls=controls,
                  tolerances=tol, **top)
    for name in ("k0", "f", "g", "g_tilde", "x_budget"):
        if not getattr(out, name) > 0:
            raise ConfigError(f"{name} must be positive")
    if not out.grid_factor > 1:
        raise ConfigError("grid_factor must exceed 1")
    return out


PROFILES = ("default", "two-stage")


def builtin_profile(name="default") -> ConstructionConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    text = resources.files("cantor_prufer").joinpath("profiles", f"{name}.ini").read_text("utf-8")
    cp = configparser.ConfigParser()
    cp.read_string(text)
    return _apply(ConstructionConfig(), cp)


def config_to_ini(cfg: ConstructionConfig) -> str:
    """Resolved profile as ini text (round-trips through :func:`load_config`)."""
    cp = configparser.ConfigParser()
    cp["profile"] = {k: repr(getattr(cfg, k)) if isinstance(getattr(cfg, k), float) else
                     str(getattr(cfg, k)) for k in _SECTIONS["profile"]}
    cp["mode"] = {"mode": cfg.mode}
    cp["envelope"] = {"family": cfg.envelope.family, "c": repr(float(cfg.envelope.c)),
                      "eps": repr(float(cfg.envelope.eps)), "gating": str(cfg.envelope_gating).lower()}
    cp["integrator"] = {k: repr(getattr(cfg.controls, k)) for k in _SECTIONS["integrator"]}
    cp["budgets"] = {k: repr(getattr(cfg, k)) for k in _SECTIONS["budgets"]}
    tol = {}
    for k, v in asdict(cfg.tolerances).items():
        tol[k] = " ".join(repr(t) for t in v) if isinstance(v, tuple) else repr(v)
    cp["tolerances"] = tol
    import io
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ------------------------------------------------------------- energy tree

@dataclass
class TreeNode:
    stage: int
    index: int
    energy: Energy
    parent: int | None
    delta_k: float      # separation from the sibling (0 for the root)
    f: float
    mass: float = math.nan

    @property
    def interval(self):
        h = self.delta_k / 6.0
        k = self.energy.value
        return (k - h, k + h)


@dataclass
class EnergyTree:
    nodes: list = field(default_factory=list)   # nodes[n] = list of TreeNode at stage n

    @classmethod
    def root(cls, k0):
        return cls([[TreeNode(0, 0, Energy(k0), None, 0.0, 0.0)]])

    @property
    def depth(self):
        return len(self.nodes) - 1

    def leaves(self):
        return self.nodes[-1] if self.nodes else []

    def add_stage(self, stage: StageParams):
        """Children of every current leaf, two per pair of ``stage``."""
        n = len(self.nodes)
        kids = []
        for j, p in enumerate(stage.pairs):
            for e in (p.k_lo, p.k_hi):
                kids.append(TreeNode(n, len(kids), e, j, p.delta_k, p.f))
        self.nodes.append(kids)
        return kids

    def to_csv(self):
        lines = ["# cantor_prufer tree v1", "stage,j,parent,k_base,k_offset,delta_k,f,mass"]
        for level in self.nodes:
            for nd in level:
                lines.append(",".join([str(nd.stage), str(nd.index),
                                       "" if nd.parent is None else str(nd.parent),
                                       repr(float(nd.energy.base)),
                                       repr(float(nd.energy.offset)), repr(float(nd.delta_k)),
                                       repr(float(nd.f)), repr(float(nd.mass))]))
        return "\n".join(lines) + "\n"


@dataclass
class IntervalAudit:
    disjoint: bool
    nested: bool
    summable: bool
    violations: list

    @property
    def passed(self):
        return self.disjoint and self.nested and self.summable


def interval_audit(tree: EnergyTree) -> IntervalAudit:
    """Disjoint doubled intervals, nesting of children, and the summability bound."""
    if tree.depth < 1:
        raise ValueError("tree has no split stages")
    viol = []
    disjoint = nested = summable = True
    for n in range(1, len(tree.nodes)):
        level = sorted(tree.nodes[n], key=lambda nd: nd.energy.value)
        for a, b in zip(level[:-1], level[1:]):
            # doubled intervals have half-width dk/3
            gap = (b.energy - a.energy) - (a.delta_k + b.delta_k) / 3.0
            if not gap > 0:
                disjoint = False
                viol.append(f"stage {n}: 2I around {a.energy.value!r} and {b.energy.value!r} overlap")
        if n >= 2:
            for nd in tree.nodes[n]:
                par = tree.nodes[n - 1][nd.parent]
                lo, hi = par.interval
                k = nd.energy.value
                h = nd.delta_k / 6.0
                if not (lo <= k - h and k + h <= hi):
                    nested = False
                    viol.append(f"stage {n}: node {nd.index} not inside parent interval")
    for n in range(1, len(tree.nodes) - 1):
        tail = math.fsum(max(nd.delta_k for nd in tree.nodes[m])
                         for m in range(n + 1, len(tree.nodes)))
        cap = min(nd.delta_k for nd in tree.nodes[n]) / 3.0
        if not tail <= cap:
            summable = False
            viol.append(f"stage {n}: sum of later max dk {tail!r} > min dk/3 {cap!r}")
    return IntervalAudit(disjoint, nested, summable, viol)


# ------------------------------------------------------ growth certificates

@dataclass
class GrowthCertificates:
    x_tilde: float
    x_small: float
    small_enforced: bool
    beta: list
    int_abs_v: float
    log_error: float
    log_d: float
    log_p: float
    d_measured: float
    p_measured: float
    ratio_measured: float
    envelopes_hold: bool
    special_case: bool

    def as_dict(self):
        return asdict(self)


def _smallness_point(stage: StageParams, threshold):
    """First ``x`` beyond the drive after which the amplitude bound stays below ``threshold``."""
    x = stage.drive_end
    if stage.amplitude_bound(x * (1 + 1e-12)) <= threshold:
        return x
    # amplitude in the tail is sum 0.5 kp min(cap, g/2x): decreasing, solve by bisection
    lo, hi = x, x
    while stage.amplitude_bound(hi) > threshold:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if stage.amplitude_bound(mid) > threshold:
            lo = mid
        else:
            hi = mid
    return hi


def _energies(stage):
    return [e for p in stage.pairs for e in (p.k_lo, p.k_hi)]


def _growth_integral(x, x_tilde, beta):
    """``int_{x~}^x (x/y)^beta dy``, all beta."""
    r = x / x_tilde
    if abs(beta - 1.0) < 1e-12:
        return x * math.log(r)
    return x_tilde / (beta - 1.0) * (r**beta - r)


def compute_growth_certificates(traj, stage: StageParams | None = None, a_next=None,
                                mode="toy", prior_int_abs_v=0.0):
    """Closed-form growth constants and their measured stand-ins for a stage run."""
    stage = stage or traj.stage
    ks = _energies(stage)
    if a_next is None:
        vals = sorted(e.value for e in ks)
        a_next = min(b - a for a, b in zip(vals[:-1], vals[1:]))
    kmin = min(e.value for e in ks)
    x_small = _smallness_point(stage, a_next * kmin / 8.0)
    enforce = mode == "strict"
    x_tilde = max(stage.drive_end, x_small) if enforce else stage.drive_end
    if traj.x_end < 2.0 * x_tilde:
        raise StageTooShort(f"run ends at {traj.x_end:.6g}, before 2 x~ = {2 * x_tilde:.6g}")
    vmax = float(np.max(np.abs(traj.v))) if traj.v.size else 0.0
    special = vmax * traj.x_end <= 1e-12
    beta = [0.0 if special else p.k_parent.value * stage.g / (16.0 * e.value)
            for p in stage.pairs for e in (p.k_lo, p.k_hi)]
    m = traj.xs <= x_tilde
    xs = np.concatenate([[traj.x0], traj.xs[m]])
    av = np.abs(np.concatenate([[traj.v[0] if traj.v.size else 0.0], traj.v[m]]))
    int_abs_v = prior_int_abs_v + float(np.sum(0.5 * (av[1:] + av[:-1]) * np.diff(xs)))
    # exponent 2^n a^-2 g sum f of the closed-form constants
    # logs taken separately: g * sum f underflows for a vanishing drive
    log_gf = math.log(stage.g) + math.log(stage.sum_f) if stage.sum_f > 0 else -math.inf
    log_err = math.log(2.0) * stage.n + log_gf - 2.0 * math.log(a_next)
    err = math.exp(min(log_err, 700.0))
    log_d = 2.0 * math.log(x_tilde) + int_abs_v / kmin + err
    bmin = min(beta)
    log_p = (math.log(x_tilde / (bmin - 1.0)) - err) if bmin > 1.0 else -math.inf
    # measured stand-ins from the anchors' own dtheta/dk
    d_meas = 0.0
    p_meas = math.inf
    ok = True
    for idx, (e, b) in enumerate(zip(ks, beta)):
        j, side = divmod(idx, 2)
        col = traj.column(j, "dtheta_dk_lo" if side == 0 else "dtheta_dk_hi")
        xr = traj.rec_x
        for x, t in zip(xr, col):
            if x <= stage.x_start:
                continue
            rr = (x - stage.x_start) / (x_tilde - stage.x_start) if stage.x_start else x / x_tilde
            d_meas = max(d_meas, t / (1.0 + rr**b))
            if x >= 2.0 * x_tilde:
                p_meas = min(p_meas, t / rr**b)
                jx = (x - x_tilde) if special else _growth_integral(x, x_tilde, b)
                if jx <= 0 or t <= 0:
                    continue
                # compared in logs: err is routinely far beyond float range
                log_lo = -err + math.log(jx)
                log_hi = np.logaddexp(math.log(x_tilde) + int_abs_v / e.value, err + math.log(jx))
                lt = math.log(t)
                if not (log_lo - 1e-9 <= lt <= log_hi + 1e-9):
                    ok = False
    ratio = d_meas / p_meas if p_meas > 0 else math.inf
    return GrowthCertificates(x_tilde, x_small, enforce, beta, int_abs_v, err, log_d, log_p,
                              d_meas, p_meas, ratio, ok, special)


# ----------------------------------------------------- next-stage parameters

@dataclass
class SplitChoice:
    x_split: float
    g_next: float
    g_tilde_next: float
    a_next: float
    f_tilde: float
    stage: StageParams
    dtheta_dk: list
    log_r2: list
    norm_r2: list
    constraints: list       # ConstraintCheck-like dicts at the chosen point
    binding: str
    grid_points: int

    def as_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "stage"}
        return d


def _next_schedule(n, stage, certs, cfg: ConstructionConfig):
    if cfg.mode == "strict":
        # g~ = exp(g^{3/4}) and g~^{1/4} >= 2^n D/P
        need = 4.0 * (n * math.log(2.0) + certs.log_d - certs.log_p)
        g_next = max(stage.g + cfg.g_step, max(need, 0.0) ** (4.0 / 3.0))
        return g_next, math.exp(g_next**0.75)
    # the measured (2^n D/P)^4 is reported, not imposed: it sends x_{n+1} past any budget
    return stage.g + cfg.g_step, stage.g_tilde * cfg.g_tilde_factor


def next_pair_params(dtheta_dk, g_tilde_next):
    """Drive strength and splitting ``(f, delta_k)`` for energies with the given dtheta/dk."""
    t = np.asarray(dtheta_dk, dtype=float)
    f = math.sqrt(g_tilde_next) / t
    return f, f / g_tilde_next


def _evaluate_point(x, states, ks, kps, n, g_next, gt, a, f_tilde, cfg):
    """Constraint values at one candidate split point."""
    t = np.array([s[0] for s in states])
    f, dk = next_pair_params(t, gt)
    out = []
    out.append(("4*sum(f k) < a/3", 4.0 * math.fsum(f * kps), a / 3.0, True))
    out.append(("max dk < a/12", float(dk.max()), a / 12.0, True))
    out.append(("f < f_tilde (drive ceiling)", float(f.max()), f_tilde, cfg.mode == "strict"))
    out.append(("window <= a/4", float((2.0 / math.sqrt(gt) / t).max()), a / 4.0, True))
    ext = x + g_next / f
    h = np.array([cfg.envelope(xx) for xx in ext])
    grr = f / (2.0 ** (-n - 1) * h / ext)
    out.append(("envelope headroom f <= 2^-(n+1) h(X)/X", float(grr.max()), 1.0, True))
    kids = np.concatenate([ks - dk / 2.0, ks + dk / 2.0])
    out.append(("children: 2 spread <= min k", 2.0 * float(kids.max() - kids.min()),
                float(kids.min()), True))
    out.append(("drive extent <= x budget", float((g_next / f).max()), cfg.x_budget, True))
    return out, f


def choose_stage_params(n, traj, env=None, config: ConstructionConfig | None = None,
                        certs: GrowthCertificates | None = None):
    """Next-stage parameters and the splitting point (first feasible grid point).

    ``env`` overrides the envelope of ``config``.  Raises
    :class:`StageTooShort` if the run is too short to reach a feasible point
    and :class:`NoFeasibleSplitPoint` if the x budget is exhausted first.
    """
    cfg = config or ConstructionConfig()
    if env is not None:
        cfg = replace(cfg, envelope=env)
    stage = traj.stage
    ks_e = _energies(stage)
    ks = np.array([e.value for e in ks_e])
    vals = np.sort(ks)
    a = float(np.min(np.diff(vals))) if ks.size > 1 else math.inf
    certs = certs or compute_growth_certificates(traj, stage, a, cfg.mode)
    g_next, gt = _next_schedule(n, stage, certs, cfg)
    f_tilde = cfg.drive_ceiling_c * a * a * 2.0 ** (-3 * (n + 1)) * math.exp(-min(g_next, 700.0))
    if cfg.mode == "strict":
        dk_guess = f_tilde / gt
        if dk_guess < 4.0 * np.finfo(float).eps * ks.min():
            raise NoFeasibleSplitPoint(
                f"strict schedule g={g_next:.4g}, g~={gt:.4g}: delta_k <= {dk_guess:.3g} "
                "underflows the energy representation", constraint="drive ceiling", margin=dk_guess)
    x = 2.0 * certs.x_tilde
    tried = 0
    last = None
    while True:
        if x > cfg.x_budget:
            bind = _binding(last) if last else "x budget"
            raise NoFeasibleSplitPoint(f"no feasible split point below x budget {cfg.x_budget:g}; "
                                       f"binding: {bind}", constraint=bind, margin=x)
        if x > traj.x_end:
            err = StageTooShort(f"stage run ends at {traj.x_end:.6g} before a feasible split "
                                f"point; binding: {_binding(last) if last else 'none'}")
            err.last = last
            err.x_next = x
            raise err
        js = traj.state_at(x)
        states = []
        for p in js.pairs:
            states.append((p.dtheta_dk_lo, p.log_r2_lo, p.norm_r2_lo))
            states.append((p.dtheta_dk_hi, p.log_r2_hi, p.norm_r2_hi))
        kps = ks
        cons, f = _evaluate_point(x, states, ks, kps, n, g_next, gt, a, f_tilde, cfg)
        tried += 1
        last = (x, cons, states)
        if all((lhs < rhs) or not gate for _, lhs, rhs, gate in cons):
            break
        x *= cfg.grid_factor
    pairs = tuple(PairParams(k_parent=e, f=float(fj), delta_k=float(fj) / gt)
                  for e, fj in zip(ks_e, f))
    nxt = StageParams(n=n + 1, g=g_next, g_tilde=gt, x_start=x, pairs=pairs, a=a,
                      f_tilde_cap=f_tilde, mode=cfg.mode)
    cdicts = [{"name": nm, "lhs": lhs, "rhs": rhs, "gating": gate,
               "margin": (rhs - lhs) / abs(rhs) if rhs not in (0, math.inf) else math.inf,
               "ok": bool(lhs < rhs)} for nm, lhs, rhs, gate in cons]
    return SplitChoice(x, g_next, gt, a, f_tilde, nxt, [s[0] for s in states],
                       [s[1] for s in states], [s[2] for s in states], cdicts,
                       _binding(last), tried)


def _binding(last):
    if not last:
        return ""
    _, cons, _ = last
    gated = [(nm, (rhs - lhs) / abs(rhs) if rhs else -math.inf)
             for nm, lhs, rhs, gate in cons if gate and math.isfinite(rhs)]
    return min(gated, key=lambda t: t[1])[0] if gated else ""


# ----------------------------------------------------------- the induction

@dataclass
class StageRecord:
    stage: StageParams
    traj: object
    report: VerificationReport
    certificates: dict            # (pair, side) -> TailCertificate
    growth: GrowthCertificates | None = None
    choice: SplitChoice | None = None
    x_end_frozen: float | None = None


@dataclass
class ConstructionState:
    config: ConstructionConfig
    tree: EnergyTree
    stages: list = field(default_factory=list)
    er: list = field(default_factory=list)
    c2: float = math.nan
    failed: str | None = None

    @property
    def n(self):
        return len(self.stages)

    @property
    def passed(self):
        return self.failed is None and all(s.report.passed for s in self.stages)

    def frozen_potential(self, stride=1):
        """Assembled potential samples: each stage up to the next splitting point."""
        xs, vs = [], []
        for i, rec in enumerate(self.stages):
            tr = rec.traj
            stop = self.stages[i + 1].stage.x_start if i + 1 < len(self.stages) else tr.x_end
            m = tr.xs <= stop
            xs.append(tr.xs[m][::stride])
            vs.append(tr.v[m][::stride])
        if not xs:
            return np.empty(0), np.empty(0)
        return np.concatenate(xs), np.concatenate(vs)


def _certs(traj, cert_tol):
    out = {}
    for j, p in enumerate(traj.stage.pairs):
        for side in (("lo",) if p.kind == "wvn" else ("lo", "hi")):
            out[(j, side)] = tail_certificate(traj, j, side, cert_tol)
    return out


def stage_controls(stage, cfg, x_max, max_records=50_000):
    """Integrator controls with the record decimation raised for long stages.

    Records do not feed back into the integration, so this only sizes the
    stored trajectory.
    """
    x_stop = min(x_max, stage.drive_end + max(cfg.tail_window, 0.2) * 1.5 *
                 (stage.drive_end - stage.x_start))
    steps = (x_stop - stage.x_start) * stage.k_max / (cfg.controls.max_step_fraction * math.pi)
    dec = cfg.controls.decimation
    while steps / dec > max_records:
        dec *= 2
    return replace(cfg.controls, decimation=dec)


def _run_stage(stage, init, cfg, x_min=None):
    x_max = max(stage.x_start + 100.0 * (stage.drive_end - stage.x_start), x_min or 0.0)
    # steps run at the cap pi*max_step_fraction/k_max once past the drive
    x_steps = stage.x_start + cfg.step_budget * cfg.controls.max_step_fraction * math.pi / stage.k_max
    x_max = min(x_max, x_steps)
    controls = stage_controls(stage, cfg, x_max)
    traj = run_certified(stage, init=init, controls=controls,
                         cert_tol=cfg.tolerances.cert_tol, tail_window=cfg.tail_window,
                         x_max=min(x_max, cfg.x_budget))
    if x_min is not None and traj.x_end < x_min:
        # same chunking as run_certified, so the longer run repeats the shorter one's steps
        traj = integrate_stage(stage, init=init, x_end=min(x_min, cfg.x_budget),
                               controls=stage_controls(stage, cfg, x_min),
                               check_every=max(0.05 * (stage.drive_end - stage.x_start), 1.0))
    return traj


def _propagate(records, x_stop, specs):
    """Child pair states at ``x_stop`` by replaying every frozen stage in order."""
    states = [_fresh_pair(records[0].traj.controls.theta0) for _ in specs]
    int_v = 0.0
    for i, rec in enumerate(records):
        stop = records[i + 1].stage.x_start if i + 1 < len(records) else x_stop
        res = run_probe(rec.traj, [], x_end=stop,
                        passive_pairs=[(a, b, c, s) for (a, b, c), s in zip(specs, states)],
                        decimation=1 << 30)
        states = [res.pair_state(j) for j in range(len(specs))]
        int_v = float(res.int_v[-1])
    for s in states:
        s.phase = PRE_FLIP
    return states, int_v


def _choose_with_extension(n, rec, cfg, init):
    """Choose the split point, lengthening the stage run when it is too short."""
    traj = rec.traj
    for _ in range(cfg.max_extend + 1):
        try:
            certs = compute_growth_certificates(traj, traj.stage, mode=cfg.mode)
            choice = choose_stage_params(n, traj, config=cfg, certs=certs)
            return traj, certs, choice
        except StageTooShort as exc:
            last = getattr(exc, "last", None)
            x_need = 2.0 * traj.x_end
            if last is not None:
                _, cons, _ = last
                worst = max(lhs / rhs for _, lhs, rhs, gate in cons
                            if gate and math.isfinite(rhs) and rhs > 0)
                # dtheta/dk grows like a power of x; aim past the worst constraint
                p = _growth_exponent(traj)
                x_need = traj.x_end * min(16.0, max(2.0, (1.2 * worst) ** (1.0 / p)))
            steps = (x_need - traj.stage.x_start) * traj.stage.k_max / \
                (cfg.controls.max_step_fraction * math.pi)
            if x_need > cfg.x_budget or steps > cfg.step_budget:
                bind = _binding(last) if last else "x budget"
                margin = min(1.0 - x_need / cfg.x_budget, 1.0 - steps / cfg.step_budget)
                raise NoFeasibleSplitPoint(
                    f"stage {n} would need x ~ {x_need:.3g} ({steps:.3g} steps) to satisfy "
                    f"{bind}; budgets are x <= {cfg.x_budget:g}, steps <= {cfg.step_budget:g}",
                    constraint=bind, margin=margin) from exc
            traj = _run_stage(traj.stage, init, cfg, x_min=x_need)
    raise NoFeasibleSplitPoint(f"stage {n}: no feasible split point after {cfg.max_extend} "
                               "extensions", constraint="x budget", margin=traj.x_end)


def _growth_exponent(traj, span=4.0):
    """Local power of ``x`` in the slowest-growing anchor dtheta/dk over the last ``span``."""
    xr = traj.rec_x
    x1 = traj.x_end
    x0 = max(x1 / span, traj.stage.drive_end)
    if not x1 > x0:
        return max(traj.stage.g / 16.0, 0.5)
    i0 = int(np.searchsorted(xr, x0))
    p = math.inf
    for j in range(traj.npair):
        for side in ("lo", "hi"):
            col = traj.column(j, f"dtheta_dk_{side}")
            if col[i0] > 0 and col[-1] > 0:
                p = min(p, math.log(col[-1] / col[i0]) / math.log(xr[-1] / xr[i0]))
    return min(max(p, 0.5), 4.0) if math.isfinite(p) else 1.0


def stage_report(traj, cfg: ConstructionConfig, context: dict, prev_certs=None, tree=None):
    """Stage report from a run (live or stored) plus its recorded handoff context.

    ``context`` holds what cannot be recomputed from the decimated records:
    previous conditional-integral supremum, assembled-envelope supremum,
    and the handoff measurements at the splitting point.
    """
    tol = cfg.tolerances
    n = traj.stage.n
    report = verify_stage(traj, tol, previous_sup=context.get("prev_sup"))
    certs = _certs(traj, tol.cert_tol)
    report.stage["constraints"] = [c.as_dict() for c in splitting_constraints(traj.stage,
                                                                              cfg.smallness)]
    # norm budget: ||R||^2 <= C1 2^n prod(1 + Er_l), C1 = 1/f_1
    norms = [c.norm_r2 for c in certs.values()]
    if prev_certs is None:
        er = max(abs(0.5 * cfg.f * nm - 1.0) for nm in norms)
    else:
        er = max(abs(c.norm_r2 / (2.0 * prev_certs[_parent_key(j)].norm_r2) - 1.0)
                 for (j, _), c in certs.items())
    c1 = 1.0 / cfg.f
    budget = c1 * 2.0**n * (1.0 + tol.norm_budget) ** n
    report.stage["Er"] = er
    report.checks.append(_upper(f"stage{n}.norm_budget", max(norms), c1 * 2.0**n, budget,
                                note=f"Er_{n}={er:.4g}"))
    ho = context.get("handoff")
    if ho is not None:
        report.checks.extend(_handoff_checks(ho, certs, prev_certs, tol))
    if tree is not None and n >= 2:
        audit = interval_audit(tree)
        report.stage["interval_audit"] = {"disjoint": audit.disjoint, "nested": audit.nested,
                                          "summable": audit.summable,
                                          "violations": audit.violations}
        report.checks.append(Check(f"stage{n}.interval_audit", float(audit.passed), 1.0,
                                   "disjoint, nested, summable", audit.passed))
    env = context.get("envelope")
    if env is not None:
        _envelope_check(report, cfg, env, n)
    report.extra["context"] = context
    return report, certs


def _envelope_check(report, cfg, env, n):
    report.stage["assembled_envelope_ratio"] = env["ratio"]
    report.stage["assembled_envelope_witness"] = env["x_witness"]
    report.checks.append(_upper(f"stage{n}.assembled_envelope", env["ratio"], 0.0, 1.0,
                                gating=cfg.envelope_gating, strict=True,
                                note=f"h = {cfg.envelope.family} c={cfg.envelope.c:g}"))


def wvn_report(traj, cfg: ConstructionConfig, context: dict):
    """Report for the single-eigenvalue reference run."""
    report = verify_stage(traj, cfg.tolerances)
    if context.get("envelope") is not None:
        _envelope_check(report, cfg, context["envelope"], traj.stage.n)
    report.extra["context"] = context
    return report


def run_wvn(config: ConstructionConfig | None = None, log=None):
    """Integrate and verify the reference potential with one embedded eigenvalue."""
    cfg = config or ConstructionConfig()
    log = log or (lambda msg: None)
    stage = wvn_stage(cfg.k0, cfg.f, cfg.g, cfg.g_tilde)
    check_stage(stage, cfg.smallness)
    log(f"reference: k0={cfg.k0:g} f={cfg.f:g} g={cfg.g:g}")
    traj = _run_stage(stage, None, cfg)
    env = check_envelope(traj.xs, traj.v, cfg.envelope)
    report = wvn_report(traj, cfg, {"envelope": {"ratio": env.ratio, "x_witness": env.x_witness}})
    log(f"reference: report {'PASS' if report.passed else 'FAIL'} x_end={traj.x_end:.6g} "
        f"steps={traj.n_steps}")
    return traj, report


def _handoff_checks(ho, certs, prev_certs, tol):
    """Continuity, connection and mass checks between the last two stages."""
    checks = []
    gt = ho["g_tilde_next"]
    for i, cont in enumerate(ho.get("continuity", [])):
        checks += continuity_checks(cont, gt, tol, f"handoff.k{i}.continuity")
    for idx, par in enumerate(ho["parents"]):
        kids = [certs[(idx, "lo")], certs[(idx, "hi")]]
        _, cc = connection_check(par["r2"], par["dtheta_dk"], par["norm"], kids,
                                 ho["child_init_norms"][idx], tol,
                                 name=f"handoff.k{idx}.connection", g_tilde=gt)
        checks += cc
        _, mc = mass_conservation_check(prev_certs[_parent_key(idx)], kids, tol,
                                        name=f"handoff.k{idx}.mass_conservation")
        checks += mc
    return checks


def _parent_key(j):
    """Certificate key of the stage-(n-1) energy that pair ``j`` of stage n split."""
    return (j // 2, "lo" if j % 2 == 0 else "hi")


def _handoff_context(prev: StageRecord, choice: SplitChoice, child_states, cfg):
    """Measurements at the splitting point that later verification reuses."""
    x2 = choice.x_split
    gt = choice.g_tilde_next
    at = prev.traj.state_at(x2)
    parents, cont = [], []
    for idx in range(len(choice.dtheta_dk)):
        j, s = divmod(idx, 2)
        side = "lo" if s == 0 else "hi"
        ps = at.pairs[j]
        parents.append({"r2": math.exp(getattr(ps, f"log_r2_{side}")),
                        "dtheta_dk": getattr(ps, f"dtheta_dk_{side}"),
                        "norm": getattr(ps, f"norm_r2_{side}")})
        if prev.stage.n == 1:
            # probes start at the origin, so only the first stage can be replayed alone
            pair = prev.stage.pairs[j]
            k = (pair.k_lo if side == "lo" else pair.k_hi).value
            r = continuity_radius(gt, getattr(ps, f"dtheta_dk_{side}"))
            crec, _ = continuity_check(prev.traj, j, side, [k - r, k + r], x2, gt,
                                       cfg.tolerances, decimation=cfg.continuity_decimation)
            cont.append(crec)
    return {"x": x2, "g_tilde_next": gt, "parents": parents, "continuity": cont,
            "child_init_norms": [[c.norm_r2_lo, c.norm_r2_hi] for c in child_states]}


def run_construction(config: ConstructionConfig | None = None, max_stage=1, log=None):
    """Stages 1..max_stage with fail-fast verification between them.

    Errors escaping a stage carry ``stage`` and ``partial_state`` attributes.
    """
    cfg = config or ConstructionConfig()
    log = log or (lambda msg: None)
    if max_stage < 0:
        raise ValueError("max_stage must be >= 0")
    tree = EnergyTree.root(cfg.k0)
    state = ConstructionState(cfg, tree)
    if max_stage == 0:
        return state, []
    stage = split_stage(cfg.k0, cfg.f, cfg.g, cfg.g_tilde, mode=cfg.mode)
    init = None
    context = {}
    n = 1
    try:
        for n in range(1, max_stage + 1):
            check_stage(stage, cfg.smallness)
            log(f"stage {n}: start x={stage.x_start:.6g} g={stage.g:g} g~={stage.g_tilde:.6g} "
                f"pairs={len(stage.pairs)}")
            traj = _run_stage(stage, init, cfg)
            rec = StageRecord(stage, traj, None, {})
            no_split = None
            if n < max_stage:
                try:
                    traj, growth, choice = _choose_with_extension(n, rec, cfg, init)
                except NoFeasibleSplitPoint as exc:
                    # still report the stage as run, then stop
                    no_split = exc
                else:
                    rec.traj, rec.growth, rec.choice = traj, growth, choice
                    log(f"stage {n}: split at x={choice.x_split:.6g} binding={choice.binding}")
            tree.add_stage(stage)
            state.stages.append(rec)
            xs, vs = state.frozen_potential()
            env = check_envelope(xs, vs, cfg.envelope)
            context["envelope"] = {"ratio": env.ratio, "x_witness": env.x_witness}
            prev_certs = state.stages[-2].certificates if n >= 2 else None
            report, certs = stage_report(traj, cfg, context, prev_certs, tree)
            rec.report, rec.certificates = report, certs
            for nd in tree.nodes[n]:
                nd.mass = 1.0 / certs[(nd.parent, "lo" if nd.index % 2 == 0 else "hi")].norm_u2
            state.er.append(report.stage["Er"])
            state.c2 = max(e * 2.0**(i + 1) for i, e in enumerate(state.er))
            if rec.choice is not None:
                report.extra["split_choice"] = rec.choice.as_dict()
                report.extra["growth"] = rec.growth.as_dict()
            log(f"stage {n}: report {'PASS' if report.passed else 'FAIL'} "
                f"x_end={traj.x_end:.6g} steps={traj.n_steps}")
            if no_split is not None:
                state.failed = f"stage {n}: no feasible split point"
                raise no_split
            if not report.passed:
                state.failed = f"stage {n} report FAIL: " + \
                    ", ".join(c.name for c in report.failures())
                break
            if n == max_stage:
                break
            choice = rec.choice
            stage = choice.stage
            specs = [(p.k_lo.value, p.k_hi.value, p.delta_k) for p in stage.pairs]
            child_states, int_v = _propagate(state.stages, choice.x_split, specs)
            init = JointState(choice.x_split, child_states, int_v=int_v)
            context = {"prev_sup": report.stage["cond_integral_sup"],
                       "handoff": _handoff_context(rec, choice, child_states, cfg)}
    except CantorPruferError as exc:
        exc.stage = n
        exc.partial_state = state
        if exc.args and not str(exc.args[0]).startswith("stage "):
            exc.args = (f"stage {n}: {exc.args[0]}",) + exc.args[1:]
        raise
    return state, [s.report for s in state.stages]


def stored_reports(cfg: ConstructionConfig, trajs, contexts):
    """Rebuild the chained reports from stored trajectories and contexts."""
    tree = EnergyTree.root(cfg.k0)
    reports = []
    prev_certs = None
    for traj, ctx in zip(trajs, contexts):
        tree.add_stage(traj.stage)
        rep, certs = stage_report(traj, cfg, ctx, prev_certs, tree)
        for nd in tree.nodes[-1]:
            nd.mass = 1.0 / certs[(nd.parent, "lo" if nd.index % 2 == 0 else "hi")].norm_u2
        reports.append(rep)
        prev_certs = certs
    return tree, reports
