"""Stage potentials: the Wigner-von Neumann reference and the splitting stages.

A stage potential is a sum over energy pairs.  Each pair contributes a
resonant drive ``-2 f k sin(theta_lo + theta_hi)`` until its angle difference
reaches ``pi - alpha``, the same drive with opposite sign until
``x_start + g/f``, and a ``1/x``-limited tail afterwards.  The angles are the
Prufer angles at the pair's own energies, so the potential is only defined
jointly with the angle ODEs (see :mod:`cantor_prufer.engine`).
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, ConstraintViolation, EnvelopeViolation

PRE_FLIP = 0
POST_FLIP = 1
TAIL = 2
PHASE_NAMES = ("PreFlip", "PostFlip", "Tail")


@njit(cache=True)
def pair_potential(phase, x, theta_lo, delta_theta, f, k_parent, tail_dk, g):
    """Value of one pair's potential given its phase and angles.

    ``theta_hi = theta_lo + delta_theta``; ``tail_dk`` is the cap of the tail
    amplitude (the pair's ``delta_k``, or ``f/g_tilde`` for the reference
    potential whose own splitting is zero).
    """
    if phase == PRE_FLIP:
        return -2.0 * f * k_parent * math.sin(2.0 * theta_lo + delta_theta)
    if phase == POST_FLIP:
        return 2.0 * f * k_parent * math.sin(2.0 * theta_lo + delta_theta)
    m = g / (2.0 * x)
    if tail_dk < m:
        m = tail_dk
    return -m * k_parent * 0.25 * (
        math.sin(2.0 * theta_lo) + math.sin(2.0 * (theta_lo + delta_theta))
    )


@dataclass(frozen=True)
class Energy:
    """Quasimomentum stored as a reference value plus an accumulated offset.

    Splittings at late stages are far below the resolution of ``base``;
    keeping the offset separate lets ``k_hi - k_lo`` stay exact.
    """

    base: float
    offset: float = 0.0

    @property
    def value(self) -> float:
        return self.base + self.offset

    def shifted(self, delta: float) -> "Energy":
        return Energy(self.base, math.fsum((self.offset, delta)))

    def __sub__(self, other: "Energy") -> float:
        return math.fsum((self.base, -other.base, self.offset, -other.offset))

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class PairParams:
    """One splitting pair: energies ``k_lo < k_hi`` centred on ``k_parent``."""

    k_parent: Energy
    f: float
    delta_k: float
    kind: str = "split"
    tail_delta_k: float | None = None

    @property
    def k_lo(self) -> Energy:
        return self.k_parent.shifted(-0.5 * self.delta_k)

    @property
    def k_hi(self) -> Energy:
        return self.k_parent.shifted(0.5 * self.delta_k)

    @property
    def alpha(self) -> float:
        # f sin(alpha) = delta_k
        if self.kind == "wvn" or self.delta_k <= 0.0:
            return float("nan")
        return math.asin(self.delta_k / self.f)

    @property
    def flip_target(self) -> float:
        if self.kind == "wvn":
            return math.inf
        return math.pi - self.alpha

    @property
    def tail_cap(self) -> float:
        return self.delta_k if self.tail_delta_k is None else self.tail_delta_k


@dataclass(frozen=True)
class StageParams:
    """All scalar knobs of one induction stage."""

    n: int
    g: float
    g_tilde: float
    x_start: float
    pairs: tuple[PairParams, ...]
    a: float = math.inf
    f_tilde_cap: float = math.inf
    mode: str = "toy"

    def tail_start(self, j: int) -> float:
        return self.x_start + self.g / self.pairs[j].f

    @property
    def drive_end(self) -> float:
        return max(self.tail_start(j) for j in range(len(self.pairs)))

    @property
    def k_max(self) -> float:
        return max(p.k_hi.value for p in self.pairs)

    @property
    def k_min(self) -> float:
        return min(p.k_lo.value for p in self.pairs)

    @property
    def sum_f(self) -> float:
        return math.fsum(p.f for p in self.pairs)

    @property
    def error_scales(self) -> tuple[float, float]:
        """Predicted magnitudes of the oscillatory error terms.

        The first omits the ``e^g`` amplification, the second includes it.
        Stage 1 has no neighbouring pairs, so both vanish.
        """
        if not math.isfinite(self.a):
            return 0.0, 0.0
        base = 2.0**self.n * self.sum_f * self.a**-2
        return base * self.g, base * math.exp(min(self.g, 700.0))

    def amplitude_bound(self, x: float) -> float:
        """Upper bound on ``|V(x)|`` read off the piecewise definition."""
        total = 0.0
        for j, p in enumerate(self.pairs):
            if x <= self.tail_start(j):
                total += 2.0 * p.f * p.k_parent.value
            else:
                total += 0.5 * min(p.tail_cap, self.g / (2.0 * x)) * p.k_parent.value
        return total


def split_stage(k0, f, g, g_tilde, *, x_start=0.0, n=1, mode="toy") -> StageParams:
    """Single-pair splitting stage with ``delta_k = f / g_tilde``."""
    k0 = k0 if isinstance(k0, Energy) else Energy(float(k0))
    pair = PairParams(k_parent=k0, f=float(f), delta_k=float(f) / float(g_tilde))
    return StageParams(n=n, g=float(g), g_tilde=float(g_tilde), x_start=float(x_start),
                       pairs=(pair,), mode=mode)


def wvn_stage(k0, f, g, g_tilde) -> StageParams:
    """Reference single-eigenvalue (Wigner-von Neumann type) potential as a stage."""
    k0 = k0 if isinstance(k0, Energy) else Energy(float(k0))
    pair = PairParams(k_parent=k0, f=float(f), delta_k=0.0, kind="wvn",
                      tail_delta_k=float(f) / float(g_tilde))
    return StageParams(n=0, g=float(g), g_tilde=float(g_tilde), x_start=0.0, pairs=(pair,))


def evaluate_pair_potential(pair: PairParams, phase: int, x: float, theta_lo: float,
                            delta_theta: float, g: float, x_start: float = 0.0) -> float:
    tail_at = x_start + g / pair.f
    if (phase == TAIL) != (x > tail_at):
        raise ValueError(f"phase {PHASE_NAMES[phase]} inconsistent with x={x} (tail at {tail_at})")
    return float(pair_potential(phase, x, theta_lo, delta_theta, pair.f,
                                pair.k_parent.value, pair.tail_cap, g))


def evaluate_stage_potential(stage: StageParams, x: float, joint_state) -> float:
    """Sum of the pair potentials at ``joint_state`` (which must sit at ``x``)."""
    if x < stage.x_start:
        raise ValueError("x precedes the stage start")
    if joint_state.x != x:
        raise ValueError("joint state is not located at x")
    total = 0.0
    for pair, ps in zip(stage.pairs, joint_state.pairs):
        total += pair_potential(ps.phase, x, ps.theta_lo, ps.delta_theta, pair.f,
                                pair.k_parent.value, pair.tail_cap, stage.g)
    return total


def wvn_potential(k0: float, f: float, g: float, theta0: float, x: float,
                  delta_k: float | None = None) -> float:
    """Reference potential at ``x`` for the Prufer angle ``theta0`` at ``k0``.

    ``delta_k`` caps the tail amplitude; it defaults to ``f`` (no cap in
    the ``g/2x`` regime that matters right after the drive).
    """
    if not (k0 > 0 and f > 0 and g > 1):
        raise ValueError("need k0 > 0, f > 0, g > 1")
    if x <= g / f:
        return -2.0 * k0 * f * math.sin(2.0 * theta0)
    m = min(f if delta_k is None else delta_k, g / (2.0 * x))
    return -m * 0.5 * k0 * math.sin(2.0 * theta0)


# ---------------------------------------------------------------- constraints

@dataclass
class ConstraintCheck:
    name: str
    lhs: float
    rhs: float
    gating: bool = True
    note: str = ""

    @property
    def margin(self) -> float:
        """Relative slack ``1 - lhs/rhs``; negative when violated."""
        if self.rhs == 0:
            return -math.inf if self.lhs > 0 else 0.0
        if math.isinf(self.rhs):
            return 1.0
        return 1.0 - self.lhs / self.rhs

    @property
    def ok(self) -> bool:
        return self.lhs < self.rhs or (self.lhs == self.rhs == 0)

    def as_dict(self):
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "margin": self.margin,
                "ok": self.ok, "gating": self.gating, "note": self.note}


def splitting_constraints(stage: StageParams, smallness: float = 1.0) -> list[ConstraintCheck]:
    """Every inequality the splitting argument assumes, with margins.

    The two ``<<`` conditions (``g >> 1`` and the cross-pair error scale) are
    compared against ``smallness`` and logged, but only gate in strict mode:
    at desk scale their literal form cannot be met by any run that fits in
    memory, and their effect is measured directly instead.
    """
    strict = stage.mode == "strict"
    checks = []
    kp = [p.k_parent.value for p in stage.pairs]
    a = stage.a
    checks.append(ConstraintCheck("4*sum(f_j k_j) < a/3",
                                  4.0 * math.fsum(p.f * k for p, k in zip(stage.pairs, kp)), a / 3.0))
    checks.append(ConstraintCheck("g >> 1 (g > 16 for a convergent tail)", 16.0, stage.g))
    checks.append(ConstraintCheck("2^n g a^-2 sum f << 1", stage.error_scales[0], smallness,
                                  gating=strict))
    for j, p in enumerate(stage.pairs):
        if p.kind == "wvn":
            continue
        checks.append(ConstraintCheck(f"delta_k[{j}] < a/12", p.delta_k, a / 12.0))
        checks.append(ConstraintCheck(f"delta_k[{j}] g_tilde = f[{j}]",
                                      abs(p.delta_k * stage.g_tilde - p.f), 1e-14 * p.f + 1e-300))
    ks = [e.value for p in stage.pairs for e in ((p.k_lo, p.k_hi) if p.kind != "wvn" else (p.k_parent,))]
    spread = max(ks) - min(ks)
    checks.append(ConstraintCheck("2 max|k_j - k_j'| <= min k_j", 2.0 * spread, min(ks) * (1 + 1e-15)))
    kmin = min(ks)
    vmax = math.fsum(2.0 * p.f * k for p, k in zip(stage.pairs, kp))
    checks.append(ConstraintCheck("||V||_inf <= min k^2 / 2", vmax, 0.5 * kmin * kmin))
    return checks


def check_stage(stage: StageParams, smallness: float = 1.0) -> list[ConstraintCheck]:
    """Run :func:`splitting_constraints` and raise on the first gating failure."""
    checks = splitting_constraints(stage, smallness)
    for c in checks:
        if c.gating and not c.ok:
            raise ConstraintViolation(f"stage {stage.n}: {c.name} fails "
                                      f"(lhs={c.lhs:.4g}, rhs={c.rhs:.4g})",
                                      constraint=c.name, margin=c.margin)
    return checks


# ------------------------------------------------------------------- envelope

@dataclass(frozen=True)
class EnvelopeSpec:
    """Envelope ``h`` with the requirement ``|V(x)| <= h(x)/(1+x)``."""

    family: str = "log"
    c: float = 10.0
    eps: float = 0.0
    table_x: tuple = ()
    table_h: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "log":
            return self.c * np.log(2.0 + x)
        if self.family == "power":
            return self.c * (1.0 + x) ** self.eps
        if self.family == "table":
            return np.interp(x, self.table_x, self.table_h)
        raise ValueError(f"unknown envelope family {self.family!r}")

    def validate(self, x_max: float = 1e9, n: int = 2001) -> None:
        xs = np.concatenate([[0.0], np.geomspace(1e-3, x_max, n)])
        h = self(xs)
        if np.any(h <= 0) or np.any(np.diff(h) < -1e-12 * np.abs(h[1:])):
            raise ValueError("envelope h must be positive and nondecreasing")
        r = h / (1.0 + xs)
        if np.any(np.diff(r) > 1e-12 * r[1:]):
            raise ValueError("h(x)/(1+x) must be nonincreasing")


@dataclass
class EnvelopeResult:
    ratio: float
    x_witness: float

    @property
    def passed(self) -> bool:
        return self.ratio <= 1.0


def check_envelope(xs, vs, env: EnvelopeSpec, raise_on_violation: bool = False) -> EnvelopeResult:
    """Supremum over samples of ``|V(x)| (1+x) / h(x)``."""
    xs = np.asarray(xs, dtype=float)
    vs = np.asarray(vs, dtype=float)
    ratio = np.abs(vs) * (1.0 + xs) / env(xs)
    i = int(np.argmax(ratio))
    res = EnvelopeResult(float(ratio[i]), float(xs[i]))
    if raise_on_violation and not res.passed:
        raise EnvelopeViolation(res.ratio, res.x_witness)
    return res


# -------------------------------------------------------------- serialization

def stage_to_config(stage: StageParams) -> str:
    """Human-readable ini text; round-trips through :func:`stage_from_config`."""
    cp = configparser.ConfigParser()
    cp["stage"] = {
        "n": str(stage.n), "g": repr(float(stage.g)), "g_tilde": repr(float(stage.g_tilde)),
        "x_start": repr(float(stage.x_start)), "a": repr(float(stage.a)),
        "f_tilde_cap": repr(float(stage.f_tilde_cap)), "mode": stage.mode,
    }
    for j, p in enumerate(stage.pairs):
        sec = {
            "k_parent_base": repr(float(p.k_parent.base)),
            "k_parent_offset": repr(float(p.k_parent.offset)),
            "f": repr(float(p.f)), "delta_k": repr(float(p.delta_k)), "kind": p.kind,
        }
        if p.tail_delta_k is not None:
            sec["tail_delta_k"] = repr(float(p.tail_delta_k))
        cp[f"pair.{j}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def stage_from_config(text: str) -> StageParams:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        s = cp["stage"]
        pairs = []
        j = 0
        while f"pair.{j}" in cp:
            sec = cp[f"pair.{j}"]
            tdk = sec.get("tail_delta_k")
            pairs.append(PairParams(
                k_parent=Energy(float(sec["k_parent_base"]), float(sec["k_parent_offset"])),
                f=float(sec["f"]), delta_k=float(sec["delta_k"]), kind=sec.get("kind", "split"),
                tail_delta_k=None if tdk is None else float(tdk)))
            j += 1
        return StageParams(n=int(s["n"]), g=float(s["g"]), g_tilde=float(s["g_tilde"]),
                           x_start=float(s["x_start"]), pairs=tuple(pairs), a=float(s["a"]),
                           f_tilde_cap=float(s["f_tilde_cap"]), mode=s.get("mode", "toy"))
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ConfigError(f"bad stage config: {exc}") from exc


def potential_csv(xs, vs, stride: int = 1) -> str:
    """CSV text ``x,V`` with a versioned header."""
    xs = np.asarray(xs)[::stride]
    vs = np.asarray(vs)[::stride]
    buf = io.StringIO()
    buf.write("# cantor_prufer potential v1\n")
    buf.write("x,V\n")
    for x, v in zip(xs.tolist(), vs.tolist()):
        buf.write(f"{x!r},{v!r}\n")
    return buf.getvalue()
