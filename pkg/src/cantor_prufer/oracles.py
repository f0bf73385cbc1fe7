"""Reference results that do not go through the adaptive engine.

The averaged single-pair system

    (log R^2)' = -f cos(dth),   dth' = dk + f sin(dth),   R(0) = 1, dth(0) = 0

is separable, and ``R^2 (dk + f sin dth)`` is conserved.  The functions
below evaluate its position, amplitude and norm as functions of the angle by
quadrature.  :func:`brute_force_small_instance` is a fixed-step
fifth-order path through the Prufer equations on a tabulated potential.
"""

import math

import numpy as np
from scipy import integrate

from . import _kernel as kern
from .errors import TargetUnreachable


def idealized_conserved(f, delta_k, delta_theta):
    """Squared amplitude of the averaged system at angle ``delta_theta``."""
    return delta_k / (delta_k + f * math.sin(delta_theta))


def _breaks(f, delta_k, target):
    # the integrands are sharply peaked where dk + f sin(phi) is small: near 0 and pi
    scale = max(delta_k / f, 1e-300)
    pts = [math.pi / 2]
    d = math.pi / 4
    while d > 0.1 * scale:
        pts += [d, math.pi - d]
        d *= 0.25
    return sorted(set(p for p in pts if 0.0 < p < target))


def _quad(fun, target, pts):
    edges = [0.0] + list(pts) + [target]
    total = []
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(fun, a, b, epsabs=0.0, epsrel=1e-13, limit=200)
        total.append(val)
    return math.fsum(total)


def idealized_x_of_angle(f, delta_k, target):
    """Position where the averaged angle difference first equals ``target``."""
    if not (delta_k > 0 and f > delta_k):
        raise ValueError("need 0 < delta_k < f")
    alpha = math.asin(delta_k / f)
    if target >= math.pi + alpha:
        raise TargetUnreachable(f"target {target} at or beyond the fixed point pi + alpha")
    if target <= 0.0:
        return 0.0
    return _quad(lambda p: 1.0 / (delta_k + f * math.sin(p)), target,
                 _breaks(f, delta_k, target))


def idealized_x_closed_form(f, delta_k, target):
    """Antiderivative of ``1/(dk + f sin phi)`` for ``f > dk`` (second opinion)."""
    s = math.sqrt(f * f - delta_k * delta_k)
    fms = delta_k * delta_k / (f + s)  # f - s without cancellation

    def prim(p):
        t = math.tan(0.5 * p)
        return math.log(abs((delta_k * t + fms) / (delta_k * t + f + s))) / s

    if target < math.pi:
        return prim(target) - prim(0.0)
    # tan(phi/2) passes through infinity at pi, where the primitive tends to 0
    return (0.0 - prim(0.0)) + (prim(target) - 0.0)


def idealized_norm(f, delta_k, upto_angle):
    """Accumulated ``int R^2 dx`` of the averaged system up to ``upto_angle``."""
    if upto_angle <= 0.0:
        return 0.0
    return _quad(lambda p: delta_k / (delta_k + f * math.sin(p)) ** 2, upto_angle,
                 _breaks(f, delta_k, upto_angle))


def small_angle_norm(f, g_tilde, gamma):
    """Leading-order norm up to a small angle ``gamma``: ``1/(f (1 + 1/(g_tilde gamma)))``."""
    return 1.0 / (f * (1.0 + 1.0 / (g_tilde * gamma)))


def brute_force_small_instance(v_table, k, x_end, fine_step):
    """Fixed-step fifth-order RK for one Prufer channel, ``theta(0) = 0``, ``R(0) = 1``.

    ``v_table`` samples V at spacing ``fine_step / 4`` from ``x = 0``.
    Returns ``(theta, log_r2, norm_r2)`` at ``x_end``.
    """
    if fine_step > (math.pi / k) / 200 * (1 + 1e-12):
        raise ValueError("fine_step must not exceed (pi/k)/200")
    n = int(round(x_end / fine_step))
    if abs(n * fine_step - x_end) > 1e-9 * max(1.0, x_end):
        raise ValueError("x_end must be a multiple of fine_step")
    v_table = np.ascontiguousarray(v_table, dtype=float)
    if v_table.size < 4 * n + 1:
        raise ValueError("potential table too short")
    return kern.fixed_rk5_table(v_table, float(fine_step), float(k), n)


def tabulate_potential(stage, x_end, dx, theta0=0.0):
    """Self-consistent V on a uniform grid, by fixed-step DOP853 on the anchors.

    Only valid before the first phase change of any pair; that is checked.
    """
    from .engine import IntegratorControls, JointState, _pair_table, _state_vector

    if x_end >= min(stage.tail_start(j) for j in range(len(stage.pairs))):
        raise ValueError("tabulation range crosses a tail switch")
    n = int(round(x_end / dx))
    npair = len(stage.pairs)
    pk = _pair_table(stage)
    init = JointState.initial(npair, theta0, stage.x_start)
    y, wind = _state_vector(init)
    comp = np.zeros_like(y)
    xs = stage.x_start + dx * np.arange(1, n + 1)
    hs = np.full(n, dx)
    phase = np.zeros(npair, dtype=np.int64)
    rec_x = np.empty(n + 2)
    rec_y = np.empty((n + 2, y.size))
    rec_w = np.empty((n + 2, npair), dtype=np.int64)
    rec_s = np.empty(n + 2, dtype=np.int64)
    empty = np.empty(0, dtype=np.int64)
    ctl = IntegratorControls()
    nrec, _, _ = kern.replay(stage.x_start, y, comp, wind, pk, npair, 0, np.empty(0), phase,
                             stage.g, kern.MODEL_FULL, xs, hs, empty, empty, empty, xs[-1], 1,
                             rec_x, rec_y, rec_w, rec_s, ctl.atol_vector(npair, 0), ctl.rel_tol)
    v = np.array([kern.stage_potential(rec_x[i], rec_y[i], pk, npair, phase, stage.g)
                  for i in range(nrec)])
    ry = rec_y[:nrec]
    for j in range(npair):
        tgt = stage.pairs[j].flip_target
        if np.any(ry[:, kern.PAIR_W * j + 1] >= tgt):
            raise ValueError("tabulation range crosses a flip event")
    return rec_x[:nrec], v, ry


def tail_series_closed_form(r2, delta_k, g, x0, coeff=1.0 / 8.0):
    """Continuum estimate of the tail norm beyond ``x0`` when ``(log R^2)' = -coeff * m``.

    ``m = min(delta_k, g/2x)``; ``r2`` is ``R^2(x0)``.  Infinite when the
    power-law stage decays too slowly to be integrable.
    """
    p = coeff * g / 2.0
    if p <= 1.0:
        return math.inf
    x_star = max(g / (2.0 * delta_k), x0)
    lam = coeff * delta_k * (x_star - x0)
    return r2 * ((1.0 - math.exp(-lam)) / (coeff * delta_k) + math.exp(-lam) * x_star / (p - 1.0))
