"""Compiled core: right-hand side, DOP853 step, adaptive loop and replay.

State layout (flat float64 vector):

    pair j (10 slots): theta_lo mod pi, delta_theta, logr2_lo, logr2_hi,
                       dtdk_lo, dtdk_hi, nr2_lo, nr2_hi, nu2_lo, nu2_hi
    probe i (6 slots): theta mod pi, logr2, dtdk, nr2, nu2, w
                       (w = int R^2 (1 + V sin^2/k^2), so dtdk = w / R^2)
    last slot:         running integral of V

The first ``nact`` pairs drive V; the remaining pairs and all probes are
passive.  Angles are kept in [0, pi) and the number of removed half turns is
counted separately, so the unwrapped angle is exact up to one rounding.
"""

import math

import numpy as np
from numba import njit
from scipy.integrate._ivp.dop853_coefficients import A as _A, B as _B, C as _C, E3 as _E3, E5 as _E5

from .potentials import POST_FLIP, PRE_FLIP, TAIL, pair_potential

A = np.ascontiguousarray(_A[:12, :12])
B = np.ascontiguousarray(_B)
C = np.ascontiguousarray(_C[:12])
E3 = np.ascontiguousarray(_E3)
E5 = np.ascontiguousarray(_E5)

PI_HI = math.pi
PI_LO = 1.2246467991473532e-16

PAIR_W = 10
PROBE_W = 6

# columns of the pair parameter table
K_LO, K_HI, DK, KP, F, TAILCAP, TAIL_AT, FLIP_AT = range(8)

MODEL_FULL = 0
MODEL_IDEAL = 1

ST_DONE = 0
ST_FULL = 2
ST_UNDERFLOW = -1
ST_NOT_BRACKETED = -2


@njit(cache=True)
def stage_potential(x, y, pk, nact, phase, g):
    v = 0.0
    for j in range(nact):
        b = PAIR_W * j
        v += pair_potential(phase[j], x, y[b], y[b + 1], pk[j, F], pk[j, KP], pk[j, TAILCAP], g)
    return v


@njit(cache=True)
def rhs(x, y, out, pk, nact, npas, probe_k, phase, g, model):
    v = stage_potential(x, y, pk, nact, phase, g)
    npair = nact + npas
    for j in range(npair):
        b = PAIR_W * j
        k1 = pk[j, K_LO]
        k2 = pk[j, K_HI]
        dk = pk[j, DK]
        t1 = y[b]
        d = y[b + 1]
        t2 = t1 + d
        if model == MODEL_IDEAL:
            # averaged single-pair dynamics, no oscillatory terms
            ph = phase[j] if j < nact else PRE_FLIP
            e1 = math.exp(y[b + 2])
            e2 = math.exp(y[b + 3])
            out[b] = k1
            if ph == TAIL:
                m = g / (2.0 * x)
                if pk[j, TAILCAP] < m:
                    m = pk[j, TAILCAP]
                c = 0.125 * m * pk[j, KP] / k1
                out[b + 1] = dk + c * math.sin(2.0 * d)
                out[b + 2] = -c * (1.0 + math.cos(2.0 * d))
                out[b + 3] = out[b + 2]
            else:
                s = 1.0 if ph == PRE_FLIP else -1.0
                out[b + 1] = dk + s * pk[j, F] * math.sin(d)
                out[b + 2] = -s * pk[j, F] * math.cos(d)
                out[b + 3] = out[b + 2]
            out[b + 4] = 1.0
            out[b + 5] = 1.0
            out[b + 6] = e1
            out[b + 7] = e2
            out[b + 8] = 0.5 * e1 / (k1 * k1)
            out[b + 9] = 0.5 * e2 / (k2 * k2)
            continue
        s1 = math.sin(t1)
        c1 = math.cos(t1)
        s2 = math.sin(t2)
        c2 = math.cos(t2)
        s1s = s1 * s1
        s2s = s2 * s2
        sin2t1 = 2.0 * s1 * c1
        sin2t2 = 2.0 * s2 * c2
        out[b] = k1 - v / k1 * s1s
        # exact difference of the two angle equations, no cancellation in dk
        out[b + 1] = dk * (1.0 + v * s1s / (k1 * k2)) - v / k2 * math.sin(t1 + t2) * math.sin(d)
        out[b + 2] = v / k1 * sin2t1
        out[b + 3] = v / k2 * sin2t2
        out[b + 4] = 1.0 + v / (k1 * k1) * s1s - v / k1 * sin2t1 * y[b + 4]
        out[b + 5] = 1.0 + v / (k2 * k2) * s2s - v / k2 * sin2t2 * y[b + 5]
        e1 = math.exp(y[b + 2])
        e2 = math.exp(y[b + 3])
        out[b + 6] = e1
        out[b + 7] = e2
        out[b + 8] = e1 * s1s / (k1 * k1)
        out[b + 9] = e2 * s2s / (k2 * k2)
    base = PAIR_W * npair
    for i in range(probe_k.size):
        b = base + PROBE_W * i
        k = probe_k[i]
        t = y[b]
        s = math.sin(t)
        ss = s * s
        sin2t = 2.0 * s * math.cos(t)
        out[b] = k - v / k * ss
        out[b + 1] = v / k * sin2t
        out[b + 2] = 1.0 + v / (k * k) * ss - v / k * sin2t * y[b + 2]
        e = math.exp(y[b + 1])
        out[b + 3] = e
        out[b + 4] = e * ss / (k * k)
        out[b + 5] = e * (1.0 + v * ss / (k * k))
    out[y.size - 1] = v
    return v


@njit(cache=True)
def dop_step(x, h, x_new, y, comp, K, ynew, cnew, ytmp, pk, nact, npas, probe_k, phase, g, model):
    """One DOP853 step; K[0] must hold f(x, y).  Returns V at the new point."""
    n = y.size
    for s in range(1, 12):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += A[s, j] * K[j, i]
            ytmp[i] = y[i] + h * acc
        rhs(x + C[s] * h, ytmp, K[s], pk, nact, npas, probe_k, phase, g, model)
    for i in range(n):
        acc = 0.0
        for j in range(12):
            acc += B[j] * K[j, i]
        # compensated update
        t = h * acc - comp[i]
        sm = y[i] + t
        cnew[i] = (sm - y[i]) - t
        ynew[i] = sm
    return rhs(x_new, ynew, K[12], pk, nact, npas, probe_k, phase, g, model)


@njit(cache=True)
def error_norm(h, y, ynew, K, atol, rtol, nctrl):
    e5 = 0.0
    e3 = 0.0
    for i in range(nctrl):
        sc = atol[i] + rtol * max(abs(y[i]), abs(ynew[i]))
        a5 = 0.0
        a3 = 0.0
        for j in range(13):
            a5 += E5[j] * K[j, i]
            a3 += E3[j] * K[j, i]
        a5 /= sc
        a3 /= sc
        e5 += a5 * a5
        e3 += a3 * a3
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    return abs(h) * e5 / math.sqrt((e5 + 0.01 * e3) * nctrl)


@njit(cache=True)
def angle_slots(nact, npas, nprobe):
    idx = np.empty(nact + npas + nprobe, dtype=np.int64)
    for j in range(nact + npas):
        idx[j] = PAIR_W * j
    for i in range(nprobe):
        idx[nact + npas + i] = PAIR_W * (nact + npas) + PROBE_W * i
    return idx


@njit(cache=True)
def reduce_angles(y, comp, wind, slots):
    for a in range(slots.size):
        i = slots[a]
        while y[i] >= PI_HI:
            y[i] = y[i] - PI_HI
            comp[i] += PI_LO
            wind[a] += 1


@njit(cache=True)
def _record_state(r, x, y, wind, rec_x, rec_y, rec_w, rec_step, nstep):
    rec_x[r] = x
    rec_y[r, :] = y
    rec_w[r, :] = wind
    rec_step[r] = nstep


@njit(cache=True)
def integrate(st_x, y, comp, wind, K, st_h, x_end, pk, nact, phase, g, model,
              atol, rtol, hmax, hmin, event_tol, decim,
              xs, hs, vs, ivs, nstep_io,
              rec_x, rec_y, rec_w, rec_step, nrec_io,
              ev_step, ev_pair, ev_kind, ev_x, nev_io, order_fail):
    """Adaptive integration of the active pairs from st_x[0] to x_end.

    Mutates the state arrays in place.  ``ev_kind``: 0 flip event,
    1 tail switch, 2 tail switch reached while still before the flip.
    Returns (status, n_rejected, n_rhs).
    """
    n = y.size
    probe_k = np.empty(0)
    npas = 0
    ynew = np.empty(n)
    cnew = np.empty(n)
    ytmp = np.empty(n)
    slots = angle_slots(nact, 0, 0)
    x = st_x[0]
    h = st_h[0]
    nstep = nstep_io[0]
    nrec = nrec_io[0]
    nev = nev_io[0]
    nrej = 0
    nrhs = 0
    rejected = False
    status = ST_DONE
    while x < x_end:
        if nstep >= xs.size or nrec >= rec_x.size or nev + nact >= ev_step.size:
            status = ST_FULL
            break
        if h > hmax:
            h = hmax
        h_try = h
        # nearest breakpoint ahead
        xt = x_end
        for j in range(nact):
            if phase[j] != TAIL and pk[j, TAIL_AT] > x and pk[j, TAIL_AT] < xt:
                xt = pk[j, TAIL_AT]
        clipped = False
        if x + h >= xt:
            h = xt - x
            x_new = xt
            clipped = True
        else:
            x_new = x + h
        if h < hmin * max(1.0, abs(x)):
            status = ST_UNDERFLOW
            break
        v_new = dop_step(x, h, x_new, y, comp, K, ynew, cnew, ytmp, pk, nact, npas, probe_k,
                         phase, g, model)
        nrhs += 12
        err = error_norm(h, y, ynew, K, atol, rtol, n)
        if not (err <= 1.0):
            if err != err:
                fac = 0.2
            else:
                fac = max(0.2, 0.9 * err ** -0.125)
            h = h * fac
            rejected = True
            nrej += 1
            continue
        # flip events inside the accepted step
        jbest = -1
        sbest = h
        for j in range(nact):
            if phase[j] != PRE_FLIP:
                continue
            tgt = pk[j, FLIP_AT]
            b = PAIR_W * j + 1
            if ynew[b] < tgt:
                continue
            da = y[b] - tgt
            if da >= 0.0:
                status = ST_NOT_BRACKETED
                ev_pair[nev] = j
                ev_x[nev] = x
                break
            sa = 0.0
            sb = h
            db = ynew[b] - tgt
            side = 0
            s = h
            for it in range(200):
                s = sb - db * (sb - sa) / (db - da)
                if not (s > sa and s < sb):
                    s = 0.5 * (sa + sb)
                dop_step(x, s, x + s, y, comp, K, ynew, cnew, ytmp, pk, nact, npas, probe_k,
                         phase, g, model)
                nrhs += 12
                ds = ynew[b] - tgt
                if abs(ds) <= event_tol * (1.0 + tgt):
                    break
                if ds < 0.0:
                    sa = s
                    da = ds
                    if side == -1:
                        db *= 0.5
                    side = -1
                else:
                    sb = s
                    db = ds
                    if side == 1:
                        da *= 0.5
                    side = 1
            if s < sbest or jbest < 0:
                sbest = s
                jbest = j
        if status == ST_NOT_BRACKETED:
            break
        if jbest >= 0:
            clipped = False
            x_new = x + sbest
            v_new = dop_step(x, sbest, x_new, y, comp, K, ynew, cnew, ytmp, pk, nact, npas,
                             probe_k, phase, g, model)
            nrhs += 12
            h_used = sbest
        else:
            h_used = h
        # accept
        for i in range(n):
            y[i] = ynew[i]
            comp[i] = cnew[i]
        reduce_angles(y, comp, wind, slots)
        x = x_new
        xs[nstep] = x
        hs[nstep] = h_used
        switched = False
        if jbest >= 0:
            phase[jbest] = POST_FLIP
            ev_step[nev] = nstep
            ev_pair[nev] = jbest
            ev_kind[nev] = 0
            ev_x[nev] = x
            nev += 1
            switched = True
        if clipped:
            for j in range(nact):
                if phase[j] != TAIL and pk[j, TAIL_AT] == x:
                    ev_step[nev] = nstep
                    ev_pair[nev] = j
                    ev_kind[nev] = 1
                    if phase[j] == PRE_FLIP and pk[j, FLIP_AT] < math.inf:
                        ev_kind[nev] = 2
                        order_fail[0] += 1
                    ev_x[nev] = x
                    nev += 1
                    phase[j] = TAIL
                    switched = True
        if switched:
            v_new = rhs(x, y, K[0], pk, nact, npas, probe_k, phase, g, model)
            nrhs += 1
        else:
            for i in range(n):
                K[0, i] = K[12, i]
        vs[nstep] = v_new
        ivs[nstep] = y[n - 1]
        nstep += 1
        if switched or nstep % decim == 0 or x >= x_end:
            _record_state(nrec, x, y, wind, rec_x, rec_y, rec_w, rec_step, nstep)
            nrec += 1
        # step size for the next attempt
        if err == 0.0:
            fac = 10.0
        else:
            fac = min(10.0, 0.9 * err ** -0.125)
        if rejected:
            fac = min(1.0, fac)
        rejected = False
        if jbest >= 0 or clipped:
            # a clipped step says nothing about the attainable size
            h = max(h_try, h_used)
        else:
            h = h_used * fac
    st_x[0] = x
    st_h[0] = h
    nstep_io[0] = nstep
    nrec_io[0] = nrec
    nev_io[0] = nev
    return status, nrej, nrhs


@njit(cache=True)
def replay(x0, y, comp, wind, pk, nact, npas, probe_k, phase, g, model,
           xs, hs, sw_step, sw_pair, sw_phase, x_stop, decim,
           rec_x, rec_y, rec_w, rec_step, atol, rtol):
    """Re-integrate the anchors together with passive channels on a recorded grid.

    Reproduces the anchor components bit for bit.  Stops at ``x_stop`` with a
    final partial step if needed.  Returns (number of records, x reached,
    max error norm of the passive components).
    """
    n = y.size
    K = np.empty((13, n))
    ynew = np.empty(n)
    cnew = np.empty(n)
    ytmp = np.empty(n)
    slots = angle_slots(nact, npas, probe_k.size)
    rhs(x0, y, K[0], pk, nact, npas, probe_k, phase, g, model)
    x = x0
    nrec = 0
    isw = 0
    worst = 0.0
    npas0 = PAIR_W * nact
    _record_state(nrec, x, y, wind, rec_x, rec_y, rec_w, rec_step, 0)
    nrec += 1
    for i in range(xs.size):
        if x >= x_stop:
            break
        h = hs[i]
        x_new = xs[i]
        partial = False
        if x_new > x_stop:
            h = x_stop - x
            x_new = x_stop
            partial = True
        dop_step(x, h, x_new, y, comp, K, ynew, cnew, ytmp, pk, nact, npas, probe_k, phase, g, model)
        # diagnostic: local error of the passive channels on the anchor grid
        e5 = 0.0
        e3 = 0.0
        for c in range(npas0, n - 1):
            sc = atol[c] + rtol * max(abs(y[c]), abs(ynew[c]))
            a5 = 0.0
            a3 = 0.0
            for j in range(13):
                a5 += E5[j] * K[j, c]
                a3 += E3[j] * K[j, c]
            e5 += (a5 / sc) ** 2
            e3 += (a3 / sc) ** 2
        if e5 > 0.0:
            en = abs(h) * e5 / math.sqrt((e5 + 0.01 * e3) * max(1, n - 1 - npas0))
            if en > worst:
                worst = en
        for c in range(n):
            y[c] = ynew[c]
            comp[c] = cnew[c]
        reduce_angles(y, comp, wind, slots)
        x = x_new
        switched = False
        while isw < sw_step.size and sw_step[isw] == i:
            if not partial:
                phase[sw_pair[isw]] = sw_phase[isw]
                switched = True
            isw += 1
        if switched:
            rhs(x, y, K[0], pk, nact, npas, probe_k, phase, g, model)
        else:
            for c in range(n):
                K[0, c] = K[12, c]
        if switched or (i + 1) % decim == 0 or x >= x_stop or i == xs.size - 1:
            if nrec < rec_x.size:
                _record_state(nrec, x, y, wind, rec_x, rec_y, rec_w, rec_step, i + 1)
                nrec += 1
    return nrec, x, worst


@njit(cache=True)
def fixed_rk5_table(vtab, dx, k, n_steps):
    """Butcher's six-stage fifth-order RK for one Prufer channel on a potential table.

    ``vtab`` holds V at spacing ``dx/4``; the stage nodes 0, 1/4, 1/2, 3/4, 1
    are all table points.  Compensated sums.  Returns (theta, logr2, nr2).
    """
    th = 0.0
    lr = 0.0
    nr = 0.0
    cth = 0.0
    clr = 0.0
    cnr = 0.0
    for i in range(n_steps):
        b = 4 * i
        a1, b1, c1 = _chan(th, lr, vtab[b], k)
        a2, b2, c2 = _chan(th + dx * a1 / 4.0, lr + dx * b1 / 4.0, vtab[b + 1], k)
        a3, b3, c3 = _chan(th + dx * (a1 + a2) / 8.0, lr + dx * (b1 + b2) / 8.0, vtab[b + 1], k)
        a4, b4, c4 = _chan(th + dx * (-0.5 * a2 + a3), lr + dx * (-0.5 * b2 + b3),
                           vtab[b + 2], k)
        a5, b5, c5 = _chan(th + dx * (3.0 * a1 + 9.0 * a4) / 16.0,
                           lr + dx * (3.0 * b1 + 9.0 * b4) / 16.0, vtab[b + 3], k)
        a6, b6, c6 = _chan(th + dx * (-3.0 * a1 + 2.0 * a2 + 12.0 * a3 - 12.0 * a4 + 8.0 * a5) / 7.0,
                           lr + dx * (-3.0 * b1 + 2.0 * b2 + 12.0 * b3 - 12.0 * b4 + 8.0 * b5) / 7.0,
                           vtab[b + 4], k)
        th, cth = _kahan(th, cth, dx * (7.0 * a1 + 32.0 * a3 + 12.0 * a4 + 32.0 * a5 + 7.0 * a6) / 90.0)
        lr, clr = _kahan(lr, clr, dx * (7.0 * b1 + 32.0 * b3 + 12.0 * b4 + 32.0 * b5 + 7.0 * b6) / 90.0)
        nr, cnr = _kahan(nr, cnr, dx * (7.0 * c1 + 32.0 * c3 + 12.0 * c4 + 32.0 * c5 + 7.0 * c6) / 90.0)
    return th, lr, nr


@njit(cache=True)
def _kahan(s, c, inc):
    y = inc - c
    t = s + y
    return t, (t - s) - y


@njit(cache=True)
def _chan(th, lr, v, k):
    s = math.sin(th)
    return k - v / k * s * s, v / k * 2.0 * s * math.cos(th), math.exp(lr)
