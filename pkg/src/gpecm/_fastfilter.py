"""Compiled inner loop of the within-segment EKF.

Mirrors :func:`gpecm.joint_ekf.ekf_step` step for step; the Python version is
the reference and the tests hold the two together.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SECONDS_PER_HOUR = 3600.0
LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-10

# field_lin return codes
OK = 0
NOT_PD = 1


@njit(cache=True)
def _ppoly_eval(c, x, z, nu):
    m = x.shape[0] - 1
    j = np.searchsorted(x, z, side="right") - 1
    if j < 0:
        j = 0
    elif j > m - 1:
        j = m - 1
    s = z - x[j]
    k = c.shape[0]
    out = 0.0
    if nu == 0:
        for p in range(k):
            out = out * s + c[p, j]
    else:
        # derivative: sum (k-1-p) c[p] s^(k-2-p)
        for p in range(k - 1):
            out = out * s + (k - 1 - p) * c[p, j]
    return out


@njit(cache=True)
def _chol_solve(Lc, b):
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= Lc[i, j] * y[j]
        y[i] = acc / Lc[i, i]
    out = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for j in range(i + 1, n):
            acc -= Lc[j, i] * out[j]
        out[i] = acc / Lc[i, i]
    return out


@njit(cache=True)
def field_lin(fp, x, P, mu, varz, inow, grad):
    """Physical mean and variance of one field; fills ``grad``.

    ``fp`` is the tuple built by ``joint_ekf._field_pack``.  Returns
    ``(value, var, floored, code)``.
    """
    vidx, nidx, uz, ui, zu, zgrp, has_z, has_i, gz, gi, sig2, c, floor, kuu = fp
    grad[:] = 0.0
    n = vidx.shape[0]
    gp_mean = 0.0
    gp_var = 0.0
    code = OK
    if n > 0:
        if not has_z and not has_i:
            gp_mean = x[vidx[0]]
            grad[vidx[0]] = c
        else:
            l = np.empty(n)
            dl = np.zeros(n)
            ki = np.ones(n)
            if has_i:
                for a in range(n):
                    ki[a] = math.exp(-0.5 * gi * (inow - ui[a]) ** 2)
            if has_z:
                denom = 1.0 / gz + varz
                scale = 1.0 / math.sqrt(gz * varz + 1.0)
                for a in range(n):
                    d = mu - uz[a]
                    l[a] = sig2 * ki[a] * math.exp(-0.5 * d * d / denom) * scale
                    dl[a] = -l[a] * d / denom
            else:
                for a in range(n):
                    l[a] = sig2 * ki[a]
            K = kuu.copy()
            tr = 0.0
            for a in range(n):
                K[a, a] += P[vidx[a], vidx[a]]
                tr += K[a, a]
            eps = JITTER * tr / n if tr > 0 else JITTER
            for a in range(n):
                K[a, a] += eps
            try:
                Lc = np.linalg.cholesky(K)
            except Exception:  # noqa: BLE001 - numba only supports bare handlers
                return 0.0, 0.0, False, NOT_PD
            vals = np.empty(n)
            for a in range(n):
                vals[a] = x[vidx[a]]
            delta = _chol_solve(Lc, vals)
            w = _chol_solve(Lc, l)
            for a in range(n):
                gp_mean += l[a] * delta[a]
            if has_z and varz > 0.0:
                # L = sc * D (G E_z G') D with D = diag(ki) and G the grid-to-unique-z indicator
                nu = zu.shape[0]
                c2 = 1.0 + 2.0 * gz * varz
                sc = sig2 * sig2 / math.sqrt(c2)
                Ez = np.empty((nu, nu))
                for a in range(nu):
                    for b in range(nu):
                        zb = 0.5 * (zu[a] + zu[b])
                        dz = zu[a] - zu[b]
                        Ez[a, b] = math.exp(-0.25 * gz * dz * dz - gz * (mu - zb) ** 2 / c2)
                # Tr(K^-1 L) = sc * sum_ab Ez[a, b] * (G' D K^-1 D G)[b, a]
                trace = 0.0
                col = np.zeros(n)
                for b in range(nu):
                    for a in range(n):
                        col[a] = ki[a] if zgrp[a] == b else 0.0
                    v = _chol_solve(Lc, col)
                    wb = np.zeros(nu)
                    for a in range(n):
                        wb[zgrp[a]] += ki[a] * v[a]
                    for a in range(nu):
                        trace += Ez[a, b] * wb[a]
                pd_ = np.zeros(nu)
                for a in range(n):
                    pd_[zgrp[a]] += ki[a] * delta[a]
                quad = 0.0
                for a in range(nu):
                    for b in range(nu):
                        quad += pd_[a] * Ez[a, b] * pd_[b]
                gp_var = sig2 - sc * trace + sc * quad - gp_mean * gp_mean
            else:
                s = 0.0
                for a in range(n):
                    s += l[a] * w[a]
                gp_var = sig2 - s
            if gp_var < 0.0:
                gp_var = 0.0
            dmean = 0.0
            for a in range(n):
                grad[vidx[a]] = c * w[a]
                dmean += dl[a] * delta[a]
            grad[0] += c * dmean
    if nidx >= 0:
        gp_mean += x[nidx]
        grad[nidx] = c
    value = c * (1.0 + gp_mean)
    var = c * c * gp_var
    if floor and value < 0.01 * c:
        grad[:] = 0.0
        return 0.01 * c, var, True, code
    return value, var, False, code


@njit(cache=True)
def _rc_gain(alpha, dt):
    x = alpha * dt
    decay = math.exp(-x)
    if abs(x) < 1e-8:
        gain = dt * (1.0 - 0.5 * x)
        dgain = -0.5 * dt * dt
    else:
        gain = -math.expm1(-x) / alpha
        dgain = (dt * decay - gain) / alpha
    return decay, gain, dgain


@njit(cache=True)
def run_segment(
    x, P, t, cur, volt, temp, tamb,
    fp_q, fp_a, fp_b, fp_r,
    ocv_c, ocv_x, r_c, c_c, noise_v2, noise_t2, q_batt, use_lambda, zlo, zhi,
):
    """Filter one segment in place on ``(x, P)``.

    ``fp_*`` are packed field descriptors for ``q_inv``, ``alpha``, ``beta``
    and ``r0``.  Returns residuals, innovation covariances, battery means,
    phi, floor count, clamp count and the index of a failed step (-1 if
    none).
    """
    n = x.shape[0]
    N = t.shape[0]
    res = np.empty((N, 2))
    S_all = np.empty((N, 2, 2))
    batt = np.empty((N, 3))
    phi = 0.0
    floors = 0
    clamps = 0
    g_q = np.empty(n)
    g_a = np.empty(n)
    g_b = np.empty(n)
    g_r = np.empty(n)
    Gb = np.empty((3, n))
    M = np.empty((3, n))
    B = np.empty((3, 3))
    tau = r_c * c_c
    for k in range(N):
        if k > 0:
            ip = cur[k - 1]
            dt = t[k] - t[k - 1]
            z = x[0]
            v1 = x[1]
            tc = x[2]
            vz = P[0, 0]
            q, _, fq, e0 = field_lin(fp_q, x, P, z, vz, ip, g_q)
            al, var_al, fa, e1 = field_lin(fp_a, x, P, z, vz, ip, g_a)
            be, var_be, fb, e2 = field_lin(fp_b, x, P, z, vz, ip, g_b)
            r0, var_r0, fr, e3 = field_lin(fp_r, x, P, z, vz, ip, g_r)
            if e0 + e1 + e2 + e3 > 0:
                return res, S_all, batt, phi, floors, clamps, k
            floors += fq + fa + fb + fr
            decay, gain, dgain = _rc_gain(al, dt)
            a_t = math.exp(-dt / tau)
            heat_gain = r_c * (1.0 - a_t)
            # mean
            x[0] = z + ip * dt * q / SECONDS_PER_HOUR
            x[1] = decay * v1 + be * gain * ip
            heat = v1 * ip + r0 * ip * ip
            steady = tamb[k - 1] + heat * r_c
            x[2] = steady + (tc - steady) * a_t
            # Jacobian battery rows
            dv_da = -dt * decay * v1 + be * ip * dgain
            dv_db = gain * ip
            cz = ip * dt / SECONDS_PER_HOUR
            ct = heat_gain * ip * ip
            for j in range(n):
                Gb[0, j] = cz * g_q[j]
                Gb[1, j] = dv_da * g_a[j] + dv_db * g_b[j]
                Gb[2, j] = ct * g_r[j]
            Gb[0, 0] += 1.0
            Gb[1, 1] += decay
            Gb[2, 1] += heat_gain * ip
            Gb[2, 2] += a_t
            # P <- G P G' with G = I outside the battery rows
            for r in range(3):
                for j in range(n):
                    acc = 0.0
                    for q2 in range(n):
                        acc += Gb[r, q2] * P[q2, j]
                    M[r, j] = acc
            for r in range(3):
                for r2 in range(3):
                    acc = 0.0
                    for q2 in range(n):
                        acc += M[r, q2] * Gb[r2, q2]
                    B[r, r2] = acc
            for j in range(3, n):
                for r in range(3):
                    m = M[r, j]
                    P[r, j] = m
                    P[j, r] = m
            for r in range(3):
                for r2 in range(3):
                    P[r, r2] = 0.5 * (B[r, r2] + B[r2, r])
            for r in range(3):
                P[r, r] += q_batt[r]
            if use_lambda:
                P[1, 1] += var_be * (ip * gain) ** 2 + var_al * v1 * v1
                P[2, 2] += var_r0 * (r_c * ip * ip * (1.0 - a_t)) ** 2
        # update
        ik = cur[k]
        z = x[0]
        r0, var_r0, fr, e3 = field_lin(fp_r, x, P, z, P[0, 0], ik, g_r)
        if e3 > 0:
            return res, S_all, batt, phi, floors, clamps, k
        vhat = _ppoly_eval(ocv_c, ocv_x, z, 0) + x[1] + r0 * ik
        e_v = volt[k] - vhat
        e_t = temp[k] - x[2]
        docv = _ppoly_eval(ocv_c, ocv_x, z, 1)
        # H0 = ik * g_r + docv e0 + e1 ; H1 = e2
        h0 = g_r
        for j in range(n):
            h0[j] = ik * g_r[j]
        h0[0] += docv
        h0[1] += 1.0
        ph0 = np.empty(n)
        ph1 = np.empty(n)
        for j in range(n):
            acc = 0.0
            for q2 in range(n):
                acc += P[j, q2] * h0[q2]
            ph0[j] = acc
            ph1[j] = P[j, 2]
        s00 = 0.0
        for j in range(n):
            s00 += h0[j] * ph0[j]
        s01 = ph0[2]
        s11 = P[2, 2]
        s00 += noise_v2
        s11 += noise_t2
        if use_lambda:
            s00 += var_r0 * ik * ik
        det = s00 * s11 - s01 * s01
        if not (s00 > 0.0 and det > 0.0):
            return res, S_all, batt, phi, floors, clamps, k
        i00 = s11 / det
        i01 = -s01 / det
        i11 = s00 / det
        # K = PH' S^-1
        k0 = np.empty(n)
        k1 = np.empty(n)
        for j in range(n):
            k0[j] = ph0[j] * i00 + ph1[j] * i01
            k1[j] = ph0[j] * i01 + ph1[j] * i11
        for j in range(n):
            x[j] += k0[j] * e_v + k1[j] * e_t
        # Joseph form expanded: P - K PH' - PH K' + K S K'
        for a in range(n):
            ks0 = k0[a] * s00 + k1[a] * s01
            ks1 = k0[a] * s01 + k1[a] * s11
            for b in range(a + 1):
                m = (0.5 * (P[a, b] + P[b, a]) - k0[a] * ph0[b] - k1[a] * ph1[b] - ph0[a] * k0[b]
                     - ph1[a] * k1[b] + ks0 * k0[b] + ks1 * k1[b])
                P[a, b] = m
                P[b, a] = m
        if x[0] < zlo:
            x[0] = zlo
            clamps += 1
        elif x[0] > zhi:
            x[0] = zhi
            clamps += 1
        quad = e_v * (i00 * e_v + i01 * e_t) + e_t * (i01 * e_v + i11 * e_t)
        phi += 0.5 * quad + 0.5 * (math.log(det) + 2.0 * LOG_2PI)
        res[k, 0] = e_v
        res[k, 1] = e_t
        S_all[k, 0, 0] = s00
        S_all[k, 0, 1] = s01
        S_all[k, 1, 0] = s01
        S_all[k, 1, 1] = s11
        batt[k, 0] = x[0]
        batt[k, 1] = x[1]
        batt[k, 2] = x[2]
    return res, S_all, batt, phi, floors, clamps, -1
