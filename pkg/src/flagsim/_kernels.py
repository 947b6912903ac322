"""Numba kernels for the elastic force/Jacobian inner loops.

Mirrors the vectorized numpy implementation in elastic.py; the two paths are
held equal to machine precision by tests. Import failures (no numba) leave
AVAILABLE False and the numpy path takes over.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _transport(v, t0, t1, out):
    """Rotate v by the minimal rotation taking t0 onto t1."""
    axis = np.empty(3)
    _cross(t0, t1, axis)
    an = np.sqrt(_dot(axis, axis))
    if an <= 1e-14:
        out[0] = v[0]
        out[1] = v[1]
        out[2] = v[2]
        return
    b0 = axis[0] / an
    b1 = axis[1] / an
    b2 = axis[2] / an
    n0 = np.empty(3)
    n1 = np.empty(3)
    bv = np.empty(3)
    bv[0] = b0
    bv[1] = b1
    bv[2] = b2
    _cross(t0, bv, n0)
    _cross(t1, bv, n1)
    c_t = _dot(v, t0)
    c_n = _dot(v, n0)
    c_b = v[0] * b0 + v[1] * b1 + v[2] * b2
    for k in range(3):
        out[k] = c_t * t1[k] + c_n * n1[k] + c_b * bv[k]


@njit(cache=True)
def geometry_and_gradient(positions, thetas, prev_d1, prev_tangents, prev_ref_twist,
                          rest_lengths, rest_voronoi, rest_kappa, rest_twist,
                          ea, ei, gj, min_edge):
    """Adapted frames, elastic energy, and the energy gradient.

    Returns (ok, lengths, tangents, d1, d2, ref_twist, m1, m2, grad, energy,
    aux) where aux stacks per-spring quantities used by the Hessian kernel:
    [kb(3), tilde_t(3), tilde_d1(3), tilde_d2(3), chi, kappa1, kappa2, tau].
    ok is False when an edge degenerates below min_edge.
    """
    n = positions.shape[0]
    m = n - 1
    s = n - 2
    dof = 4 * n - 1

    lengths = np.empty(m)
    tangents = np.empty((m, 3))
    d1 = np.empty((m, 3))
    d2 = np.empty((m, 3))
    ref_twist = np.empty(s)
    m1 = np.empty((m, 3))
    m2 = np.empty((m, 3))
    grad = np.zeros(dof)
    aux = np.empty((s, 16))
    energy = 0.0

    for j in range(m):
        ex = positions[j + 1, 0] - positions[j, 0]
        ey = positions[j + 1, 1] - positions[j, 1]
        ez = positions[j + 1, 2] - positions[j, 2]
        ln = np.sqrt(ex * ex + ey * ey + ez * ez)
        if not np.isfinite(ln) or ln < min_edge:
            return (False, lengths, tangents, d1, d2, ref_twist, m1, m2, grad,
                    0.0, aux)
        lengths[j] = ln
        tangents[j, 0] = ex / ln
        tangents[j, 1] = ey / ln
        tangents[j, 2] = ez / ln

    tmp = np.empty(3)
    for j in range(m):
        _transport(prev_d1[j], prev_tangents[j], tangents[j], tmp)
        # project out drift and renormalize
        dt_ = _dot(tmp, tangents[j])
        v0 = tmp[0] - dt_ * tangents[j, 0]
        v1 = tmp[1] - dt_ * tangents[j, 1]
        v2 = tmp[2] - dt_ * tangents[j, 2]
        vn = np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
        d1[j, 0] = v0 / vn
        d1[j, 1] = v1 / vn
        d1[j, 2] = v2 / vn
        _cross(tangents[j], d1[j], tmp)
        d2[j, 0] = tmp[0]
        d2[j, 1] = tmp[1]
        d2[j, 2] = tmp[2]
        c = np.cos(thetas[j])
        si = np.sin(thetas[j])
        for k in range(3):
            m1[j, k] = c * d1[j, k] + si * d2[j, k]
            m2[j, k] = -si * d1[j, k] + c * d2[j, k]

    # reference twist update
    ut = np.empty(3)
    w = np.empty(3)
    for i in range(s):
        _transport(d1[i], tangents[i], tangents[i + 1], ut)
        c = np.cos(prev_ref_twist[i])
        si = np.sin(prev_ref_twist[i])
        _cross(tangents[i + 1], ut, tmp)
        for k in range(3):
            ut[k] = c * ut[k] + si * tmp[k]
        # signed angle from ut to d1[i+1] about tangents[i+1]
        _cross(ut, d1[i + 1], w)
        dn = 0.0
        sn = 0.0
        for k in range(3):
            dn += (ut[k] - d1[i + 1, k]) ** 2
            sn += (ut[k] + d1[i + 1, k]) ** 2
        ang = 2.0 * np.arctan2(np.sqrt(dn), np.sqrt(sn))
        if _dot(tangents[i + 1], w) < 0.0:
            ang = -ang
        ref_twist[i] = prev_ref_twist[i] + ang

    # stretching
    for j in range(m):
        strain = lengths[j] / rest_lengths[j] - 1.0
        energy += 0.5 * ea * strain * strain * rest_lengths[j]
        g = ea * strain
        for k in range(3):
            grad[4 * j + k] -= g * tangents[j, k]
            grad[4 * (j + 1) + k] += g * tangents[j, k]

    # bending + twisting
    kb = np.empty(3)
    tilde_t = np.empty(3)
    tilde_d1v = np.empty(3)
    tilde_d2v = np.empty(3)
    dk1_de = np.empty(3)
    dk1_df = np.empty(3)
    dk2_de = np.empty(3)
    dk2_df = np.empty(3)
    gt0 = np.empty(3)
    gt2 = np.empty(3)
    c1 = np.empty(3)
    c2 = np.empty(3)
    for i in range(s):
        te = tangents[i]
        tf = tangents[i + 1]
        le = lengths[i]
        lf = lengths[i + 1]
        chi = 1.0 + _dot(te, tf)
        _cross(te, tf, kb)
        for k in range(3):
            kb[k] = 2.0 * kb[k] / chi
            tilde_t[k] = (te[k] + tf[k]) / chi
            tilde_d1v[k] = (m1[i, k] + m1[i + 1, k]) / chi
            tilde_d2v[k] = (m2[i, k] + m2[i + 1, k]) / chi
        k1 = 0.5 * (_dot(kb, m2[i]) + _dot(kb, m2[i + 1]))
        k2 = -0.5 * (_dot(kb, m1[i]) + _dot(kb, m1[i + 1]))
        tau = thetas[i + 1] - thetas[i] + ref_twist[i]

        _cross(tf, tilde_d2v, c1)
        _cross(te, tilde_d2v, c2)
        for k in range(3):
            dk1_de[k] = (-k1 * tilde_t[k] + c1[k]) / le
            dk1_df[k] = (-k1 * tilde_t[k] - c2[k]) / lf
        _cross(tf, tilde_d1v, c1)
        _cross(te, tilde_d1v, c2)
        for k in range(3):
            dk2_de[k] = (-k2 * tilde_t[k] - c1[k]) / le
            dk2_df[k] = (-k2 * tilde_t[k] + c2[k]) / lf

        vor = rest_voronoi[i]
        dk1 = (k1 - rest_kappa[i, 0]) / vor
        dk2 = (k2 - rest_kappa[i, 1]) / vor
        dtau = (tau - rest_twist[i]) / vor
        energy += 0.5 * ei * ((k1 - rest_kappa[i, 0]) * dk1 + (k2 - rest_kappa[i, 1]) * dk2)
        energy += 0.5 * gj * (tau - rest_twist[i]) * dtau

        base = 4 * i
        for k in range(3):
            gt0[k] = -0.5 / le * kb[k]
            gt2[k] = 0.5 / lf * kb[k]
        for k in range(3):
            grad[base + k] += ei * (-dk1_de[k] * dk1 - dk2_de[k] * dk2) \
                + gj * dtau * gt0[k]
            grad[base + 4 + k] += ei * ((dk1_de[k] - dk1_df[k]) * dk1
                                        + (dk2_de[k] - dk2_df[k]) * dk2) \
                + gj * dtau * (-(gt0[k] + gt2[k]))
            grad[base + 8 + k] += ei * (dk1_df[k] * dk1 + dk2_df[k] * dk2) \
                + gj * dtau * gt2[k]
        grad[base + 3] += ei * (-0.5 * _dot(kb, m1[i]) * dk1
                                - 0.5 * _dot(kb, m2[i]) * dk2) - gj * dtau
        grad[base + 7] += ei * (-0.5 * _dot(kb, m1[i + 1]) * dk1
                                - 0.5 * _dot(kb, m2[i + 1]) * dk2) + gj * dtau

        for k in range(3):
            aux[i, k] = kb[k]
            aux[i, 3 + k] = tilde_t[k]
            aux[i, 6 + k] = tilde_d1v[k]
            aux[i, 9 + k] = tilde_d2v[k]
        aux[i, 12] = chi
        aux[i, 13] = k1
        aux[i, 14] = k2
        aux[i, 15] = tau

    return (True, lengths, tangents, d1, d2, ref_twist, m1, m2, grad, energy, aux)


@njit(cache=True)
def _outer_add(h, r0, c0, a, b, w):
    for i in range(3):
        for j in range(3):
            h[r0 + i, c0 + j] += w * a[i] * b[j]


@njit(cache=True)
def _block_add(h, r0, c0, blk, sign):
    for i in range(3):
        for j in range(3):
            h[r0 + i, c0 + j] += sign * blk[i, j]


@njit(cache=True)
def _crossmat(v, out):
    out[0, 0] = 0.0
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 1] = 0.0
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    out[2, 2] = 0.0


@njit(cache=True)
def hessian_dense(lengths, tangents, m1, m2, aux, rest_lengths, rest_voronoi,
                  rest_kappa, rest_twist, ea, ei, gj, dof):
    """Dense energy Hessian over all DOFs (interleaved layout), symmetrized."""
    m = lengths.shape[0]
    s = m - 1
    hess = np.zeros((dof, dof))
    eye = np.eye(3)

    # stretching blocks
    blk = np.empty((3, 3))
    for j in range(m):
        ln = lengths[j]
        a = ea * (1.0 / rest_lengths[j] - 1.0 / ln)
        b = ea / ln
        for i in range(3):
            for k in range(3):
                blk[i, k] = b * tangents[j, i] * tangents[j, k]
            blk[i, i] += a
        r = 4 * j
        c = 4 * (j + 1)
        _block_add(hess, r, r, blk, 1.0)
        _block_add(hess, c, c, blk, 1.0)
        _block_add(hess, r, c, blk, -1.0)
        _block_add(hess, c, r, blk, -1.0)

    kb = np.empty(3)
    tilde_t = np.empty(3)
    td1 = np.empty(3)
    td2 = np.empty(3)
    dk1_de = np.empty(3)
    dk1_df = np.empty(3)
    dk2_de = np.empty(3)
    dk2_df = np.empty(3)
    tf_x_d2 = np.empty(3)
    te_x_d2 = np.empty(3)
    tf_x_d1 = np.empty(3)
    te_x_d1 = np.empty(3)
    cm_td1 = np.empty((3, 3))
    cm_td2 = np.empty((3, 3))
    cm_te = np.empty((3, 3))
    cm_tf = np.empty((3, 3))
    gk = np.empty((11, 2))
    gt = np.empty(11)
    dee = np.empty((3, 3))
    dff = np.empty((3, 3))
    def_ = np.empty((3, 3))
    dfe = np.empty((3, 3))
    tmp = np.empty(3)
    tmp2 = np.empty(3)
    ce = np.empty(3)
    cf = np.empty(3)

    for i in range(s):
        te = tangents[i]
        tf = tangents[i + 1]
        le = lengths[i]
        lf = lengths[i + 1]
        m1e = m1[i]
        m1f = m1[i + 1]
        m2e = m2[i]
        m2f = m2[i + 1]
        for k in range(3):
            kb[k] = aux[i, k]
            tilde_t[k] = aux[i, 3 + k]
            td1[k] = aux[i, 6 + k]
            td2[k] = aux[i, 9 + k]
        chi = aux[i, 12]
        k1 = aux[i, 13]
        k2 = aux[i, 14]
        tau = aux[i, 15]
        vor = rest_voronoi[i]
        w1 = ei * (k1 - rest_kappa[i, 0]) / vor
        w2 = ei * (k2 - rest_kappa[i, 1]) / vor
        wt = gj * (tau - rest_twist[i]) / vor

        _cross(tf, td2, tf_x_d2)
        _cross(te, td2, te_x_d2)
        _cross(tf, td1, tf_x_d1)
        _cross(te, td1, te_x_d1)
        _crossmat(td1, cm_td1)
        _crossmat(td2, cm_td2)
        _crossmat(te, cm_te)
        _crossmat(tf, cm_tf)

        for k in range(3):
            dk1_de[k] = (-k1 * tilde_t[k] + tf_x_d2[k]) / le
            dk1_df[k] = (-k1 * tilde_t[k] - te_x_d2[k]) / lf
            dk2_de[k] = (-k2 * tilde_t[k] - tf_x_d1[k]) / le
            dk2_df[k] = (-k2 * tilde_t[k] + te_x_d1[k]) / lf
        for k in range(3):
            gk[k, 0] = -dk1_de[k]
            gk[4 + k, 0] = dk1_de[k] - dk1_df[k]
            gk[8 + k, 0] = dk1_df[k]
            gk[k, 1] = -dk2_de[k]
            gk[4 + k, 1] = dk2_de[k] - dk2_df[k]
            gk[8 + k, 1] = dk2_df[k]
            gt[k] = -0.5 / le * kb[k]
            gt[8 + k] = 0.5 / lf * kb[k]
            gt[4 + k] = -(gt[k] + gt[8 + k])
        gk[3, 0] = -0.5 * _dot(kb, m1e)
        gk[7, 0] = -0.5 * _dot(kb, m1f)
        gk[3, 1] = -0.5 * _dot(kb, m2e)
        gk[7, 1] = -0.5 * _dot(kb, m2f)
        gt[3] = -1.0
        gt[7] = 1.0

        base = 4 * i
        for a_ in range(11):
            for b_ in range(11):
                hess[base + a_, base + b_] += (
                    ei / vor * (gk[a_, 0] * gk[b_, 0] + gk[a_, 1] * gk[b_, 1])
                    + gj / vor * gt[a_] * gt[b_]
                )

        le2 = le * le
        lf2 = lf * lf
        lelf = le * lf
        for a_ in range(3):
            for b_ in range(3):
                tt = tilde_t[a_] * tilde_t[b_]
                pe = eye[a_, b_] - te[a_] * te[b_]
                pf = eye[a_, b_] - tf[a_] * tf[b_]
                petf = eye[a_, b_] + te[a_] * tf[b_]

                d1ee = (2.0 * k1 * tt - tf_x_d2[a_] * tilde_t[b_]
                        - tilde_t[a_] * tf_x_d2[b_]) / le2 \
                    - k1 / (chi * le2) * pe + kb[a_] * m2e[b_] / (2.0 * le2)
                d1ff = (2.0 * k1 * tt + te_x_d2[a_] * tilde_t[b_]
                        + tilde_t[a_] * te_x_d2[b_]) / lf2 \
                    - k1 / (chi * lf2) * pf + kb[a_] * m2f[b_] / (2.0 * lf2)
                d1ef = -k1 / (chi * lelf) * petf \
                    + (2.0 * k1 * tt - tf_x_d2[a_] * tilde_t[b_]
                       + tilde_t[a_] * te_x_d2[b_] - cm_td2[a_, b_]) / lelf
                d1fe = -k1 / (chi * lelf) * (eye[a_, b_] + tf[a_] * te[b_]) \
                    + (2.0 * k1 * tt - tilde_t[a_] * tf_x_d2[b_]
                       + te_x_d2[a_] * tilde_t[b_] + cm_td2[a_, b_]) / lelf

                d2ee = (2.0 * k2 * tt + tf_x_d1[a_] * tilde_t[b_]
                        + tilde_t[a_] * tf_x_d1[b_]) / le2 \
                    - k2 / (chi * le2) * pe - kb[a_] * m1e[b_] / (2.0 * le2)
                d2ff = (2.0 * k2 * tt - te_x_d1[a_] * tilde_t[b_]
                        - tilde_t[a_] * te_x_d1[b_]) / lf2 \
                    - k2 / (chi * lf2) * pf - kb[a_] * m1f[b_] / (2.0 * lf2)
                d2ef = -k2 / (chi * lelf) * petf \
                    + (2.0 * k2 * tt + tf_x_d1[a_] * tilde_t[b_]
                       - tilde_t[a_] * te_x_d1[b_] + cm_td1[a_, b_]) / lelf
                d2fe = -k2 / (chi * lelf) * (eye[a_, b_] + tf[a_] * te[b_]) \
                    + (2.0 * k2 * tt + tilde_t[a_] * tf_x_d1[b_]
                       - te_x_d1[a_] * tilde_t[b_] - cm_td1[a_, b_]) / lelf

                tee = -0.5 / le2 * (kb[a_] * (te[b_] + tilde_t[b_])
                                    + 2.0 / chi * cm_tf[a_, b_])
                tff = -0.5 / lf2 * (kb[a_] * (tf[b_] + tilde_t[b_])
                                    + 2.0 / chi * cm_te[a_, b_])
                tef = 0.5 / lelf * (2.0 / chi * cm_te[a_, b_] - kb[a_] * tilde_t[b_])
                tfe = 0.5 / lelf * (-2.0 / chi * cm_tf[a_, b_] - kb[a_] * tilde_t[b_])

                dee[a_, b_] = w1 * d1ee + w2 * d2ee + wt * tee
                dff[a_, b_] = w1 * d1ff + w2 * d2ff + wt * tff
                def_[a_, b_] = w1 * d1ef + w2 * d2ef + wt * tef
                dfe[a_, b_] = w1 * d1fe + w2 * d2fe + wt * tfe

        for a_ in range(3):
            for b_ in range(3):
                hess[base + a_, base + b_] += dee[a_, b_]
                hess[base + a_, base + 4 + b_] += -dee[a_, b_] + def_[a_, b_]
                hess[base + a_, base + 8 + b_] += -def_[a_, b_]
                hess[base + 4 + a_, base + b_] += -dee[a_, b_] + dfe[a_, b_]
                hess[base + 4 + a_, base + 4 + b_] += (dee[a_, b_] - def_[a_, b_]
                                                       - dfe[a_, b_] + dff[a_, b_])
                hess[base + 4 + a_, base + 8 + b_] += def_[a_, b_] - dff[a_, b_]
                hess[base + 8 + a_, base + b_] += -dfe[a_, b_]
                hess[base + 8 + a_, base + 4 + b_] += dfe[a_, b_] - dff[a_, b_]
                hess[base + 8 + a_, base + 8 + b_] += dff[a_, b_]

        hess[base + 3, base + 3] += w1 * (-0.5 * _dot(kb, m2e)) + w2 * (0.5 * _dot(kb, m1e))
        hess[base + 7, base + 7] += w1 * (-0.5 * _dot(kb, m2f)) + w2 * (0.5 * _dot(kb, m1f))

        for which in range(2):
            col = 3 if which == 0 else 7
            mv1 = m1e if which == 0 else m1f
            mv2 = m2e if which == 0 else m2f
            _cross(tf, mv1, tmp)
            _cross(te, mv1, tmp2)
            d1 = _dot(kb, mv1)
            for k in range(3):
                ce[k] = w1 * ((0.5 * d1 * tilde_t[k] - tmp[k] / chi) / le)
                cf[k] = w1 * ((0.5 * d1 * tilde_t[k] + tmp2[k] / chi) / lf)
            _cross(tf, mv2, tmp)
            _cross(te, mv2, tmp2)
            d2_ = _dot(kb, mv2)
            for k in range(3):
                ce[k] += w2 * ((0.5 * d2_ * tilde_t[k] - tmp[k] / chi) / le)
                cf[k] += w2 * ((0.5 * d2_ * tilde_t[k] + tmp2[k] / chi) / lf)
            for k in range(3):
                hess[base + k, base + col] += -ce[k]
                hess[base + 4 + k, base + col] += ce[k] - cf[k]
                hess[base + 8 + k, base + col] += cf[k]
                hess[base + col, base + k] += -ce[k]
                hess[base + col, base + 4 + k] += ce[k] - cf[k]
                hess[base + col, base + 8 + k] += cf[k]

    for a_ in range(dof):
        for b_ in range(a_ + 1, dof):
            v = 0.5 * (hess[a_, b_] + hess[b_, a_])
            hess[a_, b_] = v
            hess[b_, a_] = v
    return hess
