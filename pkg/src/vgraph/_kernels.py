"""Compiled inner loops for large graphs (negative-sampling decoder).

Same arithmetic as :func:`vgraph.training.flat_objective` with the prior
smoothness target, fused per pair so a step costs O(d (K + M)) per pair
and no ``(B, M, d)`` temporaries are materialized. Gradients are summed
into compact buffers with one slot per touched row; ``slot[row]`` maps a
node to its slot (``-1`` when untouched) and ``touched[slot]`` maps back.
"""

from __future__ import annotations

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=True, error_model="numpy", nogil=True)


@_jit
def _sigmoid_pair(x):
    """``(log sigmoid(x), sigmoid(x))`` from a single exponential."""
    e = np.exp(-abs(x))
    if x >= 0:
        return -np.log1p(e), 1.0 / (1.0 + e)
    return x - np.log1p(e), e / (1.0 + e)


@_jit
def _softmax_into(x, log_out, out):
    mx = x[0]
    for k in range(1, x.shape[0]):
        if x[k] > mx:
            mx = x[k]
    s = 0.0
    for k in range(x.shape[0]):
        out[k] = np.exp(x[k] - mx)
        s += out[k]
    lse = np.log(s)
    for k in range(x.shape[0]):
        out[k] /= s
        log_out[k] = x[k] - mx - lse


@_jit
def _slot(row, slot, touched, count):
    s = slot[row]
    if s < 0:
        s = count
        slot[row] = s
        touched[count] = row
        count += 1
    return s, count


@_jit
def negative_sampling_pass(
    phi, varphi, psi, w, c, noise, negatives, alpha, lam, tau, grad,
    g_phi, g_varphi, g_psi, slot_phi, slot_varphi, touched_phi, touched_varphi,
    recon, kl, reg,
):
    """Loss terms per pair and (if ``grad``) mean-loss gradients.

    Row-sized temporaries share the dtype of ``phi``; per-pair scalars
    (softmaxes, sigmoids, losses) are always float64. Returns the number of
    touched rows (used slots) of ``phi`` and ``varphi``.
    """
    B = w.shape[0]
    K, d = psi.shape
    M = negatives.shape[1]
    shared = negatives.shape[0] == 1
    u = 1.0 / B
    use_reg = lam > 0.0 and alpha.shape[0] == B
    dt = phi.dtype

    h = np.empty(d, dt)
    psi_t = np.empty(d, dt)
    g_pt = np.empty(d, dt)
    g_h = np.empty(d, dt)
    a = np.empty(K)
    bw = np.empty(K)
    bc = np.empty(K)
    logq = np.empty(K)
    logp = np.empty(K)
    logpc = np.empty(K)
    q = np.empty(K)
    p = np.empty(K)
    pc = np.empty(K)
    y = np.empty(K)
    g_a = np.empty(K, dt)
    g_b = np.empty(K, dt)
    g_bc = np.empty(K, dt)
    n_phi = 0
    n_varphi = 0

    for i in range(B):
        wi = w[i]
        ci = c[i]
        for j in range(d):
            h[j] = phi[wi, j] * phi[ci, j]
        for k in range(K):
            sa = h[0] * 0
            sb = h[0] * 0
            for j in range(d):
                sa += h[j] * psi[k, j]
                sb += phi[wi, j] * psi[k, j]
            a[k] = sa
            bw[k] = sb
        _softmax_into(a, logq, q)
        _softmax_into(bw, logp, p)
        kl_i = 0.0
        for k in range(K):
            kl_i += q[k] * (logq[k] - logp[k])
        kl[i] = kl_i

        # relaxed sample and its argmax
        mx = -np.inf
        for k in range(K):
            y[k] = (logq[k] + noise[i, k]) / tau
            if y[k] > mx:
                mx = y[k]
        s = 0.0
        for k in range(K):
            y[k] = np.exp(y[k] - mx)
            s += y[k]
        z = 0
        for k in range(K):
            y[k] /= s
            if y[k] > y[z]:
                z = k
        for j in range(d):
            psi_t[j] = psi[z, j]

        # decoder surrogate: one positive, M noise nodes
        sp = h[0] * 0
        for j in range(d):
            sp += varphi[ci, j] * psi_t[j]
        r, sig = _sigmoid_pair(float(sp))
        if grad:
            coef = dt.type(-u * (1.0 - sig))
            sc, n_varphi = _slot(ci, slot_varphi, touched_varphi, n_varphi)
            for j in range(d):
                g_pt[j] = coef * varphi[ci, j]
                g_varphi[sc, j] += coef * psi_t[j]
        for m in range(M):
            v = negatives[0, m] if shared else negatives[i, m]
            sn = h[0] * 0
            for j in range(d):
                sn += varphi[v, j] * psi_t[j]
            lsn, sig = _sigmoid_pair(-float(sn))
            r += lsn
            if grad:
                coef = dt.type(-u * (1.0 - sig))
                sv, n_varphi = _slot(v, slot_varphi, touched_varphi, n_varphi)
                for j in range(d):
                    g_pt[j] -= coef * varphi[v, j]
                    g_varphi[sv, j] -= coef * psi_t[j]
        recon[i] = r

        reg_i = 0.0
        if use_reg:
            for k in range(K):
                sc_k = h[0] * 0
                for j in range(d):
                    sc_k += phi[ci, j] * psi[k, j]
                bc[k] = sc_k
            _softmax_into(bc, logpc, pc)
            for k in range(K):
                diff = pc[k] - p[k]
                reg_i += diff * diff
            reg_i *= lam * alpha[i]
        reg[i] = reg_i

        if not grad:
            continue

        # straight-through: gradient w.r.t. the relaxed sample
        for j in range(d):
            g_psi[z, j] += g_pt[j]
        sy = 0.0
        for k in range(K):
            gy = h[0] * 0
            for j in range(d):
                gy += g_pt[j] * psi[k, j]
            g_a[k] = gy
            sy += y[k] * gy
        sl = 0.0
        for k in range(K):
            ga = y[k] * (g_a[k] - sy) / tau
            g_a[k] = ga
            sl += ga
        for k in range(K):
            g_a[k] += -q[k] * sl + u * q[k] * ((logq[k] - logp[k]) - kl_i)
            g_b[k] = u * (p[k] - q[k])
        if use_reg:
            se = 0.0
            sw = 0.0
            for k in range(K):
                e = 2.0 * u * lam * alpha[i] * (pc[k] - p[k])
                g_bc[k] = e
                se += pc[k] * e
                sw -= p[k] * e
            for k in range(K):
                g_b[k] += p[k] * (-g_bc[k] - sw)
                g_bc[k] = pc[k] * (g_bc[k] - se)

        sw_, n_phi = _slot(wi, slot_phi, touched_phi, n_phi)
        sc_, n_phi = _slot(ci, slot_phi, touched_phi, n_phi)
        for j in range(d):
            g_h[j] = 0
        for k in range(K):
            ga = g_a[k]
            gb = g_b[k]
            for j in range(d):
                pkj = psi[k, j]
                g_h[j] += ga * pkj
                g_phi[sw_, j] += gb * pkj
                g_psi[k, j] += ga * h[j] + gb * phi[wi, j]
        if use_reg:
            for k in range(K):
                gbc = g_bc[k]
                for j in range(d):
                    g_phi[sc_, j] += gbc * psi[k, j]
                    g_psi[k, j] += gbc * phi[ci, j]
        for j in range(d):
            g_phi[sw_, j] += g_h[j] * phi[ci, j]
            g_phi[sc_, j] += g_h[j] * phi[wi, j]

    return n_phi, n_varphi


@_jit
def adam_rows(param, m, v, g, rows, n, slot, step_size, beta1, beta2, eps_hat):
    """Adam on the first ``n`` slots, then clear their gradient and slot map.

    ``step_size = lr * sqrt(1 - beta2^t) / (1 - beta1^t)`` and
    ``eps_hat = eps * sqrt(1 - beta2^t)`` make this identical to the
    bias-corrected form.
    """
    d = param.shape[1]
    for s in range(n):
        r = rows[s]
        slot[r] = -1
        for j in range(d):
            gj = g[s, j]
            g[s, j] = 0.0
            mj = beta1 * m[r, j] + (1.0 - beta1) * gj
            vj = beta2 * v[r, j] + (1.0 - beta2) * gj * gj
            m[r, j] = mj
            v[r, j] = vj
            param[r, j] -= step_size * mj / (np.sqrt(vj) + eps_hat)


@_jit
def clear_rows(g, rows, n, slot):
    d = g.shape[1]
    for s in range(n):
        slot[rows[s]] = -1
        for j in range(d):
            g[s, j] = 0.0
