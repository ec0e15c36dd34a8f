"""Compiled per-trial detector loop for Monte Carlo sweeps.

Mirrors :func:`ovep.detector.run_ep_batch` step for step (same guards,
same damping, same initial state) but runs one trial at a time in
compiled loops, which avoids the large temporaries of the vectorized
engine.  The test-suite checks both paths against each other.
"""

import numpy as np
from numba import njit

GUARD_EPS = 1e-12
VAR_FLOOR = 1e-12
PIVOT_RTOL = 1e-14
# reassociation only: keeps inf/nan semantics needed by the guards
FAST = {"reassoc", "contract"}


@njit(cache=True)
def _chol_solve_inplace(a, b):
    """Factor Hermitian ``a = L L^H`` in place and overwrite ``b`` with ``L^{-1} b``.

    Returns False when a pivot is not above ``1e-14 * trace / dim``.
    """
    k = a.shape[0]
    tr = 0.0
    for i in range(k):
        tr += a[i, i].real
    floor = PIVOT_RTOL * tr / k
    for j in range(k):
        s = a[j, j].real
        for p in range(j):
            s -= a[j, p].real ** 2 + a[j, p].imag ** 2
        if not s > floor:
            return False
        d = np.sqrt(s)
        a[j, j] = d
        for i in range(j + 1, k):
            v = a[i, j]
            for p in range(j):
                v -= a[i, p] * np.conj(a[j, p])
            a[i, j] = v / d
    ncol = b.shape[1]
    for i in range(k):
        d = a[i, i].real
        for p in range(i):
            lip = a[i, p]
            for c in range(ncol):
                b[i, c] -= lip * b[p, c]
        for c in range(ncol):
            b[i, c] = b[i, c] / d
    return True


@njit(cache=True, fastmath=FAST)
def _filter(h, gram, hy, w_mu, w_g, sz, mu_out, g_out, rhs, dinv, hd, core, wr):
    """Block LMMSE filter; writes mean and precision of the marginals.

    ``rhs``, ``dinv`` (length M), ``hd`` (k x M), ``core`` (k x k) and ``wr``
    (length k) are scratch buffers.
    """
    k, m = h.shape
    for j in range(m):
        rhs[j] = hy[j] / sz + w_g[j] * w_mu[j]
    if k < m:
        for j in range(m):
            dinv[j] = 1.0 / w_g[j]
        for i in range(k):
            for j in range(m):
                hd[i, j] = h[i, j] * dinv[j]
        for i in range(k):
            for p in range(i, k):
                v = 0j
                for j in range(m):
                    v += hd[i, j] * np.conj(h[p, j])
                core[i, p] = v
                core[p, i] = np.conj(v)
            core[i, i] = core[i, i].real + sz
        if not _chol_solve_inplace(core, hd):
            return False
        for i in range(k):
            v = 0j
            for j in range(m):
                v += hd[i, j] * rhs[j]
            wr[i] = v
        for j in range(m):
            dg = dinv[j]
            pr = dinv[j] * rhs[j]
            for i in range(k):
                dg -= hd[i, j].real ** 2 + hd[i, j].imag ** 2
                pr -= np.conj(hd[i, j]) * wr[i]
            mu_out[j] = pr
            g_out[j] = 1.0 / dg
        return True
    a = gram / sz
    for j in range(m):
        a[j, j] += w_g[j]
    linv = np.eye(m).astype(np.complex128)
    if not _chol_solve_inplace(a, linv):
        return False
    lr = linv @ rhs
    for j in range(m):
        dg = 0.0
        pr = 0j
        for i in range(m):
            dg += linv[i, j].real ** 2 + linv[i, j].imag ** 2
            pr += np.conj(linv[i, j]) * lr[i]
        mu_out[j] = pr
        g_out[j] = 1.0 / dg
    return True


@njit(cache=True, fastmath=FAST)
def _divide_out(g_a, mu_a, g_b, mu_b, q_mu, q_g):
    """In-place ``q <- a / b`` with the guard; returns the number of guarded entries."""
    fired = 0
    for j in range(g_a.shape[0]):
        g = g_a[j] - g_b[j]
        if g < GUARD_EPS:
            fired += 1
        else:
            q_mu[j] = (g_a[j] * mu_a[j] - g_b[j] * mu_b[j]) * (1.0 / g)
            q_g[j] = g
    return fired


@njit(cache=True, fastmath=FAST)
def _to_filter(g_hat, x_hat, q_mu, q_g, w_mu, w_g, damping):
    """Damped extrinsic update of one filter input; returns the guard count."""
    fired = 0
    a = 1.0 - damping
    for j in range(g_hat.shape[0]):
        g = g_hat[j] - q_g[j]
        if g < GUARD_EPS:
            fired += 1
            tg = w_g[j]
            tn = w_g[j] * w_mu[j]
        else:
            tg = g
            tn = g_hat[j] * x_hat[j] - q_g[j] * q_mu[j]
        if damping == 0.0:
            ng = tg
            nn = tn
        else:
            ng = a * tg + damping * w_g[j]
            nn = a * tn + damping * (w_g[j] * w_mu[j])
        w_mu[j] = nn * (1.0 / ng)
        w_g[j] = ng
    return fired


@njit(cache=True)
def _denoise(bar_mu, bar_g, pts, x_out, v_out):
    q = pts.shape[0]
    logit = np.empty(q)
    for j in range(bar_mu.shape[0]):
        top = -np.inf
        for s in range(q):
            d = pts[s] - bar_mu[j]
            logit[s] = -bar_g[j] * (d.real * d.real + d.imag * d.imag)
            if logit[s] > top:
                top = logit[s]
        z = 0.0
        xm = 0j
        sec = 0.0
        for s in range(q):
            e = np.exp(logit[s] - top)
            z += e
            xm += e * pts[s]
            sec += e * (pts[s].real ** 2 + pts[s].imag ** 2)
        xm = xm / z
        sec = sec / z
        v = sec - (xm.real * xm.real + xm.imag * xm.imag)
        x_out[j] = xm
        v_out[j] = max(v, VAR_FLOOR)


@njit(cache=True, nogil=True, fastmath=FAST)
def ep_trial(h, y, sz, pts, bidx, oidx, subtract, t_max, damping, beta_x, x_iters, v_iters):
    """Run one trial for ``t_max`` iterations.

    ``x_iters``/``v_iters`` of shape ``(t_max, M)`` receive the denoiser
    output of every iteration.  Returns ``(status, guards)`` with
    status 0 on success and 3 on a failed factorization.
    """
    n, m = h.shape
    nl, kb = bidx.shape
    no = oidx.shape[0] if subtract else 0
    ko = oidx.shape[1]
    use_o = no > 0 and ko > 0

    hb = np.empty((nl, kb, m), dtype=np.complex128)
    hyb = np.zeros((nl, m), dtype=np.complex128)
    for l in range(nl):
        for i in range(kb):
            r = bidx[l, i]
            for j in range(m):
                hb[l, i, j] = h[r, j]
                hyb[l, j] += np.conj(h[r, j]) * y[r]
    grams = np.zeros((nl, m, m), dtype=np.complex128) if kb >= m else np.zeros((nl, 1, 1), dtype=np.complex128)
    if kb >= m:
        for l in range(nl):
            grams[l] = np.conj(hb[l]).T @ hb[l]
    nov = no if use_o else 0
    ho = np.empty((nov, ko, m), dtype=np.complex128)
    hyo = np.zeros((nov, m), dtype=np.complex128)
    for l in range(nov):
        for i in range(ko):
            r = oidx[l, i]
            for j in range(m):
                ho[l, i, j] = h[r, j]
                hyo[l, j] += np.conj(h[r, j]) * y[r]
    gram_o = np.zeros((1, 1), dtype=np.complex128)

    bw_mu = np.zeros((nl, m), dtype=np.complex128)
    bw_g = np.full((nl, m), 1.0 / beta_x)
    ow_mu = np.zeros((nov, m), dtype=np.complex128)
    ow_g = np.full((nov, m), 1.0 / beta_x)
    bq_mu = np.zeros((nl, m), dtype=np.complex128)
    bq_g = np.zeros((nl, m))
    oq_mu = np.zeros((nov, m), dtype=np.complex128)
    oq_g = np.zeros((nov, m))
    bar_mu = np.zeros(m, dtype=np.complex128)
    bar_g = np.full(m, 1.0 / beta_x)
    u_mu = np.empty(m, dtype=np.complex128)
    u_g = np.empty(m)
    x_hat = np.empty(m, dtype=np.complex128)
    v_hat = np.empty(m)
    g_hat = np.empty(m)
    acc_g = np.empty(m)
    acc_n = np.empty(m, dtype=np.complex128)
    rhs = np.empty(m, dtype=np.complex128)
    dinv = np.empty(m)
    hd_b = np.empty((kb, m), dtype=np.complex128)
    core_b = np.empty((kb, kb), dtype=np.complex128)
    wr_b = np.empty(kb, dtype=np.complex128)
    hd_o = np.empty((ko, m), dtype=np.complex128)
    core_o = np.empty((ko, ko), dtype=np.complex128)
    wr_o = np.empty(ko, dtype=np.complex128)

    og = np.empty(m)
    on = np.empty(m, dtype=np.complex128)
    guards = 0
    for t in range(t_max):
        for l in range(nl):
            if not _filter(hb[l], grams[l], hyb[l], bw_mu[l], bw_g[l], sz, u_mu, u_g,
                           rhs, dinv, hd_b, core_b, wr_b):
                return 3, guards
            guards += _divide_out(u_g, u_mu, bw_g[l], bw_mu[l], bq_mu[l], bq_g[l])
        for l in range(nov):
            if not _filter(ho[l], gram_o, hyo[l], ow_mu[l], ow_g[l], sz, u_mu, u_g,
                           rhs, dinv, hd_o, core_o, wr_o):
                return 3, guards
            guards += _divide_out(u_g, u_mu, ow_g[l], ow_mu[l], oq_mu[l], oq_g[l])

        acc_g[:] = 0.0
        acc_n[:] = 0.0
        for l in range(nl):
            for j in range(m):
                acc_g[j] += bq_g[l, j]
                acc_n[j] += bq_g[l, j] * bq_mu[l, j]
        og[:] = 0.0
        on[:] = 0.0
        for l in range(nov):
            for j in range(m):
                og[j] += oq_g[l, j]
                on[j] += oq_g[l, j] * oq_mu[l, j]
        for j in range(m):
            g = acc_g[j] - og[j]
            if g < GUARD_EPS:
                guards += 1
            else:
                bar_mu[j] = (acc_n[j] - on[j]) * (1.0 / g)
                bar_g[j] = g

        _denoise(bar_mu, bar_g, pts, x_hat, v_hat)
        for j in range(m):
            g_hat[j] = 1.0 / v_hat[j]
            x_iters[t, j] = x_hat[j]
            v_iters[t, j] = v_hat[j]

        for l in range(nl):
            guards += _to_filter(g_hat, x_hat, bq_mu[l], bq_g[l], bw_mu[l], bw_g[l], damping)
        for l in range(nov):
            guards += _to_filter(g_hat, x_hat, oq_mu[l], oq_g[l], ow_mu[l], ow_g[l], damping)
    return 0, guards


@njit(cache=True, nogil=True)
def ep_batch(h, y, sz, pts, bidx, oidx, subtract, t_max, damping, beta_x, x_iters, v_iters, status, guards):
    """Loop :func:`ep_trial` over a batch; outputs are written into the passed arrays."""
    for b in range(h.shape[0]):
        st, g = ep_trial(h[b], y[b], sz[b], pts, bidx, oidx, subtract, t_max, damping, beta_x,
                            x_iters[b], v_iters[b])
        status[b] = st
        guards[b] = g
