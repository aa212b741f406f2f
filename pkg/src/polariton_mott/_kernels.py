"""Compiled inner loops of the sector-blocked Lindblad right-hand side.

All blocks passed here are Hermitian (RK stage inputs of a Hermiticity
preserving generator), so only the upper triangle is computed and mirrored.
"""
import numba as nb
import numpy as np

_TILE = 32


@nb.njit(cache=True)
def hop_product(indptr, indices, kdata, Rf, Yf):
    """Y = K @ R for real CSR K; R and Y passed as float views of shape (d, 2d)."""
    d = Rf.shape[0]
    m = Rf.shape[1]
    for a in range(d):
        for b in range(m):
            Yf[a, b] = 0.0
        for p in range(indptr[a], indptr[a + 1]):
            k = indices[p]
            v = kdata[p]
            for b in range(m):
                Yf[a, b] += v * Rf[k, b]


@nb.njit(cache=True)
def coherent_and_damping(R, Y, E, G, inv_hbar, O, with_hop):
    """O = -i/hbar ([diag(E), R] + Y - Y^dag) - {diag(G), R}/2, with Y = K R."""
    d = R.shape[0]
    for ta in range(0, d, _TILE):
        for tb in range(ta, d, _TILE):
            for a in range(ta, min(ta + _TILE, d)):
                start = tb if tb > ta else a
                for b in range(start, min(tb + _TILE, d)):
                    r = R[a, b]
                    w = inv_hbar * (E[a] - E[b])
                    damp = 0.5 * (G[a] + G[b])
                    out_re = w * r.imag - damp * r.real
                    out_im = -w * r.real - damp * r.imag
                    if with_hop:
                        y1 = Y[a, b]
                        y2 = Y[b, a]
                        out_re += inv_hbar * (y1.imag + y2.imag)
                        out_im -= inv_hbar * (y1.real - y2.real)
                    O[a, b] = complex(out_re, out_im)
                    O[b, a] = complex(out_re, -out_im)


@nb.njit(cache=True)
def feed(O, up, tgt, src, w, rate):
    """O[tgt, tgt] += rate * w w^T * up[src, src] (decay from the sector above)."""
    m = tgt.shape[0]
    for a in range(m):
        ta = tgt[a]
        sa = src[a]
        fa = rate * w[a]
        for b in range(m):
            O[ta, tgt[b]] += fa * w[b] * up[sa, src[b]]


@nb.njit(cache=True)
def rk4_stage(y, k, c, out):
    """out = y + c * k."""
    for i in range(y.shape[0]):
        out[i] = y[i] + c * k[i]


@nb.njit(cache=True)
def rk4_combine(y, k1, k2, k3, k4, h):
    """y += h/6 (k1 + 2 k2 + 2 k3 + k4)."""
    s = h / 6.0
    for i in range(y.shape[0]):
        y[i] += s * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])


# --- fused sector-engine step ----------------------------------------------------
#
# Flattened layout: block s occupies y[sec_off[s] : sec_off[s] + d_s**2] row-major.
# Hopping rows of block s live at hp_indptr[hp_row[s] : hp_row[s] + d_s + 1]
# (absolute positions into hp_indices / hp_base / hp_bond).  Feed group f moves
# population of site fd_site[f] from block fd_up[f] into block fd_sec[f] over the
# index pairs fd_tgt / fd_src / fd_w in [fd_ptr[f], fd_ptr[f + 1]).


@nb.njit(cache=True)
def offdiag_rhs(y, out, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond, J,
                inv_hbar, fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, rates, Y):
    """out = -i/hbar [K, rho] + sum_i rates_i p_i rho p_i^dag for Hermitian blocks."""
    # hopping amplitudes are real, so K R is a real axpy on the interleaved float view
    yf = y.view(np.float64)
    Yf = Y.view(np.float64)
    for s in range(sec_off.shape[0]):
        off = sec_off[s]
        d = sec_dim[s]
        r0 = hp_row[s]
        for a in range(d):
            base_a = 2 * a * d
            for b in range(2 * d):
                Yf[base_a + b] = 0.0
            for p in range(hp_indptr[r0 + a], hp_indptr[r0 + a + 1]):
                v = -J[hp_bond[p]] * hp_base[p]
                src = 2 * (off + hp_indices[p] * d)
                for b in range(2 * d):
                    Yf[base_a + b] += v * yf[src + b]
        for a in range(d):
            for b in range(a, d):
                diff = Y[a * d + b] - np.conj(Y[b * d + a])
                val = complex(inv_hbar * diff.imag, -inv_hbar * diff.real)
                out[off + a * d + b] = val
                out[off + b * d + a] = np.conj(val)
    for f in range(fd_sec.shape[0]):
        rate = rates[fd_site[f]]
        if rate == 0.0:
            continue
        s = fd_sec[f]
        u = fd_up[f]
        off = sec_off[s]
        d = sec_dim[s]
        uoff = sec_off[u]
        ud = sec_dim[u]
        for a in range(fd_ptr[f], fd_ptr[f + 1]):
            ta = fd_tgt[a]
            sa = fd_src[a]
            fa = rate * fd_w[a]
            for b in range(fd_ptr[f], fd_ptr[f + 1]):
                out[off + ta * d + fd_tgt[b]] += fa * fd_w[b] * y[uoff + sa * ud + fd_src[b]]


@nb.njit(cache=True)
def scale_all(y, u, sec_off, sec_dim, c, out, accumulate):
    """out (+)= c * U y U^dag blockwise; u holds the diagonal of U in sector order."""
    ustart = 0
    for s in range(sec_off.shape[0]):
        off = sec_off[s]
        d = sec_dim[s]
        for a in range(d):
            ua = c * u[ustart + a]
            for b in range(d):
                v = ua * np.conj(u[ustart + b]) * y[off + a * d + b]
                if accumulate:
                    out[off + a * d + b] += v
                else:
                    out[off + a * d + b] = v
        ustart += d


@nb.njit(cache=True)
def lawson_step(y, u1, u2, h, J0, Jm, J1, r0, rm, r1, inv_hbar,
                sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond,
                fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w,
                k1, k2, k3, k4, tmp, Y):
    """Integrating-factor RK4 step in place on y.

    u1 and u2 propagate the diagonal generator over the first and second half
    step; RK4 handles hopping and decay feeds.
    """
    uf = u1 * u2
    offdiag_rhs(y, k1, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond, J0,
                inv_hbar, fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, r0, Y)
    rk4_stage(y, k1, 0.5 * h, tmp)
    scale_all(tmp, u1, sec_off, sec_dim, 1.0, tmp, False)
    offdiag_rhs(tmp, k2, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond, Jm,
                inv_hbar, fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, rm, Y)
    scale_all(y, u1, sec_off, sec_dim, 1.0, tmp, False)
    rk4_stage(tmp, k2, 0.5 * h, tmp)
    offdiag_rhs(tmp, k3, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond, Jm,
                inv_hbar, fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, rm, Y)
    scale_all(y, uf, sec_off, sec_dim, 1.0, tmp, False)
    scale_all(k3, u2, sec_off, sec_dim, h, tmp, True)
    offdiag_rhs(tmp, k4, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond, J1,
                inv_hbar, fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, r1, Y)
    rk4_stage(y, k1, h / 6.0, tmp)
    scale_all(tmp, uf, sec_off, sec_dim, 1.0, y, False)
    rk4_stage(k2, k3, 1.0, tmp)
    scale_all(tmp, u2, sec_off, sec_dim, h / 3.0, y, True)
    rk4_stage(y, k4, h / 6.0, y)


@nb.njit(cache=True)
def _diag_factor(occ, pairs, s, p, out):
    for a in range(occ.shape[0]):
        z = 0j
        for i in range(occ.shape[1]):
            z += occ[a, i] * s[i] + pairs[a, i] * p[i]
        out[a] = np.exp(z)


@nb.njit(cache=True)
def _populations(y, diag, occ, out):
    for i in range(occ.shape[1]):
        out[i] = 0.0
    for a in range(diag.shape[0]):
        w = y[diag[a]].real
        for i in range(occ.shape[1]):
            out[i] += w * occ[a, i]


@nb.njit(cache=True)
def lawson_run(y, k_start, n, h, site_first, site_second, pair_first, pair_second, Jtab, rtab, phot,
               occ, pairs, diag, inv_hbar,
               sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond,
               fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w,
               k1, k2, k3, k4, tmp, Y, emitted, n_now):
    """Advance n integrating-factor RK4 steps starting at step index k_start.

    Tables are indexed by quarter step (Jtab, rtab, phot) or by step (the
    Simpson exponents).  ``emitted`` accumulates the trapezoid of the photon
    flux; ``n_now`` holds the site populations and is updated in place.
    """
    u1 = np.empty(occ.shape[0], dtype=np.complex128)
    u2 = np.empty(occ.shape[0], dtype=np.complex128)
    n_new = np.empty(occ.shape[1])
    for m in range(n):
        k = k_start + m
        q = 4 * k
        _diag_factor(occ, pairs, site_first[k], pair_first[k], u1)
        _diag_factor(occ, pairs, site_second[k], pair_second[k], u2)
        lawson_step(y, u1, u2, h, Jtab[q], Jtab[q + 2], Jtab[q + 4], rtab[q], rtab[q + 2], rtab[q + 4],
                    inv_hbar, sec_off, sec_dim, hp_row, hp_indptr, hp_indices, hp_base, hp_bond,
                    fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w, k1, k2, k3, k4, tmp, Y)
        _populations(y, diag, occ, n_new)
        for i in range(occ.shape[1]):
            emitted[i] += 0.5 * h * (phot[q, i] * n_now[i] + phot[q + 4, i] * n_new[i])
            n_now[i] = n_new[i]
