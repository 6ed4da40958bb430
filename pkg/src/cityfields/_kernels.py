"""Numba kernels for multiresolution hash-grid lookup and gradient scatter.

All kernels are serial; accumulation order is fixed so results are
reproducible bit-for-bit for a given input ordering.

Per point and level the two candidate index contributions and weights of
every axis are computed once; a corner then combines one of each (XOR for
hashed levels, sum for dense ones).
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _axis_setup(coords, n, l, res, dense, primes, d, lo_part, hi_part, w_lo, w_hi, res_stride):
    """Fill per-axis index parts and weights for point ``n`` at level ``l``."""
    stride = np.int64(1)
    for k in range(d):
        r = res[l, k]
        s = coords[n, k] * r
        fl = np.int64(np.floor(s))
        if fl >= r:
            fl = r - 1
        if fl < 0:
            fl = 0
        f = s - fl
        w_lo[k] = 1.0 - f
        w_hi[k] = f
        res_stride[k] = r
        if dense[l]:
            lo_part[k] = fl * stride
            hi_part[k] = (fl + 1) * stride
            stride *= r + 1
        else:
            lo_part[k] = fl * primes[k]
            hi_part[k] = (fl + 1) * primes[k]


@nb.njit(cache=True, inline="always")
def _half_corners(k0, k1, is_dense, lo_part, hi_part, w_lo, w_hi, idx_out, w_out):
    """Index parts and weights of all 2^(k1-k0) corner combinations of axes k0..k1-1."""
    m = k1 - k0
    for c in range(1 << m):
        idx = np.int64(0)
        w = 1.0
        for j in range(m):
            k = k0 + j
            if (c >> j) & 1:
                p = hi_part[k]
                w *= w_hi[k]
            else:
                p = lo_part[k]
                w *= w_lo[k]
            if is_dense:
                idx += p
            else:
                idx ^= p
        idx_out[c] = idx
        w_out[c] = w


@nb.njit(cache=True, inline="always")
def _axis_grads(k0, k1, s, w_lo, w_hi, rs, grad_coords, n):
    m = k1 - k0
    for j in range(m):
        acc = 0.0
        for c in range(1 << m):
            p = 1.0 if (c >> j) & 1 else -1.0
            for i in range(m):
                if i != j:
                    p *= w_hi[k0 + i] if (c >> i) & 1 else w_lo[k0 + i]
            acc += s[c] * p
        grad_coords[n, k0 + j] += acc * rs[k0 + j]


@nb.njit(cache=True)
def encode_forward(coords, vids, table, res, dense, primes, vid_prime, vid_stride, out):
    """Interpolate level features for every row of ``coords`` into ``out``.

    coords: (N, D) in [0, 1]; vids: (N,) one-based video ids (ignored when
    vid_prime and vid_stride are zero)
    table: (L, T, F); res: (L, D) integer resolutions; out: (N, L*F), overwritten.
    """
    n_pts, d = coords.shape
    n_levels, t_size, n_feat = table.shape
    mask = np.int64(t_size - 1)
    n_corners = 1 << d
    half = d // 2
    n_a = 1 << half
    n_b = 1 << (d - half)
    a_idx = np.zeros(n_a, np.int64)
    b_idx = np.zeros(n_b, np.int64)
    a_w = np.zeros(n_a, np.float64)
    b_w = np.zeros(n_b, np.float64)
    lo_part = np.zeros(d, np.int64)
    hi_part = np.zeros(d, np.int64)
    w_lo = np.zeros(d, np.float64)
    w_hi = np.zeros(d, np.float64)
    rs = np.zeros(d, np.int64)
    acc = np.zeros(n_feat, np.float64)
    for n in range(n_pts):
        vid = np.int64(vids[n])
        for l in range(n_levels):
            _axis_setup(coords, n, l, res, dense, primes, d, lo_part, hi_part, w_lo, w_hi, rs)
            is_dense = dense[l]
            base = (vid - 1) * vid_stride[l] if is_dense else vid * vid_prime
            for f in range(n_feat):
                acc[f] = 0.0
            _half_corners(0, half, is_dense, lo_part, hi_part, w_lo, w_hi, a_idx, a_w)
            _half_corners(half, d, is_dense, lo_part, hi_part, w_lo, w_hi, b_idx, b_w)
            for cb in range(n_b):
                for ca in range(n_a):
                    if is_dense:
                        idx = a_idx[ca] + b_idx[cb] + base
                    else:
                        idx = (a_idx[ca] ^ b_idx[cb] ^ base) & mask
                    w = a_w[ca] * b_w[cb]
                    for f in range(n_feat):
                        acc[f] += w * table[l, idx, f]
            for f in range(n_feat):
                out[n, l * n_feat + f] = acc[f]


@nb.njit(cache=True)
def encode_backward(coords, vids, table, res, dense, primes, vid_prime, vid_stride,
                    grad_out, grad_table, grad_coords, need_coords):
    """Scatter ``grad_out`` into ``grad_table`` (additively) and optionally
    write d(out)/d(coords) contracted with ``grad_out`` into ``grad_coords``."""
    n_pts, d = coords.shape
    n_levels, t_size, n_feat = table.shape
    mask = np.int64(t_size - 1)
    n_corners = 1 << d
    half = d // 2
    n_a = 1 << half
    n_b = 1 << (d - half)
    a_idx = np.zeros(n_a, np.int64)
    b_idx = np.zeros(n_b, np.int64)
    a_w = np.zeros(n_a, np.float64)
    b_w = np.zeros(n_b, np.float64)
    lo_part = np.zeros(d, np.int64)
    hi_part = np.zeros(d, np.int64)
    w_lo = np.zeros(d, np.float64)
    w_hi = np.zeros(d, np.float64)
    rs = np.zeros(d, np.int64)
    g = np.zeros(n_feat, np.float64)
    sa = np.zeros(n_a, np.float64)
    sb = np.zeros(n_b, np.float64)
    for n in range(n_pts):
        vid = np.int64(vids[n])
        if need_coords:
            for k in range(d):
                grad_coords[n, k] = 0.0
        for l in range(n_levels):
            nonzero = False
            for f in range(n_feat):
                g[f] = grad_out[n, l * n_feat + f]
                if g[f] != 0.0:
                    nonzero = True
            if not nonzero:
                continue
            _axis_setup(coords, n, l, res, dense, primes, d, lo_part, hi_part, w_lo, w_hi, rs)
            is_dense = dense[l]
            base = (vid - 1) * vid_stride[l] if is_dense else vid * vid_prime
            _half_corners(0, half, is_dense, lo_part, hi_part, w_lo, w_hi, a_idx, a_w)
            _half_corners(half, d, is_dense, lo_part, hi_part, w_lo, w_hi, b_idx, b_w)
            if need_coords:
                for c in range(n_a):
                    sa[c] = 0.0
                for c in range(n_b):
                    sb[c] = 0.0
            for cb in range(n_b):
                for ca in range(n_a):
                    if is_dense:
                        idx = a_idx[ca] + b_idx[cb] + base
                    else:
                        idx = (a_idx[ca] ^ b_idx[cb] ^ base) & mask
                    w = a_w[ca] * b_w[cb]
                    dot = 0.0
                    for f in range(n_feat):
                        grad_table[l, idx, f] += w * g[f]
                        dot += g[f] * table[l, idx, f]
                    if need_coords:
                        sa[ca] += dot * b_w[cb]
                        sb[cb] += dot * a_w[ca]
            if need_coords:
                # d w_half / d frac_k is the half's weight with axis k's factor replaced by +-1
                _axis_grads(0, half, sa, w_lo, w_hi, rs, grad_coords, n)
                _axis_grads(half, d, sb, w_lo, w_hi, rs, grad_coords, n)
