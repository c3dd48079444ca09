"""Vectorized numpy implementation of the volume-rendering kernels.

This is the fallback backend and the numerical reference: the compiled
backend must agree with it to float64 round-off. Rays are processed in
chunks to bound peak memory.
"""

from __future__ import annotations

import numpy as np

EPS_VIS = 1e-3  # opacity below this renders a zero normal
DEPTH_EPS = 1e-8
NORM_EPS = 1e-12
_CHUNK = 8192


def softplus(x):
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _ray_box(origins, dirs, lo, hi):
    """Slab intersection. Returns (t_enter, t_exit, hit); t_enter >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (lo[None, :] - origins) * inv
    t_hi = (hi[None, :] - origins) * inv
    # Rays parallel to a slab: +-inf from the division sorts correctly unless
    # the origin sits exactly on a face; nan_to_num keeps those rays misses.
    t_near = np.nan_to_num(np.minimum(t_lo, t_hi), nan=np.inf).max(axis=1)
    t_far = np.nan_to_num(np.maximum(t_lo, t_hi), nan=-np.inf).min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return t_near, t_far, hit


def _corner_weights(pos, lo, hi, res):
    """Trilinear cell corners for node-centered grids.

    Returns flat corner indices (M, 8) into a (Rx*Ry*Rz,) array and the
    matching weights (M, 8).
    """
    rx, ry, rz = res
    scale = (np.asarray(res, dtype=np.float64) - 1.0) / (hi - lo)
    u = (pos - lo[None, :]) * scale[None, :]
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.asarray(res) - 2)
    f = np.clip(u - i0, 0.0, 1.0)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    weights = np.stack(
        [
            gx * gy * gz,
            gx * gy * fz,
            gx * fy * gz,
            gx * fy * fz,
            fx * gy * gz,
            fx * gy * fz,
            fx * fy * gz,
            fx * fy * fz,
        ],
        axis=1,
    )
    base = (i0[:, 0] * ry + i0[:, 1]) * rz + i0[:, 2]
    offsets = np.array(
        [0, 1, rz, rz + 1, ry * rz, ry * rz + 1, ry * rz + rz, ry * rz + rz + 1],
        dtype=np.int64,
    )
    return base[:, None] + offsets[None, :], weights


def _gather(flat_grid, idx, w):
    """Interpolate a (V,) or (V, C) flat grid at the given corners."""
    if flat_grid.ndim == 1:
        return (flat_grid[idx] * w).sum(axis=1)
    return (flat_grid[idx] * w[..., None]).sum(axis=1)


def _scatter(target_flat, idx, w, values):
    """Accumulate values * weights into the flat grid (per channel)."""
    nvox = target_flat.shape[0]
    if target_flat.ndim == 1:
        contrib = (values[:, None] * w).ravel()
        target_flat += np.bincount(idx.ravel(), weights=contrib, minlength=nvox)
    else:
        for ch in range(target_flat.shape[1]):
            contrib = (values[:, ch, None] * w).ravel()
            target_flat[:, ch] += np.bincount(idx.ravel(), weights=contrib, minlength=nvox)


def _march(density, origins, dirs, lo, hi, n_samples):
    """Shared forward pieces for a ray chunk."""
    t0, t1, hit = _ray_box(origins, dirs, lo, hi)
    delta = (t1 - t0) / n_samples
    ts = t0[:, None] + (np.arange(n_samples) + 0.5) * delta[:, None]
    pos = origins[:, None, :] + dirs[:, None, :] * ts[..., None]
    m = pos.reshape(-1, 3)
    idx, cw = _corner_weights(m, lo, hi, density.shape)
    rho = _gather(density.reshape(-1), idx, cw).reshape(ts.shape)
    sig = softplus(rho)
    alpha = sig * delta[:, None]
    absorb = -np.expm1(-alpha)
    # T_i = prod_{j<i} exp(-alpha_j), kept as a running product of (1 - absorb)
    shifted = np.empty_like(absorb)
    shifted[:, 0] = 1.0
    shifted[:, 1:] = 1.0 - absorb[:, :-1]
    trans = np.cumprod(shifted, axis=1)
    w = trans * absorb
    return dict(
        t0=t0, delta=delta, ts=ts, idx=idx, cw=cw,
        rho=rho, sig=sig, alpha=alpha, absorb=absorb, trans=trans, w=w, hit=hit,
    )


def render_rays(
    density, color, lo, hi, origins, dirs, n_samples, background,
    normal_grid=None, want_samples=False,
):
    """Emission-absorption march over every ray.

    Returns dict with color (N,3), opacity (N,), depth (N,), normal (N,3)
    in world space (zero where opacity < EPS_VIS or normals not requested),
    and, when want_samples, weights (N,S) and normal_dot (N,S).
    """
    n = origins.shape[0]
    out_color = np.empty((n, 3))
    out_opacity = np.empty(n)
    out_depth = np.empty(n)
    out_normal = np.zeros((n, 3))
    out_w = np.zeros((n, n_samples)) if want_samples else None
    out_dot = np.zeros((n, n_samples)) if want_samples else None

    color_flat = color.reshape(-1, 3)
    ng_flat = normal_grid.reshape(-1, 3) if normal_grid is not None else None

    for s in range(0, n, _CHUNK):
        sl = slice(s, min(s + _CHUNK, n))
        fw = _march(density, origins[sl], dirs[sl], lo, hi, n_samples)
        w, ts = fw["w"], fw["ts"]
        craw = _gather(color_flat, fw["idx"], fw["cw"]).reshape(w.shape + (3,))
        c = sigmoid(craw)
        opac = w.sum(axis=1)
        out_color[sl] = (w[..., None] * c).sum(axis=1) + (1.0 - opac)[:, None] * background
        out_opacity[sl] = opac
        out_depth[sl] = (w * ts).sum(axis=1) / np.maximum(opac, DEPTH_EPS)
        if want_samples:
            out_w[sl] = w
        if ng_flat is not None:
            g = _gather(ng_flat, fw["idx"], fw["cw"]).reshape(w.shape + (3,))
            gn = np.linalg.norm(g, axis=-1)
            nrm = np.where((gn > NORM_EPS)[..., None], -g / np.maximum(gn, NORM_EPS)[..., None], 0.0)
            nacc = (w[..., None] * nrm).sum(axis=1)
            nlen = np.linalg.norm(nacc, axis=-1)
            visible = (opac >= EPS_VIS) & (nlen > NORM_EPS)
            out_normal[sl] = np.where(
                visible[:, None], nacc / np.maximum(nlen, NORM_EPS)[:, None], 0.0
            )
            if want_samples:
                # missed rays carry zero weight; blank their dots as well
                out_dot[sl] = np.where(
                    fw["hit"][:, None], (nrm * dirs[sl][:, None, :]).sum(axis=-1), 0.0
                )
    return dict(
        color=out_color, opacity=out_opacity, depth=out_depth, normal=out_normal,
        weights=out_w, normal_dot=out_dot,
    )


def render_backward(
    density, color, lo, hi, origins, dirs, n_samples, background,
    dl_color, dl_opacity=None,
):
    """Adjoint of render_rays for the color and opacity outputs.

    The depth and normal outputs are not differentiated; every consumer
    treats them as stop-gradient.
    """
    d_density = np.zeros(density.size)
    d_color = np.zeros((density.size, 3))
    color_flat = color.reshape(-1, 3)
    n = origins.shape[0]
    for s in range(0, n, _CHUNK):
        sl = slice(s, min(s + _CHUNK, n))
        fw = _march(density, origins[sl], dirs[sl], lo, hi, n_samples)
        w, trans = fw["w"], fw["trans"]
        craw = _gather(color_flat, fw["idx"], fw["cw"]).reshape(w.shape + (3,))
        c = sigmoid(craw)
        dlc = dl_color[sl]

        # dL/dw_j: through color (c_j - bg) and, if given, through opacity.
        dlw = ((c - background) * dlc[:, None, :]).sum(axis=-1)
        if dl_opacity is not None:
            dlw = dlw + dl_opacity[sl][:, None]

        # dL/dalpha_j = dlw_j T_j e^{-alpha_j} - sum_{k>j} dlw_k w_k
        dww = dlw * w
        tail = dww[:, ::-1].cumsum(axis=1)[:, ::-1] - dww
        dalpha = dlw * trans * (1.0 - fw["absorb"]) - tail
        drho = dalpha * fw["delta"][:, None] * sigmoid(fw["rho"])
        _scatter(d_density, fw["idx"], fw["cw"], drho.reshape(-1))

        dcraw = dlc[:, None, :] * w[..., None] * c * (1.0 - c)
        _scatter(d_color, fw["idx"], fw["cw"], dcraw.reshape(-1, 3))
    return d_density.reshape(density.shape), d_color.reshape(color.shape)


def orientation_backward(density, normal_grid, lo, hi, origins, dirs, n_samples):
    """Sum over rays of sum_j w_j relu(n_j . d)^2 and its normal-grid adjoint.

    Sample weights are treated as constants; the gradient flows only through
    the interpolated density-gradient vectors.
    """
    d_grid = np.zeros((density.size, 3))
    ng_flat = normal_grid.reshape(-1, 3)
    loss = 0.0
    n = origins.shape[0]
    for s in range(0, n, _CHUNK):
        sl = slice(s, min(s + _CHUNK, n))
        fw = _march(density, origins[sl], dirs[sl], lo, hi, n_samples)
        w = fw["w"]
        g = _gather(ng_flat, fw["idx"], fw["cw"]).reshape(w.shape + (3,))
        gn = np.linalg.norm(g, axis=-1)
        ok = gn > NORM_EPS
        gn_safe = np.maximum(gn, NORM_EPS)
        nrm = np.where(ok[..., None], -g / gn_safe[..., None], 0.0)
        dot = (nrm * dirs[sl][:, None, :]).sum(axis=-1)
        relu = np.maximum(dot, 0.0)
        loss += float((w * relu * relu).sum())

        # d(relu^2)/ddot = 2 relu;  ddot/dg = -(d + dot * ghat) / |g|
        ddot = 2.0 * w * relu
        ghat = np.where(ok[..., None], g / gn_safe[..., None], 0.0)
        dg = ddot[..., None] * -(dirs[sl][:, None, :] + dot[..., None] * ghat) / gn_safe[..., None]
        dg = np.where(ok[..., None], dg, 0.0)
        _scatter(d_grid, fw["idx"], fw["cw"], dg.reshape(-1, 3))
    return loss, d_grid.reshape(normal_grid.shape)
