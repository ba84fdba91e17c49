"""Compiled ray-marching kernels (fused trilinear gather + compositing).

Samples are stored ray-major: ``idx[r, s, k]`` / ``w[r, s, k]`` hold the
8 trilinear corners of sample ``s`` on ray ``r``; per-sample caches are
``(R, S)``.  Field rows are
``[density, r, g, b]`` per voxel.
"""
from numba import njit


@njit(cache=True)
def march_forward(idx, w, field, sigma, col, T, alpha, rgb):
    R, S, _ = idx.shape
    for r in range(R):
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for s in range(S):
            sg = 0.0
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for k in range(8):
                wk = w[r, s, k]
                if wk != 0.0:
                    j = idx[r, s, k]
                    sg += wk * field[j, 0]
                    v0 += wk * field[j, 1]
                    v1 += wk * field[j, 2]
                    v2 += wk * field[j, 3]
            sigma[r, s] = sg
            col[r, s, 0] = v0
            col[r, s, 1] = v1
            col[r, s, 2] = v2
            T[r, s] = trans
            ws = sg * trans
            c0 += ws * v0
            c1 += ws * v1
            c2 += ws * v2
            trans *= 1.0 - sg
        alpha[r] = 1.0 - trans
        rgb[r, 0] = c0
        rgb[r, 1] = c1
        rgb[r, 2] = c2


@njit(cache=True)
def march_backward(idx, w, sigma, col, T, g_alpha, g_rgb, grad):
    R, S, _ = idx.shape
    for r in range(R):
        ga = g_alpha[r]
        g0 = g_rgb[r, 0]
        g1 = g_rgb[r, 1]
        g2 = g_rgb[r, 2]
        # B_k = s_{k+1} e_{k+1} + (1 - s_{k+1}) B_{k+1}
        B = 0.0
        for s in range(S - 1, -1, -1):
            sg = sigma[r, s]
            e = col[r, s, 0] * g0 + col[r, s, 1] * g1 + col[r, s, 2] * g2 + ga
            t = T[r, s]
            gs = t * (e - B)
            ws = sg * t
            for k in range(8):
                wk = w[r, s, k]
                if wk != 0.0:
                    j = idx[r, s, k]
                    grad[j, 0] += wk * gs
                    grad[j, 1] += wk * ws * g0
                    grad[j, 2] += wk * ws * g1
                    grad[j, 3] += wk * ws * g2
            B = sg * e + (1.0 - sg) * B
