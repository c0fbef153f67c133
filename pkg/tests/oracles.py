"""Brute-force reference implementations used as test oracles.

Each one follows the textbook definition with explicit Python loops and shares
no code with the package.
"""
import math

import numpy as np


def naive_ssm(u, delta, A, B, C, D=None):
    """Step-by-step ZOH recurrence in float64.

    u, delta: (b, L, d); A: (d, N); B, C: (b, L, N); D: (d,) or None.
    """
    u, delta, A, B, C = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C))
    b, L, d = u.shape
    N = A.shape[1]
    y = np.zeros((b, L, d))
    for bi in range(b):
        for di in range(d):
            h = np.zeros(N)
            for t in range(L):
                for n in range(N):
                    a = A[di, n]
                    dt = delta[bi, t, di]
                    a_bar = math.exp(dt * a)
                    b_bar = (math.exp(dt * a) - 1.0) / a * B[bi, t, n] if a != 0 else dt * B[bi, t, n]
                    h[n] = a_bar * h[n] + b_bar * u[bi, t, di]
                y[bi, t, di] = sum(C[bi, t, n] * h[n] for n in range(N))
                if D is not None:
                    y[bi, t, di] += D[di] * u[bi, t, di]
    return y


def two_token_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v for two tokens, written out by hand."""
    d = len(q[0])
    out = []
    for i in range(2):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(2)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        w = [x / sum(e) for x in e]
        out.append([w[0] * v[0][c] + w[1] * v[1][c] for c in range(len(v[0]))])
    return out


def dice_brute(pred, target, num_classes):
    """Foreground-mean Dice; classes absent from both maps are skipped (score 1 if all are)."""
    pred, target = np.asarray(pred).ravel().tolist(), np.asarray(target).ravel().tolist()
    scores = []
    for c in range(1, num_classes):
        inter = sum(1 for p, t in zip(pred, target) if p == c and t == c)
        sp = sum(1 for p in pred if p == c)
        st = sum(1 for t in target if t == c)
        if sp + st:
            scores.append(2.0 * inter / (sp + st))
    return sum(scores) / len(scores) if scores else 1.0


def miou_brute(pred, target, num_classes):
    pred, target = np.asarray(pred).ravel().tolist(), np.asarray(target).ravel().tolist()
    scores = []
    for c in range(num_classes):
        inter = sum(1 for p, t in zip(pred, target) if p == c and t == c)
        union = sum(1 for p, t in zip(pred, target) if p == c or t == c)
        if union:
            scores.append(inter / union)
    return sum(scores) / len(scores) if scores else 1.0


def psnr_brute(pred, target, max_value=1.0):
    pred, target = np.asarray(pred, np.float64).ravel(), np.asarray(target, np.float64).ravel()
    mse = sum((a - b) ** 2 for a, b in zip(pred, target)) / len(pred)
    return math.inf if mse == 0 else 10.0 * math.log10(max_value ** 2 / mse)


def ssim_brute(x, y, data_range=1.0, win=11, sigma=1.5):
    """2D SSIM: Gaussian-weighted local statistics at every valid window position."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    H, W = x.shape
    win = min(win, H, W)
    if win % 2 == 0:
        win -= 1
    r = [i - (win - 1) / 2 for i in range(win)]
    g1 = [math.exp(-(v * v) / (2 * sigma * sigma)) for v in r]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            mx = my = sxx = syy = sxy = 0.0
            for a in range(win):
                for b in range(win):
                    w = g1[a] * g1[b]
                    xv, yv = x[i + a, j + b], y[i + a, j + b]
                    mx += w * xv
                    my += w * yv
                    sxx += w * xv * xv
                    syy += w * yv * yv
                    sxy += w * xv * yv
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def enumerate_windows(grid, window):
    """Windows of an unshifted, unpadded channel-last grid (B, *dims, C) by explicit index loops."""
    grid = np.asarray(grid)
    B, *dims, C = grid.shape
    counts = [d // w for d, w in zip(dims, window)]
    out = []
    for b in range(B):
        for idx in np.ndindex(*counts):
            tokens = []
            for off in np.ndindex(*window):
                pos = tuple(i * w + o for i, w, o in zip(idx, window, off))
                tokens.append(grid[(b,) + pos])
            out.append(tokens)
    return np.asarray(out)
