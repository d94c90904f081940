"""Independent reference implementations used as test oracles.

Each one is written from the textbook definition with plain loops or dense
linear algebra, sharing no code with the package.
"""

import math

import numpy as np


def mse(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def cx_bruteforce(F, G, h=0.5, eps=1e-5):
    """Contextual similarity of rows of F (generated) against rows of G (target)."""
    F, G = np.asarray(F, float), np.asarray(G, float)
    mu = G.mean(axis=0)
    n, m = len(F), len(G)
    d = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            f, g = F[i] - mu, G[j] - mu
            d[i, j] = max(0.0, 1 - f @ g / (np.linalg.norm(f) * np.linalg.norm(g)))
    A = np.zeros((n, m))
    for i in range(n):
        dmin = min(d[i])
        w = [math.exp((1 - d[i, j] / (dmin + eps)) / h) for j in range(m)]
        s = sum(w)
        for j in range(m):
            A[i, j] = w[j] / s
    return sum(max(A[i, j] for i in range(n)) for j in range(m)) / m, A


def gram_bruteforce(F):
    F = np.asarray(F, float)
    c, hh, ww = F.shape
    G = np.zeros((c, c))
    for a in range(c):
        for b in range(c):
            G[a, b] = sum(F[a, y, x] * F[b, y, x] for y in range(hh) for x in range(ww)) / (c * hh * ww)
    return G


def matting_dense(img, r=1, eps=1e-7):
    """Dense matting Laplacian, one window at a time."""
    img = np.asarray(img, float)
    h, w, _ = img.shape
    N = h * w
    L = np.zeros((N, N))
    k = 2 * r + 1
    n = k * k
    for y in range(r, h - r):
        for x in range(r, w - r):
            idx = [(y + dy) * w + (x + dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
            cols = img.reshape(-1, 3)[idx]
            mu = cols.mean(axis=0)
            cov = (cols - mu).T @ (cols - mu) / n
            inv = np.linalg.inv(cov + eps / n * np.eye(3))
            for a, ia in enumerate(idx):
                for b, ib in enumerate(idx):
                    L[ia, ib] += (1.0 if a == b else 0.0) - (1 + (cols[a] - mu) @ inv @ (cols[b] - mu)) / n
    return L


def remd_bruteforce(F, G):
    F, G = np.asarray(F, float), np.asarray(G, float)
    C = [[1 - f @ g / (np.linalg.norm(f) * np.linalg.norm(g)) for g in G] for f in F]
    row = sum(min(r) for r in C) / len(F)
    col = sum(min(C[i][j] for i in range(len(F))) for j in range(len(G))) / len(G)
    return max(row, col)


def ssim_dense(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM on ITU-R 601 luma by explicit loops over every fully contained window."""
    wl = np.array([0.299, 0.587, 0.114])
    x, y = np.asarray(a, float) @ wl, np.asarray(b, float) @ wl
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def hourglass_param_count(depth, channels, skips, cin, cout):
    """Parameter count by enumerating every layer of the documented architecture."""
    layers = []  # (kind, in, out, k)
    for i in range(depth):
        skip = skips[i]
        c_in = cin if i == 0 else channels[i - 1]
        ci = channels[i]
        deep = channels[i + 1] if i + 1 < depth else channels[i]
        layers += [("conv", c_in, ci, 3), ("norm", ci), ("conv", ci, ci, 3), ("norm", ci)]
        if skip:
            layers += [("conv", c_in, skip, 1), ("norm", skip)]
        layers += [("norm", deep + skip), ("conv", deep + skip, ci, 3), ("norm", ci), ("conv", ci, ci, 1), ("norm", ci)]
    layers.append(("conv", channels[0], cout, 1))
    total = 0
    for layer in layers:
        if layer[0] == "conv":
            _, i, o, k = layer
            total += o * i * k * k + o
        else:
            total += 2 * layer[1]
    return total


def central_difference(f, x, idx, step=1e-6):
    """Numerical partial derivatives of scalar f at flat positions idx of array x."""
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        out.append((f(xp) - f(xm)) / (2 * step))
    return np.array(out)
