"""Loop-based reference implementations, independent of the vectorised code paths."""

import itertools
import math

import numpy as np


def conv3x3(x, w, bias):
    B, C, H, W = x.shape
    out = np.zeros((B, w.shape[0], H, W))
    for b, o, i, j in itertools.product(range(B), range(w.shape[0]), range(H), range(W)):
        acc = bias[o]
        for c, di, dj in itertools.product(range(C), range(3), range(3)):
            y, xx = i + di - 1, j + dj - 1
            if 0 <= y < H and 0 <= xx < W:
                acc += w[o, c, di, dj] * x[b, c, y, xx]
        out[b, o, i, j] = acc
    return out


def sample(img, y, x):
    H, W = img.shape
    y = min(max(y, 0.0), H - 1)
    x = min(max(x, 0.0), W - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def resize(x, Ho, Wo):
    B, C, H, W = x.shape
    sy, sx = Ho / H, Wo / W
    out = np.zeros((B, C, Ho, Wo))
    for b, c, i, j in itertools.product(range(B), range(C), range(Ho), range(Wo)):
        out[b, c, i, j] = sample(x[b, c], (i + 0.5) / sy - 0.5, (j + 0.5) / sx - 0.5)
    return out


def expert(z, scale, kernel, bias):
    H, W = z.shape[2:]
    up = resize(z, math.ceil(scale * H - 1e-9), math.ceil(scale * W - 1e-9))
    return resize(conv3x3(up, kernel, bias), H, W)


def channel_map(W, x):
    return np.einsum("oc,bchw->bohw", W, x)


def softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def gate(z, W_g, k):
    """Noise-free top-k gate per sample, ties to the lower index."""
    x_h = z.mean(axis=(2, 3))
    H = x_h @ W_g
    G = np.zeros_like(H)
    for b, row in enumerate(H):
        idx = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
        G[b, idx] = softmax(row[idx])
    return G


def assignment_bruteforce(cost):
    """Minimum-cost injective assignment of the smaller side, by enumeration."""
    n, m = cost.shape
    best = (math.inf, None)
    if n >= m:
        for perm in itertools.permutations(range(n), m):
            c = sum(cost[perm[j], j] for j in range(m))
            if c < best[0] - 1e-12:
                best = (c, perm)
    else:
        for perm in itertools.permutations(range(m), n):
            c = sum(cost[i, perm[i]] for i in range(n))
            if c < best[0] - 1e-12:
                best = (c, perm)
    return best
