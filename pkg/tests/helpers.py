import itertools
import math

import numpy as np
import torch


def brute_stats(f, epsilon):
    """Per-channel mean / sqrt(biased var + eps) by looping over every pixel."""
    f = np.asarray(f, dtype=np.float64)
    d, h, w = f.shape
    mus, sigmas = [], []
    for c in range(d):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += f[c, i, j]
        mu = total / (h * w)
        sq = 0.0
        for i in range(h):
            for j in range(w):
                sq += (f[c, i, j] - mu) ** 2
        mus.append(mu)
        sigmas.append(math.sqrt(sq / (h * w) + epsilon))
    return np.array(mus), np.array(sigmas)


def central_diff(fn, x, step=1e-4):
    """Gradient of scalar ``fn`` at ``x`` (float64 tensor) by central differences."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def autograd(fn, x):
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    return x.grad


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def boundary_brute(mask):
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i, j in itertools.product(range(h), range(w)):
        if not mask[i, j]:
            continue
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            a, b = i + di, j + dj
            if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                out[i, j] = True
    return out


def asd_brute(pred, gt):
    """All-pairs nearest boundary distance, symmetric mean."""
    bp = np.argwhere(boundary_brute(pred)).astype(float)
    bg = np.argwhere(boundary_brute(gt)).astype(float)

    def directed(a, b):
        # full |a| x |b| distance matrix, no spatial shortcuts
        dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        return dist.min(axis=1).mean()

    return (directed(bp, bg) + directed(bg, bp)) / 2


def dice_brute(pred, gt):
    pred, gt = np.asarray(pred, bool).ravel(), np.asarray(gt, bool).ravel()
    inter = sum(1 for a, b in zip(pred, gt) if a and b)
    total = int(sum(pred)) + int(sum(gt))
    return 100.0 if total == 0 else 100.0 * 2 * inter / total
