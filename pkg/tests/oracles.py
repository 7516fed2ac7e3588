"""Independent reference implementations used as test oracles."""
import math

import numpy as np


def warping_paths(n, m):
    """Every monotone alignment of (0,0) -> (n-1,m-1) with steps (1,0), (0,1), (1,1)."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in walk(a, b):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def brute_force_dtw(x, y):
    """Minimum over all warping paths of sqrt(sum of squared gaps)."""
    best = min(sum((x[i] - y[j]) ** 2 for i, j in path) for path in warping_paths(len(x), len(y)))
    return math.sqrt(best)


def reference_hurst(x):
    """Plain-loop R/S estimator: dyadic block sizes >= 8 up to n/2, log-log slope."""
    x = [float(v) for v in x]
    n = len(x)
    logs, logrs = [], []
    size = 8
    while size <= n // 2:
        ratios = []
        for start in range(0, n - size + 1, size):
            block = x[start:start + size]
            mean = sum(block) / size
            cum, lo, hi = 0.0, 0.0, 0.0
            for v in block:
                cum += v - mean
                lo, hi = min(lo, cum), max(hi, cum)
            sd = math.sqrt(sum((v - mean) ** 2 for v in block) / size)
            if sd > 0:
                ratios.append((hi - lo) / sd)
        logs.append(math.log(size))
        logrs.append(math.log(sum(ratios) / len(ratios)))
        size *= 2
    mx, my = sum(logs) / len(logs), sum(logrs) / len(logrs)
    return sum((a - mx) * (b - my) for a, b in zip(logs, logrs)) / sum((a - mx) ** 2 for a in logs)


def lstm_reference(H, W_x, W_h, b):
    """Scalar-loop LSTM over (Q, N, F) with gate blocks ordered i, f, o, c."""
    Q, N, F = H.shape
    d = W_h.shape[0]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = np.zeros((Q, N, d))
    for n in range(N):
        h = [0.0] * d
        c = [0.0] * d
        for t in range(Q):
            pre = []
            for k in range(4 * d):
                s = b[k]
                for f in range(F):
                    s += H[t, n, f] * W_x[f, k]
                for j in range(d):
                    s += h[j] * W_h[j, k]
                pre.append(s)
            new_h, new_c = [], []
            for j in range(d):
                i_g, f_g, o_g = sig(pre[j]), sig(pre[d + j]), sig(pre[2 * d + j])
                cj = f_g * c[j] + i_g * math.tanh(pre[3 * d + j])
                new_c.append(cj)
                new_h.append(o_g * math.tanh(cj))
            h, c = new_h, new_c
            out[t, n] = h
    return out


def central_difference(fn, tensor, index, eps):
    """d fn / d tensor[index] by central differences (tensor modified in place, then restored).

    Writes go through ``.data`` so ``fn`` may itself use autograd."""
    raw = getattr(tensor, "data", tensor)
    old = raw[index].item()
    raw[index] = old + eps
    plus = fn()
    raw[index] = old - eps
    minus = fn()
    raw[index] = old
    return (plus - minus) / (2 * eps)
