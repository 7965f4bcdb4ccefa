"""Direct nested-loop reference implementations used as test oracles."""
import math

import numpy as np


def conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for bi in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride - pad + u
                                s = j * stride - pad + v
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, ci, r, s] * w[o, ci, u, v]
                    out[bi, o, i, j] = acc
    return out


def conv2d_transpose(x, w, b, up, pad):
    """Scatter form: each input pixel stamps the kernel onto an up-times larger grid."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    H, W = up * h, up * wd
    out = np.zeros((n, oc, H, W))
    for bi in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    for o in range(oc):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * up - pad + u
                                s = j * up - pad + v
                                if 0 <= r < H and 0 <= s < W:
                                    out[bi, o, r, s] += x[bi, ci, i, j] * w[o, ci, u, v]
    if b is not None:
        for o in range(oc):
            out[:, o] += b[o]
    return out


def batch_norm_train(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    means, variances = [], []
    for ch in range(c):
        vals = [x[bi, ch, i, j] for bi in range(n) for i in range(h) for j in range(w)]
        m = math.fsum(vals) / len(vals)
        var = math.fsum((v - m) ** 2 for v in vals) / len(vals)
        means.append(m)
        variances.append(var)
        for bi in range(n):
            for i in range(h):
                for j in range(w):
                    out[bi, ch, i, j] = gamma[ch] * (x[bi, ch, i, j] - m) / math.sqrt(var + eps) + beta[ch]
    return out, np.array(means), np.array(variances)


def fully_connected(x, w, b):
    n = x.shape[0]
    xf = x.reshape(n, -1)
    out = np.zeros((n, w.shape[0]))
    for bi in range(n):
        for o in range(w.shape[0]):
            acc = 0.0 if b is None else b[o]
            for k in range(w.shape[1]):
                acc += xf[bi, k] * w[o, k]
            out[bi, o] = acc
    return out


def j_d(d_real, d_fake):
    m = len(d_real)
    total = 0.0
    for r, f in zip(d_real, d_fake):
        total += math.log(r) + math.log(1.0 - f)
    return -total / (2 * m)


def j_g(d_fake):
    return -sum(math.log(f) for f in d_fake) / len(d_fake)


def adam(theta, grads, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam over a sequence of gradients; returns the final parameter."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def dot(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += x * y
    return total


def rank(ids, vectors, query):
    """Brute-force ranking by similarity, then identifier."""
    scored = [(-dot(v, query), i) for i, v in zip(ids, vectors)]
    scored.sort()
    return [i for _, i in scored]
