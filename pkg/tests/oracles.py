"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops over numpy arrays and
shares no code with the package under test.
"""
import math

import numpy as np


def matvec(w, v):
    out = []
    for i in range(w.shape[0]):
        acc = 0.0
        for j in range(w.shape[1]):
            acc += float(w[i, j]) * float(v[j])
        out.append(acc)
    return np.array(out)


def bilinear(q, b, k):
    acc = 0.0
    for i in range(len(q)):
        for j in range(len(k)):
            acc += float(q[i]) * float(b[i, j]) * float(k[j])
    return acc


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    z = math.fsum(e)
    return np.array([x / z for x in e])


def attention(teacher_feats, student_feats, wq, wk, bil, pt, ps):
    """Link matrix for unbatched (C, H, W) features and numpy parameters."""
    d = wq[0].shape[0]
    qs = [matvec(wq[t], f.reshape(f.shape[0], -1).mean(1)) for t, f in enumerate(teacher_feats)]
    ks = [np.maximum(matvec(wk[s], f.reshape(f.shape[0], -1).mean(1)), 0.0)
          for s, f in enumerate(student_feats)]
    alpha = []
    for t, q in enumerate(qs):
        logits = [(bilinear(q, bil[s], k) + float(np.dot(pt[t], ps[s]))) / math.sqrt(d)
                  for s, k in enumerate(ks)]
        alpha.append(softmax(logits))
    return np.array(alpha)


def pool_map(f, method):
    """Channel pooling of a (C, H, W) array, flattened row-major and L2-normalised."""
    c, h, w = f.shape
    out = np.zeros(h * w)
    for i in range(h):
        for j in range(w):
            vals = [abs(float(f[ch, i, j])) for ch in range(c)]
            if method == "MAX":
                out[i * w + j] = max(vals)
            else:
                p = 1 if method == "A1" else 2
                out[i * w + j] = sum(v ** p for v in vals) / c
    n = math.sqrt(sum(v * v for v in out))
    return out / n if n > 0 else out


def resample(f, th, tw):
    c, h, w = f.shape
    out = np.zeros((c, th, tw))
    if th <= h:
        kh, kw = h // th, w // tw
        for ch in range(c):
            for i in range(th):
                for j in range(tw):
                    out[ch, i, j] = f[ch, i * kh:(i + 1) * kh, j * kw:(j + 1) * kw].mean()
    else:
        fh, fw = th // h, tw // w
        for ch in range(c):
            for i in range(th):
                for j in range(tw):
                    out[ch, i, j] = f[ch, i // fh, j // fw]
    return out


def distance(u, v, metric):
    if metric == "L1":
        return sum(abs(a - b) for a, b in zip(u, v))
    if metric == "L2":
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))
    if metric == "KL":
        p, q = softmax(list(u)), softmax(list(v))
        return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 1.0
    return 1.0 - sum(a * b for a, b in zip(u, v)) / (nu * nv)


def afd_loss(alpha, teacher_feats, student_feats, pooling, metric):
    total = 0.0
    for t, ft in enumerate(teacher_feats):
        mt = pool_map(ft, pooling)
        for s, fs in enumerate(student_feats):
            ms = pool_map(resample(fs, ft.shape[1], ft.shape[2]), pooling)
            total += float(alpha[t, s]) * distance(mt, ms, metric)
    return total


def att_loss(teacher_feats, student_feats):
    """Attention-transfer loss over level-matched pairs (same spatial size)."""
    total = 0.0
    for ft, fs in zip(teacher_feats, student_feats):
        at = (ft ** 2).mean(0).ravel()
        at = at / np.linalg.norm(at)
        as_ = (fs ** 2).mean(0).ravel()
        as_ = as_ / np.linalg.norm(as_)
        total += float(np.linalg.norm(at - as_))
    return total


def bernoulli_kl(p, q):
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def central_difference(fn, arrays, eps=1e-5):
    """Central finite-difference gradients of scalar ``fn()`` w.r.t. each float64 array.

    ``arrays`` are mutated in place during probing and restored afterwards.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = fn()
            flat[i] = old - eps
            lo = fn()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
