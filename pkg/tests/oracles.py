"""Independent reference computations used by the tests.

Nothing here imports the code under test except for the SINGLETON constant;
every loss is a plain-Python transcription of its defining formula.
"""
import itertools
import math

import numpy as np

SINGLETON = -1


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def naive_loss(z, labels, tau, objective):
    """Per-anchor terms by direct double loops over the views."""
    n = len(z)
    terms = []
    for i in range(n):
        ip = i ^ 1

        def fn(s):
            return labels is not None and labels[s] != SINGLETON and labels[s] == labels[i]

        if objective == "elim":
            denom_set = [ip] + [s for s in range(n) if s not in (i, ip) and not fn(s)]
            pos = [ip]
        elif objective == "attr":
            denom_set = [s for s in range(n) if s != i]
            pos = [ip] + [s for s in range(n) if s not in (i, ip) and fn(s)]
        else:
            denom_set = [s for s in range(n) if s != i]
            pos = [ip]
        denom = sum(math.exp(_dot(z[i], z[s]) / tau) for s in denom_set)
        t = 0.0
        for p in pos:
            t += -math.log(math.exp(_dot(z[i], z[p]) / tau) / denom)
        terms.append(t / len(pos))
    return terms


def supcon_loss(z, classes, tau):
    """Supervised-contrastive loss written in its usual label-mask form (mean over anchors)."""
    z = np.asarray(z)
    y = np.asarray(classes)
    n = len(z)
    total = 0.0
    for i in range(n):
        others = [a for a in range(n) if a != i]
        log_denom = math.log(sum(math.exp(float(z[i] @ z[a]) / tau) for a in others))
        positives = [p for p in others if y[p] == y[i]]
        total += -sum(float(z[i] @ z[p]) / tau - log_denom for p in positives) / len(positives)
    return total / n


def central_difference(fn, x, h=1e-4):
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_close(analytic, numeric, rel=1e-4, floor=1e-7):
    """Row-wise ``|a - f| <= rel * |f| + floor`` (Euclidean norms)."""
    a = np.atleast_2d(analytic)
    f = np.atleast_2d(numeric)
    err = np.linalg.norm(a - f, axis=1)
    return bool(np.all(err <= rel * np.linalg.norm(f, axis=1) + floor))


def pair_mtpr_mtnr(true, detected):
    """Brute-force pair enumeration; returns (mtpr, mtnr) as exact count ratios."""
    pos = pos_hit = neg = neg_kept = 0
    for a, b in itertools.combinations(range(len(true)), 2):
        grouped = detected[a] != SINGLETON and detected[a] == detected[b]
        if true[a] == true[b]:
            pos += 1
            pos_hit += grouped
        else:
            neg += 1
            neg_kept += not grouped
    mtpr = pos_hit / pos if pos else 0.0
    mtnr = neg_kept / neg if neg else 1.0
    return mtpr, mtnr


def contingency_nmi(a, b):
    """NMI from an explicit contingency table built with dictionaries."""
    n = len(a)
    joint, ca, cb = {}, {}, {}
    for x, y in zip(a, b):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    if len(ca) == 1 and len(cb) == 1:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    mi = sum(c / n * math.log((c / n) / ((ca[x] / n) * (cb[y] / n))) for (x, y), c in joint.items())
    return mi / math.sqrt(ha * hb)


def best_bipartition(x):
    """Minimum within-cluster sum of squares over all two-way splits (exhaustive)."""
    n = len(x)
    best, best_sets = math.inf, None
    for mask in range(1, 2 ** (n - 1)):
        a = [i for i in range(n) if mask >> i & 1]
        b = [i for i in range(n) if not mask >> i & 1]
        sse = 0.0
        for part in (a, b):
            pts = x[part]
            sse += float(((pts - pts.mean(axis=0)) ** 2).sum())
        if sse < best:
            best, best_sets = sse, (frozenset(a), frozenset(b))
    return best, best_sets


def unit_rows(rng, rows, dim):
    m = rng.normal(size=(rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
