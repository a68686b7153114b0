"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def dyadic_bruteforce(ratios, d_max=16, c_max=2**31 - 1):
    """Optimal ``(c, d)`` for each ratio by searching every grid ``{c / 2**d : 0 <= c <= c_max}``.

    Each grid is materialised in full (up to the first point above the largest
    ratio) and searched with ``searchsorted``; the bracketing points of every
    grid are then compared in exact rational arithmetic with ties going to the
    smallest ``d`` and then the smallest ``c``.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    top = float(ratios.max())
    cands = [[] for _ in ratios]
    for d in range(d_max + 1):
        n = min(c_max, int(np.ceil(top * 2**d)) + 1)
        grid = np.arange(n + 1, dtype=np.float64) / 2.0**d
        idx = np.searchsorted(grid, ratios)
        for k, i in enumerate(idx):
            for c in (i - 1, i):
                if 0 <= c <= n:
                    cands[k].append((int(c), d))
    out = []
    for r, cs in zip(ratios, cands):
        fr = Fraction(float(r))
        best = min((abs(fr - Fraction(c, 1 << d)), d, c) for c, d in cs)
        out.append((best[2], best[1], best[0]))
    return out


def log_uniform_ratios(n, seed, lo=-8, hi=8):
    return 2.0 ** np.random.default_rng(seed).uniform(lo, hi, n)


def _pow2_near(v):
    return 2.0 ** np.round(np.log2(np.abs(v)))


def dyadic_snap(g):
    """Copy of a qat graph whose every lowering ratio is exactly dyadic.

    Intervals become ``(2**b - 1) * 2**k``, BN uses ``eps = 0`` with
    power-of-four variances and power-of-two gammas, and BN means and betas
    sit on the integer grid of their input scale, so every BN offset is an
    integer. The float training graph is then exact as well.
    """
    from intquant.lowering import lower_model
    from intquant.quantcore import levels

    g = g.copy()
    for n in g.nodes:
        if "bits" in n.attrs and n.attrs["bits"]:
            m = levels(n.attrs["bits"])
            key = n.attrs["nu"]
            g.params[key] = np.array(m * _pow2_near(float(g.params[key]) / m))
        if n.op in ("bn", "mlbn"):
            n.attrs["eps"] = 0.0
    for k in list(g.state):
        if k.endswith(".var"):
            g.state[k] = 4.0 ** np.round(np.log2(g.state[k] + 1e-12) / 2)
    for k in list(g.params):
        if k.endswith(".gamma"):
            g.params[k] = _pow2_near(g.params[k])
    p = lower_model(g)
    for op in p.ops:
        if op.kind != "BnOffsetAdd":
            continue
        key = op.attrs["bn_key"]
        alpha = p.slots[op.inputs[0]].alpha
        alpha_z = p.slots[op.output].alpha
        g.state[key + ".mean"] = np.round(g.state[key + ".mean"] / alpha) * alpha
        g.params[key + ".beta"] = np.round(g.params[key + ".beta"] / alpha_z) * alpha_z
    return g
