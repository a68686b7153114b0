"""Central-difference checks of :func:`intquant.engine.backward`.

Rounding residuals are frozen from a reference forward pass, so the checked
function is the surrogate whose exact derivative is the STE gradient. The
surrogate is still piecewise smooth (clip, ReLU, max-pool); coordinates whose
``+-h`` perturbation flips any of those decisions are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .engine import backward, forward
from .graph import ModelGraph
from .train import level_loss


@dataclass
class GradCheckResult:
    keys: List[str]
    analytic: np.ndarray
    numeric: np.ndarray
    passed: np.ndarray
    skipped: int = 0

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean()) if self.passed.size else 1.0


def decisions(g: ModelGraph, cache) -> list:
    """Boolean/argmax patterns of every piecewise decision in a forward pass."""
    sig = []
    for i, n in enumerate(g.nodes):
        if n.op == "input":
            continue
        xin = cache.values[n.inputs[0]]
        a = n.attrs
        if n.op == "relu":
            sig.append(xin > 0)
        elif n.op in ("act_quant", "input_quant") and cache.quant:
            nu = float(g.params[a["nu"]])
            sig.append((xin > 0) & (xin < nu))
        elif n.op == "output" and cache.quant:
            nu = float(g.params[a["nu"]])
            sig.append(np.abs(xin) < nu)
        elif n.op in ("conv", "linear") and cache.quant:
            sig.append(np.abs(g.params[a["weight"]]) < float(g.params[a["nu"]]))
        elif n.op == "maxpool":
            k = a["k"]
            nb, c, h, w = xin.shape
            blocks = xin.reshape(nb, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
            sig.append(blocks.reshape(nb, c, h // k, w // k, k * k).argmax(axis=-1))
    return sig


def _same(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def surrogate_loss(g: ModelGraph, x, y, levels, residuals, training=True):
    cache, outs = forward(g, x, training=training, residuals=residuals, update_stats=False)
    return level_loss(outs, y, levels)[0], cache


def check_gradients(
    g: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    levels: Optional[np.ndarray] = None,
    keys: Optional[Sequence[str]] = None,
    per_key: int = 8,
    h: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-9,
    seed: int = 0,
    training: bool = True,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients on sampled coordinates."""
    if levels is None:
        levels = np.zeros(len(y), dtype=np.int64)
    g = g.copy()
    cache, outs = forward(g, x, training=training, update_stats=False)
    residuals = dict(cache.residuals)
    _, ograds, _ = level_loss(outs, y, levels)
    grads = backward(g, cache, ograds, nu_grad_scale=False)
    base = decisions(g, cache)
    skipped = 0
    rng = np.random.default_rng(seed)
    keys = list(keys) if keys is not None else [k for k in g.params if k != "nu.input"]
    names, an, nu = [], [], []
    for k in keys:
        p = g.params[k]
        flat_n = p.size
        picks = rng.choice(flat_n, size=min(per_key, flat_n), replace=False)
        for idx in picks:
            orig = p.reshape(-1)[idx].copy()

            def at(v):
                q = p.copy()
                q.reshape(-1)[idx] = v
                g.params[k] = q
                loss, c = surrogate_loss(g, x, y, levels, residuals, training)
                return loss, decisions(g, c)

            (hi, sig_hi), (lo, sig_lo) = at(orig + h), at(orig - h)
            g.params[k] = p
            if not (_same(base, sig_hi) and _same(base, sig_lo)):
                skipped += 1
                continue
            num = (hi - lo) / (2 * h)
            names.append(f"{k}[{idx}]")
            an.append(float(grads[k].reshape(-1)[idx]))
            nu.append(num)
    an_a, nu_a = np.array(an), np.array(nu)
    passed = np.abs(an_a - nu_a) <= rtol * np.maximum(np.abs(an_a), np.abs(nu_a)) + atol
    return GradCheckResult(names, an_a, nu_a, passed, skipped)
