"""Per-level statistics of BN inputs at the head layers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from ..traingraph.engine import forward
from ..traingraph.graph import ModelGraph
from .model import HEAD_BN


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class StatsRecord:
    level: int
    layer: str
    channel: int
    mean: float
    var: float
    epoch: int


def _bn_inputs(g: ModelGraph, layer: str) -> List[int]:
    out = []
    for lvl in range(g.pyramid_levels):
        node = next(n for n in g.nodes if n.name == f"{layer}.l{lvl}")
        out.append(node.inputs[0])
    return out


def per_sample_means(g: ModelGraph, x: np.ndarray, layers: Sequence[str] = HEAD_BN, batch_size: int = 256):
    """``{layer: array (levels, N, C)}`` of spatial means, plus the matching spatial variances."""
    if len(x) == 0:
        raise StatsError("empty dataset")
    src = {layer: _bn_inputs(g, layer) for layer in layers}
    means: Dict[str, list] = {layer: [] for layer in layers}
    vars_: Dict[str, list] = {layer: [] for layer in layers}
    for s in range(0, len(x), batch_size):
        cache, _ = forward(g, x[s : s + batch_size])
        for layer, idx in src.items():
            v = [cache.values[i] for i in idx]
            means[layer].append(np.stack([a.mean(axis=(2, 3)) for a in v]))
            vars_[layer].append(np.stack([a.var(axis=(2, 3)) for a in v]))
    return (
        {k: np.concatenate(v, axis=1) for k, v in means.items()},
        {k: np.concatenate(v, axis=1) for k, v in vars_.items()},
    )


def collect_stats(g: ModelGraph, x: np.ndarray, layers: Sequence[str] = HEAD_BN, epoch: int = 0, z: float = 3.0):
    """Records of per-level batch mean and variance of every head BN input, and a divergence summary.

    Samples are the unit of replication: for each channel the standard error
    of a level mean is the across-sample std of per-image channel means over
    ``sqrt(N)``, pooled over levels. A layer diverges when some channel's
    largest pairwise gap between level means exceeds ``z`` pooled standard
    errors of a difference.
    """
    x = np.asarray(x)
    smeans, svars = per_sample_means(g, x, layers)
    records: List[StatsRecord] = []
    summary = {"layers": {}, "z": z, "samples": int(len(x))}
    for layer in layers:
        m, v = smeans[layer], svars[layer]
        mu = m.mean(axis=1)  # (L, C)
        # batch variance = mean within-image variance + variance of image means
        var = v.mean(axis=1) + m.var(axis=1)
        for lvl in range(mu.shape[0]):
            for c in range(mu.shape[1]):
                records.append(StatsRecord(lvl, layer, c, float(mu[lvl, c]), float(var[lvl, c]), epoch))
        gap = np.max(np.abs(mu[:, None, :] - mu[None, :, :]), axis=(0, 1))
        pooled = np.sqrt(m.var(axis=1, ddof=1).mean(axis=0)) if len(x) > 1 else np.zeros_like(gap)
        se = pooled * np.sqrt(2.0 / len(x))
        ratio = np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 0, np.inf, 0.0))
        summary["layers"][layer] = {
            "max_gap": float(gap.max()),
            "max_gap_over_se": float(ratio.max()),
            "diverged": bool(np.any(ratio > z)),
        }
    summary["max_gap"] = max(s["max_gap"] for s in summary["layers"].values())
    summary["diverged"] = any(s["diverged"] for s in summary["layers"].values())
    return records, summary


STATS_FIELDS = ("level", "layer", "channel", "epoch", "mean", "var")


def stats_to_csv(records: Sequence[StatsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_FIELDS)
    for r in records:
        w.writerow([r.level, r.layer, r.channel, r.epoch, repr(r.mean), repr(r.var)])
    return buf.getvalue()
