"""Shared (per-call and pooled) versus multi-level head BN at full precision and low bitwidth, over paired seeds."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import List, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from ..seeding import split_seed
from ..traingraph.train import TrainConfig, init_quantized_from_fp, predict, train
from .data import gen_dataset
from .model import BN_MODES, build_fpn_model

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    bn_modes: Tuple[str, ...] = ("shared", "multilevel")
    bits: Tuple = ("fp", 2)
    n_train: int = 2000
    n_test: int = 1000
    mixture: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    noise: float = 0.1
    gap: float = 2.0
    width: int = 16
    fp_epochs: int = 12
    qat_epochs: int = 10
    lr: float = 0.05
    qat_lr: float = 0.01
    batch_size: int = 64
    calib: int = 256
    workers: int = 1
    tied: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.bn_modes = tuple(self.bn_modes)
        self.bits = tuple(b if b == "fp" else int(b) for b in self.bits)
        self.mixture = tuple(float(m) for m in self.mixture)
        bad = [m for m in self.bn_modes if m not in BN_MODES]
        if bad:
            raise ValueError(f"unknown bn modes {bad}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _accuracies(g, data) -> Tuple[float, List[float]]:
    pred = predict(g, data.x, data.level)
    ok = pred == data.y
    per = [float(ok[data.level == l].mean()) if np.any(data.level == l) else float("nan") for l in range(3)]
    return float(ok.mean()), per


def run_cell(cfg: ExperimentConfig, seed: int, bn_mode: str) -> List[dict]:
    """Train one (seed, bn_mode) cell: full precision first, then each bitwidth from it.

    Data and initial weights depend on ``seed`` only, so the two BN modes of a
    seed form a matched pair.
    """
    tr = gen_dataset(split_seed(seed, "train"), cfg.n_train, cfg.mixture, cfg.noise, cfg.gap)
    te = gen_dataset(split_seed(seed, "test"), cfg.n_test, cfg.mixture, cfg.noise, cfg.gap)
    g0 = build_fpn_model(bn_mode, "fp", cfg.width, seed=split_seed(seed, "init"), tied=cfg.tied)
    fp_cfg = TrainConfig(lr=cfg.lr, epochs=cfg.fp_epochs, batch_size=cfg.batch_size,
                         lr_steps=(int(cfg.fp_epochs * 0.75),), seed=split_seed(seed, "order"))
    fp, _ = train(g0, tr.as_dataset(), fp_cfg)
    rows = []
    for bits in cfg.bits:
        if bits == "fp":
            g = fp
        else:
            q = init_quantized_from_fp(fp, bits, tr.x[: cfg.calib])
            q_cfg = TrainConfig(lr=cfg.qat_lr, epochs=cfg.qat_epochs, batch_size=cfg.batch_size, mode="qat",
                                lr_steps=(int(cfg.qat_epochs * 0.75),), seed=split_seed(seed, "order.q"))
            g, _ = train(q, tr.as_dataset(), q_cfg)
        acc, per = _accuracies(g, te)
        rows.append({"bn_mode": bn_mode, "bits": str(bits), "seed": seed, "accuracy": acc, "per_level": per})
        log.info("seed %d %s %s acc %.4f", seed, bn_mode, bits, acc)
    return rows


def _cell(args):
    return run_cell(*args)


def sign_test(diffs: Sequence[float], alternative: str) -> dict:
    """Sign test on paired differences; exact zeros are dropped."""
    d = np.asarray(diffs, dtype=np.float64)
    pos, neg = int(np.sum(d > 0)), int(np.sum(d < 0))
    n = pos + neg
    p = binomtest(pos, n, 0.5, alternative=alternative).pvalue if n else 1.0
    return {"positive": pos, "negative": neg, "ties": int(len(d) - n), "p_value": float(p), "alternative": alternative}


def summarize(rows: List[dict], cfg: ExperimentConfig, alpha: float = 0.05) -> dict:
    """Mean accuracies per cell and paired multilevel-minus-baseline tests per bitwidth.

    Low-bit comparisons use the one-sided alternative (multilevel better);
    the full-precision comparison is two-sided.
    """
    table = {}
    for r in rows:
        table.setdefault((r["bn_mode"], r["bits"]), {})[r["seed"]] = r
    out = {"cells": [], "comparisons": []}
    for (mode, bits), by_seed in sorted(table.items()):
        accs = [by_seed[s]["accuracy"] for s in sorted(by_seed)]
        per = np.array([by_seed[s]["per_level"] for s in sorted(by_seed)])
        out["cells"].append({"bn_mode": mode, "bits": bits, "mean_accuracy": float(np.mean(accs)),
                             "std_accuracy": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                             "per_level": [float(v) for v in np.nanmean(per, axis=0)], "n": len(accs)})
    baselines = [m for m in dict.fromkeys(r["bn_mode"] for r in rows) if m != "multilevel"]
    for base in baselines:
        for bits in dict.fromkeys(r["bits"] for r in rows):
            a, b = table.get(("multilevel", bits), {}), table.get((base, bits), {})
            seeds = sorted(set(a) & set(b))
            diffs = [a[s]["accuracy"] - b[s]["accuracy"] for s in seeds]
            test = sign_test(diffs, "two-sided" if bits == "fp" else "greater")
            out["comparisons"].append({"bits": bits, "baseline": base, "seeds": seeds, "diffs": diffs,
                                       "mean_diff": float(np.mean(diffs)) if diffs else float("nan"),
                                       **test, "significant": test["p_value"] < alpha})
    out["config"] = cfg.to_dict()
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Every (seed, bn_mode) cell, then :func:`summarize`. Cells run in ``cfg.workers`` processes."""
    jobs = [(cfg, s, m) for s in cfg.seeds for m in cfg.bn_modes]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(_cell, jobs))
    else:
        parts = [_cell(j) for j in jobs]
    rows = [r for p in parts for r in p]
    return {"rows": rows, **summarize(rows, cfg)}


RESULT_FIELDS = ("bn_mode", "bits", "seed", "level", "accuracy")


def results_to_csv(rows: Sequence[dict]) -> str:
    """One row per (cell, seed, level); level ``all`` holds overall accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r["bn_mode"], r["bits"], r["seed"], "all", repr(r["accuracy"])])
        for lvl, a in enumerate(r["per_level"]):
            w.writerow([r["bn_mode"], r["bits"], r["seed"], lvl, repr(a)])
    return buf.getvalue()


def format_table(summary: dict) -> str:
    lines = [f"{'bn_mode':<13} {'bits':>4} {'acc':>7} {'l0':>7} {'l1':>7} {'l2':>7}  n"]
    for c in summary["cells"]:
        lv = " ".join(f"{v:7.4f}" for v in c["per_level"])
        lines.append(f"{c['bn_mode']:<13} {c['bits']:>4} {c['mean_accuracy']:7.4f} {lv}  {c['n']}")
    for t in summary["comparisons"]:
        lines.append(
            f"multilevel - {t['baseline']} @ {t['bits']}: mean {t['mean_diff']:+.4f}, "
            f"+{t['positive']}/-{t['negative']}/={t['ties']}, sign test ({t['alternative']}) p = {t['p_value']:.4g}"
        )
    return "\n".join(lines)
