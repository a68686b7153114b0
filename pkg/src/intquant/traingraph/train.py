"""SGD training, full-precision to QAT initialization, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import backward, forward
from .graph import GAMMA_MIN, GraphError, ModelGraph, set_bits

log = logging.getLogger(__name__)

NU_MIN = 1e-4


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: Tuple[int, ...] = ()
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    mode: str = "fp"
    nu_grad_scale: bool = True
    gamma_min: float = GAMMA_MIN

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.mode not in ("fp", "qat"):
            raise ValueError(f"mode must be fp or qat, got {self.mode!r}")
        self.lr_steps = tuple(self.lr_steps)

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= s for s in self.lr_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_steps"] = list(self.lr_steps)
        return d


@dataclass
class Dataset:
    """Images ``x`` (N, C, H, W), class labels and per-sample output level."""

    x: np.ndarray
    y: np.ndarray
    level: np.ndarray = None

    def __post_init__(self):
        if self.level is None:
            self.level = np.zeros(len(self.y), dtype=np.int64)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.level[idx])


def _is_decayed(key: str) -> bool:
    return key.endswith(".w") and not key.startswith("nu.")


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    gamma_min: float = GAMMA_MIN,
    frozen: Sequence[str] = (),
):
    """Momentum SGD: ``v = m*v + g + wd*p``; ``p = p - lr*v``.

    Weight decay applies to conv/linear weights only. Returns new
    ``(params, velocity)``; BN scales are clamped to ``gamma_min`` and
    quantizer intervals to a small positive floor afterwards.
    """
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None or k in frozen:
            new_p[k], new_v[k] = p, velocity.get(k, np.zeros_like(p))
            continue
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
        d = g + weight_decay * p if (weight_decay and _is_decayed(k)) else g
        v = momentum * velocity.get(k, np.zeros_like(p)) + d
        q = p - lr * v
        if k.endswith(".gamma"):
            q = np.maximum(q, gamma_min)
        elif k.startswith("nu."):
            q = np.maximum(q, NU_MIN)
        new_p[k], new_v[k] = q, v
    return new_p, new_v


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def level_loss(outputs: List[np.ndarray], labels: np.ndarray, levels: np.ndarray):
    """Cross-entropy where sample ``i`` is scored by output ``levels[i]``."""
    n = len(labels)
    total, grads, correct = 0.0, [], 0
    for lvl, out in enumerate(outputs):
        flat = out.reshape(len(out), -1)
        sel = levels == lvl
        g = np.zeros_like(flat)
        if sel.any():
            loss, dg = softmax_xent(flat[sel], labels[sel])
            k = int(sel.sum())
            total += loss * k / n
            g[sel] = dg * k / n
            correct += int((flat[sel].argmax(axis=1) == labels[sel]).sum())
        grads.append(g.reshape(out.shape))
    return total, grads, correct


def predict(g: ModelGraph, x: np.ndarray, levels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch_size):
        _, outs = forward(g, x[s : s + batch_size])
        lv = levels[s : s + batch_size]
        stacked = np.stack([o.reshape(len(o), -1).argmax(axis=1) for o in outs])
        preds[s : s + batch_size] = stacked[lv, np.arange(len(lv))]
    return preds


def evaluate(g: ModelGraph, data: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    """Eval-mode ``(loss, accuracy)``."""
    total, correct = 0.0, 0
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        _, outs = forward(g, b.x)
        loss, _, c = level_loss(outs, b.y, b.level)
        total += loss * len(b)
        correct += c
    return total / len(data), correct / len(data)


def train(
    g: ModelGraph,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
) -> Tuple[ModelGraph, List[dict]]:
    """Train a copy of ``g``. Returns ``(trained graph, per-epoch records)``.

    Records carry ``epoch, split, loss, accuracy``. Shuffling comes from
    ``cfg.seed`` only, so a run is a pure function of its inputs.
    """
    g = g.copy()
    if cfg.mode == "qat" and g.mode != "qat":
        raise TrainingError("qat training needs a graph with bitwidths assigned")
    if cfg.mode == "fp":
        g.mode = "fp"
    rng = np.random.default_rng(cfg.seed)
    velocity: Dict[str, np.ndarray] = {}
    frozen = ("nu.input",)
    history: List[dict] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(data))
        tot, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            b = data.subset(order[s : s + cfg.batch_size])
            cache, outs = forward(g, b.x, training=True)
            loss, ograds, c = level_loss(outs, b.y, b.level)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = backward(g, cache, ograds, nu_grad_scale=cfg.nu_grad_scale)
            g.params, velocity = sgd_step(
                g.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, cfg.gamma_min, frozen
            )
            tot += loss * len(b)
            correct += c
        history.append({"epoch": epoch, "split": "train", "loss": tot / len(data), "accuracy": correct / len(data)})
        if val is not None:
            vl, va = evaluate(g, val)
            history.append({"epoch": epoch, "split": "val", "loss": vl, "accuracy": va})
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, tot / len(data))
    g.meta["train_config"] = cfg.to_dict()
    return g, history


def check_compatible(a: ModelGraph, b: ModelGraph) -> None:
    if a.architecture() != b.architecture() or a.param_shapes() != b.param_shapes():
        raise GraphError("architecture mismatch between checkpoint and model template")
    if set(a.state) != set(b.state):
        raise GraphError("running-statistics layout mismatch")


def init_interval(values: np.ndarray, bits: int, factor: float) -> float:
    """``factor * mean|v|`` for low bitwidths; ``max|v|`` at 8 bits and above.

    At 8 bits the grid is fine enough that clipping dominates the error, so the
    interval covers the calibration range instead.
    """
    a = np.abs(values)
    v = float(a.max()) if bits >= 8 else factor * float(a.mean())
    return max(v, NU_MIN)


def init_quantized_from_fp(
    fp: ModelGraph,
    bits: int,
    calib: np.ndarray,
    template: Optional[ModelGraph] = None,
    io_bits: int = 8,
) -> ModelGraph:
    """QAT graph initialized from a full-precision checkpoint.

    Weight intervals start at ``2 * mean|w|`` and activation/output intervals
    at ``3 * mean|x|`` over the calibration batch (fp, eval mode); 8-bit
    quantizers use the max magnitude instead (see :func:`init_interval`).
    Quantizers shared by several nodes pool their calibration inputs. The
    input quantizer keeps its fixed interval.
    """
    if template is not None:
        check_compatible(fp, template)
    g = fp.copy()
    g.mode = "fp"
    cache, _ = forward(g, calib, quant=False)
    set_bits(g, bits, io_bits)
    pooled: Dict[str, list] = {}
    for n in g.nodes:
        a = n.attrs
        if n.op in ("conv", "linear"):
            g.params[a["nu"]] = np.array(init_interval(g.params[a["weight"]], a["bits"], 2.0))
        elif n.op in ("act_quant", "output"):
            pooled.setdefault(a["nu"], [a["bits"]]).append(cache.values[n.inputs[0]].ravel())
    for key, (b, *xs) in pooled.items():
        g.params[key] = np.array(init_interval(np.concatenate(xs), b, 3.0))
    return g
