"""Forward and backward passes over a :class:`ModelGraph`.

Only the layer set in :mod:`intquant.graph` is differentiated; there is no
general autodiff. Quantizers use straight-through gradients. BatchNorm nodes
that resolve to the same parameter key within one training forward pass share
pooled batch statistics, and the running statistics of that key are updated
once per pass. A node with ``stats="per_call"`` instead normalizes with its
own batch statistics and updates the shared running statistics by itself,
the way a shared module called once per pyramid level behaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .. import kernels
from .graph import GraphError, ModelGraph
from ..quantcore import (
    ActQuantizer,
    WtQuantizer,
    activation_residual,
    activation_surrogate,
    grad_scale,
    quantize_activation,
    quantize_weight,
    ste_grad_activation,
    ste_grad_weight,
    weight_residual,
    weight_surrogate,
)


@dataclass
class Cache:
    values: List[Optional[np.ndarray]]
    aux: List[dict]
    training: bool
    quant: bool
    level: Optional[int]
    bn_groups: Dict[str, dict] = field(default_factory=dict)
    residuals: Dict[tuple, np.ndarray] = field(default_factory=dict)


def bn_update_stats(mean, var, batch_mean, batch_var, momentum):
    """Exponential moving average of BN statistics. Returns new ``(mean, var)``."""
    if np.size(batch_mean) == 0:
        raise GraphError("empty batch statistics")
    m = momentum
    return (1 - m) * mean + m * batch_mean, (1 - m) * var + m * batch_var


def _group_id(g: ModelGraph, i: int, level: Optional[int]) -> str:
    key = g.bn_key(i, level)
    return key if g.nodes[i].attrs.get("stats", "pooled") == "pooled" else f"{key}#{i}"


def _bn_groups(g: ModelGraph, level: Optional[int]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {}
    for i, n in enumerate(g.nodes):
        if n.op in ("bn", "mlbn"):
            groups.setdefault(_group_id(g, i, level), []).append(i)
    return groups


def forward(
    g: ModelGraph,
    x: np.ndarray,
    training: bool = False,
    level: Optional[int] = None,
    quant: Optional[bool] = None,
    residuals: Optional[Dict[tuple, np.ndarray]] = None,
    update_stats: bool = True,
):
    """Evaluate the graph on a batch ``x`` of shape ``(N, C, H, W)``.

    ``quant`` defaults to ``g.mode == "qat"``. ``level`` selects the active
    BatchNorm of ``mlbn`` nodes that carry no fixed level. When ``residuals``
    is given, quantizers evaluate the frozen-residual surrogate instead of
    rounding, which is what finite-difference gradient checks differentiate.

    Returns ``(cache, outputs)`` with one output array per ``g.outputs`` entry.
    """
    if quant is None:
        quant = g.mode == "qat"
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.nodes[0].attrs["shape"]):
        raise GraphError(f"input shape {x.shape} does not match {g.nodes[0].attrs['shape']}")
    if level is not None and not 0 <= level < g.pyramid_levels:
        raise GraphError(f"level {level} out of range for {g.pyramid_levels} levels")
    n = len(g.nodes)
    cache = Cache([None] * n, [dict() for _ in range(n)], training, quant, level)
    groups = _bn_groups(g, level) if training else {}
    vals, P = cache.values, g.params
    for i, node in enumerate(g.nodes):
        a, aux = node.attrs, cache.aux[i]
        op = node.op
        if op == "input":
            vals[i] = x
            continue
        xin = vals[node.inputs[0]]
        if op in ("input_quant", "act_quant"):
            if quant:
                q = ActQuantizer(float(P[a["nu"]]), a["bits"])
                if residuals is not None and ("x", i) in residuals:
                    out = activation_surrogate(xin, q.nu, q.bits, residuals[("x", i)])
                else:
                    out = quantize_activation(xin, q)[1]
                    cache.residuals[("x", i)] = activation_residual(xin, q)
                aux["xbar"] = out
                vals[i] = out
            else:
                vals[i] = xin
        elif op in ("conv", "linear"):
            w = P[a["weight"]]
            if quant:
                q = WtQuantizer(float(P[a["nu"]]), a["bits"])
                if residuals is not None and ("w", i) in residuals:
                    wq = weight_surrogate(w, q.nu, q.bits, residuals[("w", i)])
                else:
                    wq = quantize_weight(w, q)[1]
                    cache.residuals[("w", i)] = weight_residual(w, q)
            else:
                wq = w
            aux["wq"] = wq
            if op == "conv":
                out, cols = kernels.conv2d(xin, wq, a["stride"], a["padding"])
                aux["cols"] = cols
            else:
                flat = xin.reshape(len(xin), -1)
                aux["flat"] = flat
                out = (flat @ wq.T)[:, :, None, None]
            vals[i] = out
        elif op in ("bn", "mlbn"):
            key = g.bn_key(i, level)
            gamma, beta = P[key + ".gamma"], P[key + ".beta"]
            eps = a["eps"]
            gid = _group_id(g, i, level)
            if training:
                grp = cache.bn_groups.get(gid)
                if grp is None:
                    grp = _pooled_stats(g, cache, groups[gid], gid, key)
                    if update_stats:
                        g.state[key + ".mean"], g.state[key + ".var"] = bn_update_stats(
                            g.state[key + ".mean"], g.state[key + ".var"],
                            grp["mean"], grp["var"], a["momentum"],
                        )
                mean, istd = grp["mean"], grp["istd"]
            else:
                mean = g.state[key + ".mean"]
                istd = 1.0 / np.sqrt(g.state[key + ".var"] + eps)
            xhat = (xin - mean[None, :, None, None]) * istd[None, :, None, None]
            aux.update(key=key, gid=gid, xhat=xhat, istd=istd)
            vals[i] = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        elif op == "relu":
            vals[i] = np.maximum(xin, 0.0)
        elif op == "maxpool":
            vals[i] = kernels.maxpool(xin, a["k"])
        elif op == "upsample":
            vals[i] = kernels.upsample_nearest(xin, a["factor"])
        elif op == "add":
            vals[i] = xin + vals[node.inputs[1]]
        elif op == "output":
            flat = xin.reshape(len(xin), -1)
            if quant:
                q = WtQuantizer(float(P[a["nu"]]), a["bits"])
                if residuals is not None and ("x", i) in residuals:
                    out = weight_surrogate(flat, q.nu, q.bits, residuals[("x", i)])
                else:
                    out = quantize_weight(flat, q)[1]
                    cache.residuals[("x", i)] = weight_residual(flat, q)
                aux["xbar"] = out
            else:
                out = flat
            vals[i] = out
        else:
            raise GraphError(f"unsupported op {op!r}")
    return cache, [vals[o] for o in g.outputs]


def _pooled_stats(g: ModelGraph, cache: Cache, members: List[int], gid: str, key: str) -> dict:
    xs = []
    for m in members:
        v = cache.values[g.nodes[m].inputs[0]]
        if v is None:
            raise GraphError(f"BN group {key}: member {g.nodes[m].name} input not ready")
        xs.append(v)
    count = sum(v.shape[0] * v.shape[2] * v.shape[3] for v in xs)
    if count == 0:
        raise GraphError(f"BN group {key}: empty batch")
    mean = sum(v.sum(axis=(0, 2, 3)) for v in xs) / count
    var = sum(((v - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) for v in xs) / count
    eps = g.nodes[members[0]].attrs["eps"]
    grp = {"mean": mean, "var": var, "istd": 1.0 / np.sqrt(var + eps), "count": count, "members": members,
           "key": key}
    cache.bn_groups[gid] = grp
    return grp


def backward(
    g: ModelGraph,
    cache: Optional[Cache],
    output_grads: List[Optional[np.ndarray]],
    nu_grad_scale: bool = True,
) -> Dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients for each graph output.

    Gradients of shared parameters are summed over every node using them.
    ``nu_grad_scale`` applies the ``1/sqrt(N * (2**b - 1))`` interval scale.
    """
    if cache is None or cache.values[0] is None:
        raise GraphError("backward requires the cache of a forward pass")
    n = len(g.nodes)
    grads_in: List[Optional[np.ndarray]] = [None] * n
    for o, dg in zip(g.outputs, output_grads):
        if dg is not None:
            grads_in[o] = dg if grads_in[o] is None else grads_in[o] + dg
    pgrads: Dict[str, np.ndarray] = {k: np.zeros_like(v, dtype=np.float64) for k, v in g.params.items()}
    users = g.consumers()
    group_dx: Dict[str, Dict[int, np.ndarray]] = {}
    P = g.params

    def acc(j, d):
        grads_in[j] = d if grads_in[j] is None else grads_in[j] + d

    for i in range(n - 1, 0, -1):
        node = g.nodes[i]
        a, aux = node.attrs, cache.aux[i]
        op = node.op
        dout = grads_in[i]
        if op in ("bn", "mlbn") and cache.training:
            gid = aux["gid"]
            if gid not in group_dx:
                group_dx[gid] = _pooled_bn_backward(g, cache, gid, grads_in, users, pgrads)
            dx = group_dx[gid].get(i)
            if dx is not None:
                acc(node.inputs[0], dx)
            continue
        if dout is None:
            continue
        xin = cache.values[node.inputs[0]]
        if op in ("input_quant", "act_quant"):
            if cache.quant:
                q = ActQuantizer(float(P[a["nu"]]), a["bits"])
                scale = grad_scale(xin[0].size, q.bits) if nu_grad_scale else None
                dx, dnu = ste_grad_activation(xin, dout, q, aux["xbar"], scale)
                if op == "act_quant":
                    pgrads[a["nu"]] += dnu
                acc(node.inputs[0], dx)
            else:
                acc(node.inputs[0], dout)
        elif op in ("conv", "linear"):
            w = P[a["weight"]]
            if op == "conv":
                dx, dwq = kernels.conv2d_backward(dout, aux["cols"], aux["wq"], xin.shape, a["stride"], a["padding"])
            else:
                d2 = dout.reshape(len(dout), -1)
                dwq = d2.T @ aux["flat"]
                dx = (d2 @ aux["wq"]).reshape(xin.shape)
            if cache.quant:
                q = WtQuantizer(float(P[a["nu"]]), a["bits"])
                scale = grad_scale(w.size, q.bits) if nu_grad_scale else None
                dw, dnu = ste_grad_weight(w, dwq, q, aux["wq"], scale)
                pgrads[a["nu"]] += dnu
            else:
                dw = dwq
            pgrads[a["weight"]] += dw
            acc(node.inputs[0], dx)
        elif op in ("bn", "mlbn"):
            key = aux["key"]
            gamma = P[key + ".gamma"]
            pgrads[key + ".beta"] += dout.sum(axis=(0, 2, 3))
            pgrads[key + ".gamma"] += (dout * aux["xhat"]).sum(axis=(0, 2, 3))
            acc(node.inputs[0], dout * (gamma * aux["istd"])[None, :, None, None])
        elif op == "relu":
            acc(node.inputs[0], dout * (xin > 0))
        elif op == "maxpool":
            acc(node.inputs[0], kernels.maxpool_backward(dout, xin, a["k"]))
        elif op == "upsample":
            acc(node.inputs[0], kernels.upsample_backward(dout, a["factor"]))
        elif op == "add":
            acc(node.inputs[0], dout)
            acc(node.inputs[1], dout)
        elif op == "output":
            flat = xin.reshape(len(xin), -1)
            if cache.quant:
                q = WtQuantizer(float(P[a["nu"]]), a["bits"])
                scale = grad_scale(flat[0].size, q.bits) if nu_grad_scale else None
                dx, dnu = ste_grad_weight(flat, dout, q, aux["xbar"], scale)
                pgrads[a["nu"]] += dnu
            else:
                dx = dout
            acc(node.inputs[0], dx.reshape(xin.shape))
    return pgrads


def _pooled_bn_backward(g, cache, gid, grads_in, users, pgrads):
    grp = cache.bn_groups[gid]
    members, key = grp["members"], grp["key"]
    top = max(members)
    for m in members:
        if any(u <= top for u in users[m]):
            raise GraphError(f"BN group {key}: consumers interleave with members; cannot pool")
    gamma = g.params[key + ".gamma"]
    istd, count = grp["istd"], grp["count"]
    dxhats, xhats = {}, {}
    sum_dxhat = np.zeros_like(gamma)
    sum_dxhat_xhat = np.zeros_like(gamma)
    for m in members:
        dy = grads_in[m]
        xhat = cache.aux[m]["xhat"]
        if dy is None:
            dy = np.zeros_like(xhat)
        pgrads[key + ".beta"] += dy.sum(axis=(0, 2, 3))
        pgrads[key + ".gamma"] += (dy * xhat).sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        sum_dxhat += dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat += (dxhat * xhat).sum(axis=(0, 2, 3))
        dxhats[m], xhats[m] = dxhat, xhat
    out = {}
    for m in members:
        out[m] = (istd / count)[None, :, None, None] * (
            count * dxhats[m]
            - sum_dxhat[None, :, None, None]
            - xhats[m] * sum_dxhat_xhat[None, :, None, None]
        )
    return out
