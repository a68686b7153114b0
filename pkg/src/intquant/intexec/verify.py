"""Plan verification against the reference simulation and the training graph."""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from ..lowering.lower import lower_model, quantize_input
from ..lowering.plan import IntegerPlan
from ..traingraph.engine import forward
from ..traingraph.graph import ModelGraph
from .executor import exec_plan
from .reference import simulate_plan


class ProvenanceError(ValueError):
    pass


def compare_values(p: IntegerPlan, got: dict, want: dict) -> dict:
    """Op-by-op comparison of integer slot values. Reports the first mismatching op."""
    first: Optional[int] = None
    mismatched = 0
    total = 0
    for i, op in enumerate(p.ops):
        if op.kind == "Dequant":
            continue
        a, b = got[op.output], want[op.output]
        bad = int(np.count_nonzero(a != b)) if a.shape == b.shape else int(a.size)
        total += a.size
        mismatched += bad
        if bad and first is None:
            first = i
    return {"mismatched_elements": mismatched, "compared_elements": total, "first_mismatch_op": first}


def verify(
    p: IntegerPlan,
    g: ModelGraph,
    x: np.ndarray,
    drift_tol: float = 0.02,
    batch_size: int = 250,
    check_provenance: bool = True,
) -> dict:
    """Check (a) bit-exactness and (b) Dequant drift.

    For (a) the executor's values for ``p`` are compared op by op against the
    extended-precision simulation of a plan lowered afresh from ``g`` with the
    same settings, so a plan edited after lowering is caught at the first op
    it disagrees on. The simulation of ``p`` itself must also match the
    executor. For (b) the real outputs are compared with the graph's
    eval-mode fake-quant outputs.

    ``drift_tol`` is a fraction of each output quantizer's range ``2 * nu``.
    """
    if check_provenance and p.meta.get("source_hash") != g.digest():
        raise ProvenanceError("plan was not lowered from this checkpoint (source hash mismatch)")
    level = p.meta.get("level")
    fresh = lower_model(g, d_max=p.meta.get("d_max", 16), mode=p.meta.get("mode", "aqd"), level=level)
    same_shape = [op.kind for op in fresh.ops] == [op.kind for op in p.ops]
    x = np.asarray(x, dtype=np.float64)
    exact = {"mismatched_elements": 0, "compared_elements": 0, "first_mismatch_op": None}
    out_mismatch = 0
    drift_abs: List[List[np.ndarray]] = [[] for _ in p.outputs]
    float_ops = 0
    max_acc = 0
    for s in range(0, len(x), batch_size):
        xb = x[s : s + batch_size]
        eta = quantize_input(p, xb)
        res = exec_plan(p, eta, keep_values=True)
        ref_eta, ref_vals = simulate_plan(fresh, eta, keep_values=True)
        if not same_shape:
            ref_eta, ref_vals = simulate_plan(p, eta, keep_values=True)
        cmp = compare_values(p, res.values, ref_vals)
        self_eta, _ = simulate_plan(p, eta)
        out_mismatch += sum(int(np.count_nonzero(a != b)) for a, b in zip(res.eta, self_eta))
        exact["mismatched_elements"] += cmp["mismatched_elements"]
        exact["compared_elements"] += cmp["compared_elements"]
        if exact["first_mismatch_op"] is None:
            exact["first_mismatch_op"] = cmp["first_mismatch_op"]
        out_mismatch += sum(int(np.count_nonzero(a != b)) for a, b in zip(res.eta, ref_eta))
        float_ops += res.report.float_ops_before_dequant
        max_acc = max(max_acc, res.report.max_accumulator)
        _, graph_out = forward(g, xb, level=level)
        for k, (r, f) in enumerate(zip(res.real, graph_out)):
            drift_abs[k].append(np.abs(r - f.reshape(len(f), -1)))
    ranges = [2.0 * float(g.params[g.nodes[o].attrs["nu"]]) for o in g.outputs]
    drift = []
    for k, parts in enumerate(drift_abs):
        d = np.concatenate(parts) if parts else np.zeros((0,))
        drift.append({
            "output": p.meta.get("output_names", [str(k)] * len(p.outputs))[k],
            "range": ranges[k],
            "max_abs": float(d.max()) if d.size else 0.0,
            "mean_abs": float(d.mean()) if d.size else 0.0,
            "mean_rel": float(d.mean()) / ranges[k] if d.size else 0.0,
        })
    bit_exact = same_shape and exact["mismatched_elements"] == 0 and out_mismatch == 0
    drift_ok = all(r["mean_rel"] <= drift_tol for r in drift)
    return {
        "samples": int(len(x)),
        "bit_exact": bit_exact,
        "structure_matches": same_shape,
        "output_mismatched_elements": out_mismatch,
        **exact,
        "float_ops_before_dequant": int(float_ops),
        "max_accumulator": int(max_acc),
        "drift_tol": drift_tol,
        "drift": drift,
        "drift_ok": drift_ok,
        "passed": bit_exact and drift_ok and float_ops == 0,
    }
