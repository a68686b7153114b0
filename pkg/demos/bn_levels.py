"""Per-level statistics in a shared detection-style head, and a small paired ablation.

The statistics part takes under a minute. Pass ``--ablation`` for a
two-seed run of the shared vs multi-level comparison (a few minutes);
the full eight-seed version is ``intquant experiment``.
"""
import sys

from intquant.pyramidlab import (
    ExperimentConfig, build_fpn_model, collect_stats, format_table, gen_dataset,
    run_experiment, with_tied_inputs,
)
from intquant.traingraph import TrainConfig, init_quantized_from_fp, train

tr = gen_dataset(0, 1000)
g = build_fpn_model("multilevel", seed=3)
g, _ = train(g, tr.as_dataset(), TrainConfig(epochs=6, seed=1))
q = init_quantized_from_fp(g, 2, tr.x[:256])
q, _ = train(q, tr.as_dataset(), TrainConfig(lr=0.01, epochs=3, mode="qat", seed=2))

probe = gen_dataset(1, 400).x
_, summary = collect_stats(q, probe)
for layer, s in summary["layers"].items():
    print(f"{layer}: largest level gap {s['max_gap']:.3f} = {s['max_gap_over_se']:.1f} standard errors")

# the same model with every head fed identical features
_, control = collect_stats(with_tied_inputs(q, tie_bn=True), probe)
print("tied control gap:", control["max_gap"], "flagged:", control["diverged"])

if "--ablation" in sys.argv:
    cfg = ExperimentConfig(seeds=(0, 1), n_train=1000, n_test=500, fp_epochs=6, qat_epochs=4)
    print(format_table(run_experiment(cfg)))
