"""Train, quantize, lower and run a small pyramid model with integers only.

Takes a minute or two on one core.
"""
import numpy as np

from intquant.intexec import estimate_cost, exec_plan, float_equivalent, op_census, verify
from intquant.lowering import lower_model, quantize_input, validate_plan
from intquant.pyramidlab import build_fpn_model, gen_dataset
from intquant.seeding import split_seed
from intquant.traingraph import TrainConfig, evaluate, init_quantized_from_fp, train

seed = 0
tr = gen_dataset(split_seed(seed, "train"), 2000)
te = gen_dataset(split_seed(seed, "test"), 500)

# full precision first
fp = build_fpn_model("multilevel", seed=split_seed(seed, "init"))
fp, _ = train(fp, tr.as_dataset(), TrainConfig(epochs=12, lr_steps=(9,), seed=1))
print("fp accuracy   %.3f" % evaluate(fp, te.as_dataset())[1])

# 2-bit intervals initialized from the fp model, then fine-tuned
q = init_quantized_from_fp(fp, 2, tr.x[:256])
q, _ = train(q, tr.as_dataset(), TrainConfig(lr=0.01, epochs=6, lr_steps=(4,), mode="qat", seed=2))
print("2-bit accuracy %.3f" % evaluate(q, te.as_dataset())[1])

plan = lower_model(q)
print("plan ops:", " ".join(op.kind for op in plan.ops[:8]), "...")
print("valid:", validate_plan(plan)["valid"])

res = exec_plan(plan, quantize_input(plan, te.x[:8]))
print("integer logits of the first image, level 0:", res.eta[0][0].ravel())
print("max accumulator seen:", res.report.max_accumulator)

rep = verify(plan, q, te.x[:300])
worst = max(d["mean_rel"] for d in rep["drift"])
print("bit exact:", rep["bit_exact"], " mean drift %.4f of output range (tolerance 0.02)" % worst)

census = op_census(plan)
e_int, e_float = estimate_cost(census), estimate_cost(float_equivalent(census))
print("energy per image: %.1f nJ integer, %.1f nJ as fp32" % (e_int / 1e3, e_float / 1e3))
