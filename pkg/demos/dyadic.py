# How well c / 2^d approximates requantization ratios, with and without the
# power-of-two constraint.
import numpy as np

from intquant.lowering import dyadic_approx

rng = np.random.default_rng(0)
ratios = np.exp2(rng.uniform(-8, 8, 2000))

err = {}
for mode in ("aqd", "fqn"):
    err[mode] = np.array([dyadic_approx(r, 1, 16, mode=mode)[1] for r in ratios])
    print(f"{mode}: median error {np.median(err[mode]):.2e}, worst {err[mode].max():.2e}")

print("fqn never better:", bool(np.all(err["fqn"] >= err["aqd"])))

for r in (0.3, 1.7, 23.25):
    d, e = dyadic_approx(r, 1, 16)
    print(f"{r} ~ {d.c}/2^{d.d} (error {e:.1e})")
