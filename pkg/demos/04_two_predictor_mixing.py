"""Mixing two predictors: when does it help, and where is the best weight?

The improvement over predictor 1 is a concave quadratic in the mixing weight.
Its maximiser depends on the mean squared gap between the two predictors,
so the unit-gap shortcut (1 - dE) / 2 only lands on it when that gap is 1.
"""
import numpy as np

from moefield.ensemble import (PairedPredictions, error_gap, gap_sq, improvement_margin,
                               optimal_alpha, sweep, sweep_argmax)

rng = np.random.default_rng(7)
p = PairedPredictions.random(rng, J=16)
de, d2 = error_gap(p), gap_sq(p)

print("== 1. one random pair ==")
print(f"   E1 - E2 = {de:+.4f}   mean (y1 - y2)^2 = {d2:.4f}")

print("== 2. margin along alpha ==")
rows = sweep(p, step=0.1)
for a, e_ens, m in rows:
    bar = "#" * int(max(m, 0) * 40)
    print(f"   alpha {a:.1f}  E_ens {e_ens:.4f}  margin {m:+.4f} {bar}")

print("== 3. where is the best alpha? ==")
print("   grid argmax          :", round(sweep_argmax(p, 1e-4), 4))
print("   1/2 - dE / (2 D2)    :", round(optimal_alpha(de, d2), 4))
print("   (1 - dE) / 2         :", round(optimal_alpha(de), 4))

print("== 4. with the gap rescaled to 1 the shortcut is exact ==")
scale = 1.0 / np.sqrt(d2)
mid = 0.5 * (p.y1 + p.y2)
q = PairedPredictions(mid + (p.y1 - mid) * scale, mid + (p.y2 - mid) * scale, p.y_hat)
print(f"   gap {gap_sq(q):.6f}: argmax {sweep_argmax(q, 1e-4):.4f} vs (1 - dE)/2 {optimal_alpha(error_gap(q)):.4f}")

print("== 5. equal errors: best weight is one half ==")
print("   optimal_alpha(0) =", optimal_alpha(0.0), "  margin there:", round(improvement_margin(p, 0.5), 4))
