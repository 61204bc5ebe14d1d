"""How the gate routes points, and what the auxiliary losses see."""
import numpy as np

from moefield import autodiff as ad
from moefield.autodiff import Tensor
from moefield.experts import build_bank
from moefield.gate import gate_for
from moefield.losses import BatchRoutingStats, PenaltySchedule, aux_loss, penalty_weights, rw_aux_loss
from moefield.moe import MixtureOfExperts, route

rng = np.random.default_rng(0)

print("== 1. top-k on a few probability rows ==")
probs = np.array([[0.2, 0.5, 0.3],
                  [0.4, 0.4, 0.2],   # tie: lower index wins
                  [0.1, 0.1, 0.8]])
for k in (1, 2):
    print(f"   k={k}:", route(probs, k).indices.tolist())

print("== 2. a fresh gate is exactly uniform ==")
bank = build_bank(6, 3, seed=0)
gate = gate_for(bank, 4)
pts = rng.uniform(size=(5, 3))
print("   ", np.round(gate.probs(pts).data, 6).tolist()[0], "(and the same for every point)")

print("== 3. expert calls follow k, not M ==")
moe = MixtureOfExperts(bank, gate, None, k=2)
dirs = rng.normal(size=(1000, 3))
dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
bank.reset_calls()
with ad.no_grad():
    moe(rng.uniform(size=(1000, 3)), dirs)
print("   calls per expert:", bank.calls, " total:", sum(bank.calls), "= 2 x 1000")

print("== 4. auxiliary loss on balanced and collapsed batches ==")
B = 60
for name, c in (("balanced", np.full(3, B / 3)), ("collapsed", np.array([B, 0.0, 0.0]))):
    stats = BatchRoutingStats.from_arrays(c, c.copy(), B)
    print(f"   {name:9s}  L_aux = {aux_loss(stats).item():.3f}")

print("== 5. penalty schedules weight larger experts more ==")
for kind in ("none", "linear", "geometric", "quadratic"):
    print(f"   {kind:9s}", np.round(penalty_weights(kind, 5), 4))

stats = BatchRoutingStats.from_arrays(np.array([10.0, 20.0, 30.0]), np.array([10.0, 20.0, 30.0]), B)
for kind in ("none", "geometric"):
    val = rw_aux_loss(stats, PenaltySchedule.make(kind, 3)).item()
    print(f"   top-heavy batch, {kind:9s} penalty: {val:.3f}")
