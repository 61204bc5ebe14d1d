"""Small shared builders for tests."""
import numpy as np

from moefield.experts import build_bank
from moefield.gate import gate_for
from moefield.moe import DensityFilter, MixtureOfExperts


def unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def random_moe(seed=0, M=3, k=2, base=4, threshold=None, dtype=np.float64, gate_scale=1.0):
    """Small MoE with a non-trivial gate (random last layer) and optional filter."""
    rng = np.random.default_rng(seed)
    bank = build_bank(base, M, seed, dtype=dtype)
    for e in bank:
        e.density.values.data[...] = rng.normal(size=e.density.values.shape)
    gate = gate_for(bank, 4, seed=seed)
    gate.mlp.weights[-1].data[...] = rng.normal(scale=gate_scale, size=gate.mlp.weights[-1].shape)
    filt = None if threshold is None else DensityFilter.from_expert(bank[0], threshold)
    return MixtureOfExperts(bank, gate, filt, k)
