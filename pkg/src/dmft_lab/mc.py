"""Monte Carlo plumbing shared by the two induction solvers.

Both solvers draw the same populations, enumerate the same label branches and
contract expectations the same way; only their induction bookkeeping differs.
Branch layout: per-path arrays carry a branch axis S right after the path
axis.  Unconditioned models have S = 1 with unit weights and a raw noise
draw; conditioned models enumerate the label branches with weights P(y | w*)
and carry the weight derivative d/dw* P(y | w*) for score terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import PopulationSpec
from .losses import LossModel


@dataclass
class BranchContext:
    z_eff: np.ndarray  # (P, S) effective noise per branch
    weights: np.ndarray  # (P, S), sums to 1 over S per path
    dweights: np.ndarray  # (P, S), derivative of weights in w*
    conditioned: bool


def make_branches(
    model: LossModel,
    pop: PopulationSpec,
    wstar: np.ndarray,  # (P, k); zeros when unplanted
    rng: np.random.Generator,
) -> BranchContext:
    n_paths = wstar.shape[0]
    if model.conditioning is not None:
        cond = model.conditioning
        z_eff = cond.z_eff(wstar)
        w = cond.weights(wstar, pop.noise_law)
        dw = cond.dweights(wstar, pop.noise_law)
        return BranchContext(z_eff=z_eff, weights=w, dweights=dw, conditioned=True)
    z = pop.noise_law.sample(rng, n_paths)  # (P, 1)
    ones = np.ones((n_paths, 1))
    return BranchContext(z_eff=z, weights=ones, dweights=np.zeros((n_paths, 1)), conditioned=False)


def pairwise_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Pairwise-tree reduction; summation order depends only on the length,
    never on threading, so Monte Carlo averages are bit-stable."""
    v = np.moveaxis(np.asarray(values), axis, 0)
    n = v.shape[0]
    while n > 1:
        half = n // 2
        head = v[: 2 * half : 2] + v[1 : 2 * half : 2]
        if n % 2:
            v = np.concatenate([head, v[2 * half : n]], axis=0)
        else:
            v = head
        n = v.shape[0]
    return v[0]


def wmean(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """E over (paths, branches) of values (P, S, ...) with branch weights.

    Accepts collapsed values (1, 1, ...) from constant-Jacobian models; the
    mean of a constant is the constant, exactly.
    """
    p, s = values.shape[:2]
    if p == 1 and s == 1:
        return values[0, 0].copy()
    if weights.shape != (p, s):
        raise ValueError(f"weights {weights.shape} do not match values {values.shape[:2]}")
    per_path = np.einsum("ps,ps...->p...", weights, values)
    return pairwise_sum(per_path) / p


def wse(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Elementwise standard error of wmean over the path axis."""
    p, s = values.shape[:2]
    if p == 1 and s == 1:
        return np.zeros(values.shape[2:])
    per_path = np.einsum("ps,ps...->p...", weights, values)
    return np.std(per_path, axis=0, ddof=1) / np.sqrt(p)


def score_mean(dweights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """E over paths of sum_s dweights_s * values_s (score part of d/dw* E)."""
    p = values.shape[0]
    per_path = np.einsum("ps,ps...->p...", dweights, values)
    return pairwise_sum(per_path) / p


def mean_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """E over paths of the outer product a_p b_p^T for (P, k) inputs."""
    prod = a[:, :, None] * b[:, None, :]
    return pairwise_sum(prod) / a.shape[0]


def se_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    prod = a[:, :, None] * b[:, None, :]
    return np.std(prod, axis=0, ddof=1) / np.sqrt(a.shape[0])
