"""Query-guided gating: a two-layer MLP over the joint image-text context
vector produces softmax weights over the three branches, with temperature
and optional Gumbel noise, plus top-k / threshold branch selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ACTIVATIONS, DomainError, ShapeError, rng_for, softmax_rows

BRANCHES = ("pool", "resample", "prune")


@dataclass
class RouterParams:
    w1: np.ndarray  # d x (C1+C2)
    b1: np.ndarray  # d
    w2: np.ndarray  # 3 x d
    b2: np.ndarray  # 3
    activation: str = "gelu"


@dataclass
class GateWeights:
    alpha: np.ndarray    # 3, sums to 1; order (pool, resample, prune)
    logits: np.ndarray   # 3, pre-softmax (noise included, pre-temperature)
    tau_used: float
    gumbel_applied: bool


@dataclass
class ActiveSet:
    members: tuple[str, ...]
    renorm_weights: np.ndarray  # over members, sums to 1


def build_context(v_cls: np.ndarray, t_eos: np.ndarray) -> np.ndarray:
    if v_cls.size == 0 or t_eos.size == 0:
        raise ShapeError("context halves must be nonempty")
    return np.concatenate([v_cls, t_eos])


def sample_gumbel(rng: np.random.Generator, n: int) -> np.ndarray:
    """-log(-log(u)) with u strictly inside (0, 1)."""
    u = rng.random(n)
    while np.any(u <= 0.0):  # rng.random() excludes 1.0 already
        u[u <= 0.0] = rng.random(int(np.sum(u <= 0.0)))
    return -np.log(-np.log(u))


def gate_forward(f: np.ndarray, params: RouterParams, tau: float = 1.0,
                 gumbel_scale: float = 0.0, seed: int = 0,
                 cache: dict | None = None) -> GateWeights:
    """MLP logits over branches, optional Gumbel noise, tempered softmax."""
    if tau <= 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    if gumbel_scale < 0:
        raise DomainError(f"gumbel_scale must be >= 0, got {gumbel_scale}")
    act, _ = ACTIVATIONS[params.activation]
    h1 = params.w1 @ f + params.b1
    a1 = act(h1)
    base = params.w2 @ a1 + params.b2
    logits = base
    if gumbel_scale > 0:
        logits = base + gumbel_scale * sample_gumbel(rng_for(seed), 3)
    alpha = softmax_rows(logits[None, :], temperature=tau)[0]
    if cache is not None:
        cache.update(f=f, h1=h1, a1=a1, logits=logits)
    return GateWeights(alpha, logits, tau, gumbel_scale > 0)


def _renorm(alpha: np.ndarray, idx: np.ndarray) -> ActiveSet:
    members = tuple(BRANCHES[i] for i in idx)
    w = alpha[idx]
    return ActiveSet(members, w / w.sum())


def select_topk(weights: GateWeights, k: int) -> ActiveSet:
    if not 1 <= k <= 3:
        raise DomainError(f"k must be in [1,3], got {k}")
    order = np.argsort(-weights.alpha, kind="stable")  # ties: branch order
    return _renorm(weights.alpha, np.sort(order[:k]))


def select_threshold(weights: GateWeights, theta: float) -> ActiveSet:
    if not 0.0 <= theta < 1.0:
        raise DomainError(f"theta must be in [0,1), got {theta}")
    idx = np.flatnonzero(weights.alpha > theta)
    if idx.size == 0:
        idx = np.array([int(np.argmax(weights.alpha))])
    return _renorm(weights.alpha, idx)


def gate_entropy(alpha: np.ndarray) -> float:
    a = np.clip(alpha, 1e-300, None)
    return float(-(a * np.log(a)).sum())
