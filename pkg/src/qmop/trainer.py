"""Two-stage toy training loop with hand-derived analytic gradients.

Stage 1 trains the branch operators plus the concat MLP (router off).
Stage 2 trains the router-gated weighted-sum path with temperature and
Gumbel-noise annealing. The downstream language model is replaced by an MSE
regression target, which still exercises every gradient path through the
projector. The discrete top-M prune selection is treated as fixed indices:
gradients flow through the selected token values only, never through the
scores, so the relevance map receives zero gradient by construction.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as pl
from .bundle import FeatureBundle
from .linalg import ACTIVATIONS, ShapeError, grad_check
from .router import gate_entropy


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class AnnealSchedule:
    tau0: float = 5.0
    tau_min: float = 0.5
    decay: float = 0.995
    gumbel0: float = 1.0
    gumbel_decay: float = 0.995

    def __post_init__(self):
        if not (self.tau0 >= self.tau_min > 0):
            raise ValueError("need tau0 >= tau_min > 0")
        if not (0 < self.decay < 1 and 0 < self.gumbel_decay < 1):
            raise ValueError("decay factors must be in (0,1)")


def tau_at(schedule: AnnealSchedule, step: int) -> float:
    return max(schedule.tau_min, schedule.tau0 * schedule.decay ** step)


def gumbel_scale_at(schedule: AnnealSchedule, step: int) -> float:
    return schedule.gumbel0 * schedule.gumbel_decay ** step


@dataclass
class TrainConfig:
    stage: int
    steps: int
    lr: float
    seed: int
    bundles: list[FeatureBundle]
    targets: list[np.ndarray]       # per-bundle M x D_llm
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    final_grad_check: bool = True


@dataclass
class TrainReport:
    losses: list[float]
    final_gate_entropy: float | None
    first_gate_entropy: float | None
    grad_check_max_rel_err: float | None
    params_digest: str
    tau_trace: list[float]
    gumbel_trace: list[float]


def loss_mse(output: np.ndarray, target: np.ndarray) -> float:
    if output.shape != target.shape:
        raise ShapeError(f"output {output.shape} vs target {target.shape}")
    d = output - target
    return float(np.mean(d * d))


def _mlp_backward(mlp: pl.Mlp, mcache: dict, d_y: np.ndarray,
                  grads: dict, prefix: str) -> np.ndarray:
    _, act_grad = ACTIVATIONS[mlp.activation]
    x, h, a = mcache["x"], mcache["h"], mcache["a"]
    grads[f"{prefix}.w_out"] += d_y.T @ a
    grads[f"{prefix}.b_out"] += d_y.sum(axis=0)
    d_a = d_y @ mlp.w_out
    d_h = d_a * act_grad(h)
    grads[f"{prefix}.w_in"] += d_h.T @ x
    grads[f"{prefix}.b_in"] += d_h.sum(axis=0)
    return d_h @ mlp.w_in


def _softmax_backward(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    """d loss / d logits for p = softmax(logits), rows independent."""
    inner = (d_p * p).sum(axis=-1, keepdims=True)
    return p * (d_p - inner)


def _resample_backward(params: pl.ProjectorParams, rcache: dict,
                       d_out: np.ndarray, grads: dict) -> None:
    x, k, v, attn = rcache["x"], rcache["k"], rcache["v"], rcache["attn"]
    scale = 1.0 / math.sqrt(k.shape[1])
    d_v = attn.T @ d_out
    d_attn = d_out @ v.T
    d_s = _softmax_backward(attn, d_attn) * scale
    grads["resampler.queries"] += d_s @ k
    d_k = d_s.T @ params.resampler.queries
    grads["resampler.w_k"] += d_k.T @ x
    grads["resampler.w_v"] += d_v.T @ x


def _pool_backward(params: pl.ProjectorParams, pcache: dict,
                   d_out: np.ndarray, grads: dict) -> None:
    win, k, v, attn = (pcache["windows"], pcache["k"],
                       pcache["v"], pcache["attn"])
    scale = 1.0 / math.sqrt(win.shape[2])
    d_v = attn[:, :, None] * d_out[:, None, :]          # M x s^2 x C
    d_attn = np.einsum("mc,mwc->mw", d_out, v)
    d_s = _softmax_backward(attn, d_attn) * scale
    grads["pool.q2d"] += np.einsum("mw,mwc->mc", d_s, k)
    d_k = d_s[:, :, None] * params.pool.q2d[:, None, :]  # M x s^2 x C
    d_phi_k = np.einsum("mwo,mwi->oi", d_k, win)
    d_phi_v = np.einsum("mwo,mwi->oi", d_v, win)
    if params.pool.shared_phi:
        grads["pool.phi_k"] += d_phi_k + d_phi_v
    else:
        grads["pool.phi_k"] += d_phi_k
        grads["pool.phi_v"] += d_phi_v


def _branch_backward(params, cache, name: str, d_out: np.ndarray,
                     grads: dict) -> None:
    if name == "resample":
        _resample_backward(params, cache["resample"], d_out, grads)
    elif name == "pool":
        _pool_backward(params, cache["pool"], d_out, grads)
    # prune: selected rows come straight from the input features, and score
    # influence is detached, so no parameter receives gradient.


def backward(bundle: FeatureBundle, params: pl.ProjectorParams,
             target: np.ndarray, mode: tuple):
    """Loss and analytic gradients for every learnable tensor.

    mode is ("stage1",) or ("train", tau, gumbel_scale, seed). Returns
    (loss, grads, aux) where aux carries the forward gate for inspection.
    """
    cache: dict = {}
    if mode[0] == "stage1":
        out = pl.stage1_forward(bundle, params, cache=cache)
    elif mode[0] == "train":
        _, tau, gscale, seed = mode
        out = pl.train_forward(bundle, params, tau, gscale, seed, cache=cache)
    else:
        raise ValueError(f"unknown backward mode {mode[0]!r}")

    diff = out.tokens - target
    loss = float(np.mean(diff * diff))
    d_y = 2.0 * diff / diff.size
    grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
    c = bundle.c_vis

    if mode[0] == "stage1":
        d_concat = _mlp_backward(params.stage1_mlp, cache["mlp"], d_y,
                                 grads, "stage1_mlp")
        for i, name in enumerate(("pool", "resample", "prune")):
            _branch_backward(params, cache, name,
                             d_concat[:, i * c:(i + 1) * c], grads)
        return loss, grads, {"gate": None}

    d_fused = _mlp_backward(params.out_mlp, cache["mlp"], d_y, grads, "out_mlp")
    gate = cache["gate"]
    outs = cache["outputs"]
    d_alpha = np.array([
        float(np.sum(d_fused * outs[name].tokens))
        for name in ("pool", "resample", "prune")
    ])
    for i, name in enumerate(("pool", "resample", "prune")):
        _branch_backward(params, cache, name, gate.alpha[i] * d_fused, grads)

    # gate: alpha = softmax((base_logits + noise)/tau), noise constant
    gc = cache["gate_cache"]
    d_logits = _softmax_backward(gate.alpha, d_alpha) / gate.tau_used
    grads["router.w2"] += np.outer(d_logits, gc["a1"])
    grads["router.b2"] += d_logits
    d_a1 = params.router.w2.T @ d_logits
    _, act_grad = ACTIVATIONS[params.router.activation]
    d_h1 = d_a1 * act_grad(gc["h1"])
    grads["router.w1"] += np.outer(d_h1, gc["f"])
    grads["router.b1"] += d_h1
    return loss, grads, {"gate": gate}


def gradcheck_params(bundle: FeatureBundle, params: pl.ProjectorParams,
                     target: np.ndarray, mode: tuple,
                     eps: float = 1e-5) -> dict[str, float]:
    """Per-tensor max relative error of analytic vs central-difference grads."""
    _, grads, _ = backward(bundle, params, target, mode)
    work = copy.deepcopy(params)
    vec, layout = pl.params_to_vector(work)

    def full_loss(v: np.ndarray) -> float:
        pl.set_params_from_vector(work, v)
        if mode[0] == "stage1":
            out = pl.stage1_forward(bundle, work)
        else:
            _, tau, gscale, seed = mode
            out = pl.train_forward(bundle, work, tau, gscale, seed)
        return loss_mse(out.tokens, target)

    report = {}
    base = vec.copy()
    for name, (sl, shape) in layout.items():
        def tensor_loss(sub, sl=sl):
            v = base.copy()
            v[sl] = sub
            return full_loss(v)
        report[name] = grad_check(tensor_loss, base[sl].copy(),
                                  grads[name].ravel(), eps)
    pl.set_params_from_vector(work, base)
    return report


def params_digest(params: pl.ProjectorParams) -> str:
    vec, _ = pl.params_to_vector(params)
    return hashlib.sha256(vec.astype("<f4").tobytes()).hexdigest()


def train_toy(params: pl.ProjectorParams, config: TrainConfig) -> TrainReport:
    """Plain gradient descent; deterministic for a fixed seed."""
    if len(config.bundles) != len(config.targets) or not config.bundles:
        raise ValueError("need equal, nonzero numbers of bundles and targets")
    batch = list(zip(config.bundles, config.targets))
    losses: list[float] = []
    tau_trace: list[float] = []
    gumbel_trace: list[float] = []
    first_entropy = final_entropy = None

    for step in range(config.steps):
        if config.stage == 2:
            tau = tau_at(config.schedule, step)
            gscale = gumbel_scale_at(config.schedule, step)
            tau_trace.append(tau)
            gumbel_trace.append(gscale)
        total = {name: np.zeros_like(a) for name, a in params.named_tensors()}
        step_loss = 0.0
        step_entropy = 0.0
        for i, (bundle, target) in enumerate(batch):
            if config.stage == 1:
                mode = ("stage1",)
            else:
                noise_seed = config.seed * 1000003 + step * len(batch) + i
                mode = ("train", tau, gscale, noise_seed)
            loss, grads, aux = backward(bundle, params, target, mode)
            step_loss += loss
            for name in total:
                total[name] += grads[name]
            if aux["gate"] is not None:
                step_entropy += gate_entropy(aux["gate"].alpha)
        step_loss /= len(batch)
        if not math.isfinite(step_loss):
            raise DivergenceError(step)
        losses.append(step_loss)
        if config.stage == 2:
            step_entropy /= len(batch)
            if step == 0:
                first_entropy = step_entropy
            final_entropy = step_entropy
        for name, arr in params.named_tensors():
            arr -= config.lr * total[name] / len(batch)

    gc_err = None
    if config.final_grad_check:
        bundle, target = batch[0]
        if config.stage == 1:
            mode = ("stage1",)
        else:
            last = max(config.steps - 1, 0)
            mode = ("train", tau_at(config.schedule, last),
                    gumbel_scale_at(config.schedule, last), config.seed)
        gc_err = max(gradcheck_params(bundle, params, target, mode).values())

    return TrainReport(
        losses=losses,
        final_gate_entropy=final_entropy,
        first_gate_entropy=first_entropy,
        grad_check_max_rel_err=gc_err,
        params_digest=params_digest(params),
        tau_trace=tau_trace,
        gumbel_trace=gumbel_trace,
    )
