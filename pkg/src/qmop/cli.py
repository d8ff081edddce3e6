"""Command-line surface. All outputs are machine-readable JSON.

Exit codes: 0 success, 2 usage/input error, 3 dimension mismatch,
4 verification failure, 5 training divergence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import costmodel, pipeline as pl, trainer
from .bundle import FeatureBundle, read_bundle, synth_bundle, write_bundle
from .config import ConfigError, PipelineConfig, load_config, parse_mode
from .linalg import seeded_fill

EXIT_USAGE = 2
EXIT_DIMS = 3
EXIT_VERIFY = 4
EXIT_DIVERGED = 5

GRADCHECK_TOL = 1e-4
GRADCHECK_MAX_TOKENS = 64


def build_params(cfg: PipelineConfig) -> pl.ProjectorParams:
    return pl.init_projector_params(
        cfg.grid_h, cfg.grid_w, cfg.c_vis, cfg.c_txt, cfg.d_llm,
        cfg.m_tokens, cfg.pool_stride, seed=cfg.seed,
        router_hidden=cfg.router_hidden, lam=cfg.prune_lambda,
        metric=cfg.relevance_metric, activation=cfg.activation,
        shared_pool_phi=cfg.shared_pool_phi,
    )


def tokens_digest(tokens: np.ndarray) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(tokens, dtype="<f4").tobytes()
    ).hexdigest()


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def _parse_grid(ctx, param, value: str) -> tuple[int, int]:
    try:
        h, _, w = value.lower().partition("x")
        gh, gw = int(h), int(w)
    except ValueError:
        raise click.BadParameter(f"grid must look like HxW, got {value!r}")
    if gh < 1 or gw < 1:
        raise click.BadParameter(f"grid dims must be >= 1, got {value!r}")
    return gh, gw


def _emit(report: dict, out_path: str | None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@click.group()
def main():
    """Query-guided mixture-of-projector token compression toolkit."""


@main.command("synth")
@click.option("--seed", type=int, default=0)
@click.option("--grid", callback=_parse_grid, default="4x4", show_default=True,
              help="Patch grid as HxW.")
@click.option("--cvis", type=click.IntRange(min=1), default=8)
@click.option("--ctxt", type=click.IntRange(min=1), default=6)
@click.option("--out", type=click.Path(), required=True)
def cmd_synth(seed, grid, cvis, ctxt, out):
    """Write a deterministic synthetic feature-bundle file."""
    bundle = synth_bundle(seed, grid[0], grid[1], cvis, ctxt)
    write_bundle(bundle, out)


@main.command("compress")
@click.option("--features", "features", type=click.Path(exists=True),
              multiple=True, required=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--mode", "mode_spec", default=None,
              help="stage1 | train | topk:K | threshold:T "
                   "(default: config inference_mode)")
@click.option("--out", type=click.Path(), default=None)
@click.option("--no-timing", is_flag=True, help="Omit wall-clock fields.")
@click.option("--dump-tokens", is_flag=True, help="Embed full output tokens.")
@click.option("--jobs", type=click.IntRange(min=1), default=1)
def cmd_compress(features, config_path, mode_spec, out, no_timing,
                 dump_tokens, jobs):
    """Run the projector on bundle file(s) and emit a run report."""
    try:
        cfg = load_config(config_path)
        mode = parse_mode(mode_spec or cfg.inference_mode)
    except ConfigError as exc:
        _fail(EXIT_USAGE, f"config error: {exc}")
    params = build_params(cfg)

    def run_one(path: str) -> dict:
        bundle = read_bundle(path)
        if (bundle.grid_h, bundle.grid_w) != (cfg.grid_h, cfg.grid_w) or \
                (bundle.c_vis, bundle.c_txt) != (cfg.c_vis, cfg.c_txt):
            raise _DimMismatch(
                f"bundle dims grid={bundle.grid_h}x{bundle.grid_w} "
                f"c_vis={bundle.c_vis} c_txt={bundle.c_txt} vs config "
                f"grid={cfg.grid_h}x{cfg.grid_w} "
                f"c_vis={cfg.c_vis} c_txt={cfg.c_txt}"
            )
        t0 = time.perf_counter()
        if mode[0] == "stage1":
            result = pl.stage1_forward(bundle, params)
        elif mode[0] == "train":
            result = pl.train_forward(bundle, params, tau=1.0,
                                      gumbel_scale=0.0, seed=cfg.seed)
        else:
            result = pl.infer_forward(bundle, params, mode)
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        active_names = result.active.members if result.active else None
        cost = costmodel.cost_report(
            cfg.m_tokens, n_in=cfg.n_tokens, c_vis=cfg.c_vis,
            c_txt=cfg.c_txt, d_llm=cfg.d_llm,
            active=active_names or ("pool", "resample", "prune"),
        )
        run = {
            "features": str(path),
            "mode": mode_spec or cfg.inference_mode,
            "output_rows": int(result.tokens.shape[0]),
            "output_cols": int(result.tokens.shape[1]),
            "output_digest": tokens_digest(result.tokens),
            "gate": None if result.gate is None else {
                "alpha": [float(a) for a in result.gate.alpha],
                "tau": result.gate.tau_used,
                "gumbel_applied": result.gate.gumbel_applied,
            },
            "active": None if result.active is None else {
                "members": list(result.active.members),
                "weights": [float(w) for w in result.active.renorm_weights],
            },
            "cost": cost.as_dict(),
        }
        if not no_timing:
            run["timing_ms"] = elapsed_ms
        if dump_tokens:
            run["tokens"] = result.tokens.astype(np.float32).tolist()
        return run

    try:
        if jobs > 1 and len(features) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                runs = list(pool.map(run_one, features))
        else:
            runs = [run_one(p) for p in features]
    except _DimMismatch as exc:
        _fail(EXIT_DIMS, str(exc))
    _emit({"config": cfg.as_dict(), "runs": runs}, out)


class _DimMismatch(Exception):
    pass


@main.command("gradcheck")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--trials", type=int, default=5, show_default=True)
def cmd_gradcheck(config_path, trials):
    """Verify analytic gradients against central differences, both stages."""
    if trials < 1:
        _fail(EXIT_USAGE, f"--trials must be >= 1, got {trials}")
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_USAGE, f"config error: {exc}")
    if cfg.n_tokens > GRADCHECK_MAX_TOKENS:
        _fail(EXIT_USAGE,
              f"gradcheck limited to N <= {GRADCHECK_MAX_TOKENS} tokens, "
              f"config has N = {cfg.n_tokens}")

    worst: dict[str, float] = {}
    for trial in range(trials):
        seed = cfg.seed + trial
        params = build_params(dataclasses.replace(cfg, seed=seed))
        bundle = synth_bundle(seed, cfg.grid_h, cfg.grid_w,
                              cfg.c_vis, cfg.c_txt)
        target = seeded_fill(seed + 7919, cfg.m_tokens, cfg.d_llm)
        for mode in (("stage1",), ("train", 1.3, 0.7, seed)):
            report = trainer.gradcheck_params(bundle, params, target, mode)
            for name, err in report.items():
                worst[name] = max(worst.get(name, 0.0), err)

    passed = all(err <= GRADCHECK_TOL for err in worst.values())
    _emit({"max_rel_err": worst, "threshold": GRADCHECK_TOL,
           "trials": trials, "pass": passed}, None)
    if not passed:
        offenders = sorted(n for n, e in worst.items() if e > GRADCHECK_TOL)
        _fail(EXIT_VERIFY, f"gradient check failed for: {', '.join(offenders)}")


@main.command("cost")
@click.option("--tokens", type=click.IntRange(min=0), required=True,
              help="Compressed (LLM-side) visual token count.")
@click.option("--n-in", type=click.IntRange(min=1), default=None,
              help="Pre-compression token count (default 576).")
@click.option("--cvis", type=click.IntRange(min=1), default=None)
@click.option("--ctxt", type=click.IntRange(min=1), default=None)
@click.option("--dllm", type=click.IntRange(min=1), default=None)
@click.option("--out", type=click.Path(), default=None)
def cmd_cost(tokens, n_in, cvis, ctxt, dllm, out):
    """Predicted LLM TFLOPs, KV cache, and projector overhead."""
    report = costmodel.cost_report(tokens, n_in=n_in, c_vis=cvis,
                                   c_txt=ctxt, d_llm=dllm)
    _emit(report.as_dict(), out)


@main.command("train-toy")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--stage", type=click.IntRange(1, 2), required=True)
@click.option("--steps", type=click.IntRange(min=1), default=100,
              show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=None,
              help="Batch size (default: config batch_size).")
@click.option("--no-grad-check", is_flag=True,
              help="Skip the final gradient check.")
@click.option("--out", type=click.Path(), default=None)
def cmd_train_toy(config_path, stage, steps, batch, no_grad_check, out):
    """Run the two-stage toy trainer on a synthetic batch."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_USAGE, f"config error: {exc}")
    params = build_params(cfg)
    nb = batch or cfg.batch_size
    bundles = [synth_bundle(cfg.seed + i, cfg.grid_h, cfg.grid_w,
                            cfg.c_vis, cfg.c_txt) for i in range(nb)]
    targets = [seeded_fill(cfg.seed + 7919 + i, cfg.m_tokens, cfg.d_llm)
               for i in range(nb)]
    tconf = trainer.TrainConfig(
        stage=stage, steps=steps, lr=cfg.lr, seed=cfg.seed,
        bundles=bundles, targets=targets, schedule=cfg.schedule,
        final_grad_check=not no_grad_check,
    )
    try:
        report = trainer.train_toy(params, tconf)
    except trainer.DivergenceError as exc:
        _fail(EXIT_DIVERGED, str(exc))
    _emit({
        "stage": stage,
        "steps": steps,
        "losses": report.losses,
        "tau_trace": report.tau_trace,
        "gumbel_trace": report.gumbel_trace,
        "first_gate_entropy": report.first_gate_entropy,
        "final_gate_entropy": report.final_gate_entropy,
        "grad_check_max_rel_err": report.grad_check_max_rel_err,
        "params_digest": report.params_digest,
    }, out)


if __name__ == "__main__":
    main()
