"""Experiment drivers behind the CLI subcommands.

Each driver takes a validated :class:`RunConfig` and an output directory,
writes CSV files plus ``summary.txt`` and returns a dict of headline numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os

import numpy as np

from .. import codec
from ..errors import ConfigError, UndefinedError
from ..linalg import spectral_norm, stable_rank
from ..model import (ModelDims, ModelParams, backward_block, embed, forward_block, head_backward,
                     head_forward, init_model, lm_loss)
from ..pipeline.reference import ReferenceTrainer
from ..pipeline.runtime import build_pipeline, gather_params
from ..pipeline.stage import LOSSY, Mode, partition_layers
from ..pipeline.train import train
from ..pipeline.transport import TapEndpoint
from .checkpoint import load_checkpoint, pack_state, save_checkpoint, unpack_state
from .config import RunConfig, emit_config
from .corpus import WindowSampler, ingest_corpus


def _dtype(cfg: RunConfig):
    return np.dtype(cfg.dtype)


def _sampler(cfg: RunConfig) -> WindowSampler:
    if not cfg.corpus:
        raise ConfigError("corpus: a text file path is required")
    return WindowSampler(ingest_corpus(cfg.corpus), cfg.plan.batch, cfg.dims.n, cfg.seed)


def _prepare_out(cfg: RunConfig, out) -> str:
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(emit_config(cfg))
    return out


def _write_summary(out, text) -> None:
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text.rstrip("\n") + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _safe_rank(a) -> float:
    try:
        return stable_rank(a)
    except UndefinedError:
        return float("nan")


# --- train -----------------------------------------------------------------

def cmd_train(cfg: RunConfig, out=None) -> dict:
    out = _prepare_out(cfg, out)
    mode = cfg.run_mode()
    dims = cfg.model_dims()
    params, subspace = init_model(cfg.seed, dims, constrained=mode.constrained, dtype=_dtype(cfg))
    states, start = {}, 0
    if cfg.checkpoint:
        params, subspace, states, start = unpack_state(load_checkpoint(cfg.checkpoint), params)
    plan = cfg.train_plan(os.path.join(out, "metrics.csv"))
    pipe = build_pipeline(params, subspace, mode, plan, cfg.stages, cfg.adam(), cfg.shaper_config(),
                          cfg.tcp_endpoints(), cfg.realtime, cfg.compute_time)
    for st in pipe.stages:
        names = {name for name, *_ in st.params()}
        st.optim.state.update({k: v for k, v in states.items() if k in names})
    sampler = _sampler(cfg)
    for _ in range(start):
        sampler.next_batch()

    taps, dump = [], None
    if cfg.dump_frames:
        dump = open(os.path.join(out, "frames.bin"), "wb")
        for st in pipe.stages:
            if st.next is not None:
                st.next = TapEndpoint(st.next, dump)
                taps.append(st.next)
            if st.prev is not None:
                st.prev = TapEndpoint(st.prev, dump)
                taps.append(st.prev)

    def first_step_only(row):
        for tap in taps:
            tap.enabled = False

    try:
        rows = train(pipe, sampler, params, on_row=first_step_only if taps else None, start_step=start)
    finally:
        pipe.close()
        if dump:
            dump.close()
    trained = gather_params(pipe, params)
    opt = {}
    for st in pipe.stages:
        opt.update(st.optim.state)
    save_checkpoint(os.path.join(out, "checkpoint.bin"), pack_state(trained, pipe.subspace, opt, start + plan.steps))

    losses = [r["loss"] for r in rows]
    result = {
        "mode": str(mode),
        "steps": plan.steps,
        "final_loss": losses[-1] if losses else float("nan"),
        "finite": all(math.isfinite(x) for x in losses),
        "bytes_fwd": sum(r["bytes_fwd"] for r in rows),
        "bytes_bwd": sum(r["bytes_bwd"] for r in rows),
        "virtual_time": sum(r["virtual_time"] for r in rows),
        "subspace_version": pipe.subspace.version,
    }
    _write_summary(out, " ".join(f"{k}={v}" for k, v in result.items()))
    return result


# --- codec comparison ----------------------------------------------------

def boundary_activation(params: ModelParams, tokens, layer: int) -> np.ndarray:
    """Output of block ``layer`` for ``tokens``."""
    x = embed(params.emb, tokens)
    for blk in params.layers[: layer + 1]:
        x, _ = forward_block(blk, x)
    return x


def compare_codecs(params: ModelParams, subspace, tokens, layer: int, budget: float) -> list:
    """Boundary MSE and wire bytes per codec at a matched compression budget.

    Rows are ``(codec, param, wire_bytes, ratio, mse)``; ``ratio`` compares
    against dense f32 values of the same tensor.
    """
    x = boundary_activation(params, tokens, layer)
    dense = x.size * 4
    rows = []
    frame = codec.encode_forward(x, tokens, params.emb, subspace, layer_id=layer)
    rec = codec.decode_forward(codec.deserialize(codec.serialize(frame)), params.emb, subspace, dtype=x.dtype)
    rows.append(("subspace", subspace.k, frame.payload_bytes(), dense / frame.payload_bytes(),
                 float(np.mean((rec.astype(np.float64) - x) ** 2))))
    for name in codec.LOSSY_NAMES:
        c = codec.codec_for_budget(name, budget, x.shape)
        approx, nbytes = c.apply(x)
        rows.append((name, c.param, nbytes, dense / nbytes, float(np.mean((approx.astype(np.float64) - x) ** 2))))
    return rows


def cmd_compare_codecs(cfg: RunConfig, out=None) -> dict:
    """Train a compressed model, then code one of its boundaries every way at budget d/k."""
    out = _prepare_out(cfg, out)
    dims = cfg.model_dims()
    cfg = dataclasses.replace(cfg, mode="compressed")
    params, subspace = init_model(cfg.seed, dims, constrained=True, dtype=_dtype(cfg))
    stages = max(cfg.stages, 2)
    plan = cfg.train_plan(os.path.join(out, "metrics.csv"))
    pipe = build_pipeline(params, subspace, Mode.parse("compressed"), plan, stages, cfg.adam(),
                          cfg.shaper_config(), None, False, cfg.compute_time)
    sampler = _sampler(cfg)
    try:
        train(pipe, sampler, params)
    finally:
        pipe.close()
    trained = gather_params(pipe, params)
    window = sampler.next_batch()
    layer = partition_layers(dims.layers, stages, True)[0].last_layer
    budget = dims.d / dims.k
    rows = compare_codecs(trained, pipe.subspace, window[:, :-1], layer, budget)
    _write_csv(os.path.join(out, "codecs.csv"), ["codec", "param", "wire_bytes", "ratio", "mse"], rows)
    result = {name: mse for name, _, _, _, mse in rows}
    _write_summary(out, f"budget={budget:g} layer={layer} " + " ".join(f"{k}_mse={v!r}" for k, v in result.items()))
    return result


# --- rank diagnostics ------------------------------------------------------

def cmd_rank_diag(cfg: RunConfig, out=None) -> dict:
    """Train unconstrained and log stable ranks of W_p1/W_p2 and their gradients per step."""
    out = _prepare_out(cfg, out)
    dims = cfg.model_dims()
    params, subspace = init_model(cfg.seed, dims, constrained=False, dtype=_dtype(cfg))
    plan = cfg.train_plan()
    ref = ReferenceTrainer(params, subspace, Mode.parse("uncompressed"), plan, cfg.adam(), 1)
    sampler = _sampler(cfg)
    L = dims.layers
    header = ["step", "loss"]
    for what in ("sr_p1", "sr_p2", "sr_grad_p1", "sr_grad_p2"):
        header += [f"{what}_{l}" for l in range(L)]
    initial = [_safe_rank(layer.wp2) for layer in params.layers]
    rows = []
    for step in range(plan.steps):
        w = sampler.next_batch()
        report = ref.step(w[:, :-1], w[:, 1:], step)
        g = ref.last_grads
        row = [step, report.loss]
        row += [_safe_rank(layer.wp1) for layer in ref.params.layers]
        row += [_safe_rank(layer.wp2) for layer in ref.params.layers]
        row += [_safe_rank(g[f"layers.{l}.wp1"]) for l in range(L)]
        row += [_safe_rank(g[f"layers.{l}.wp2"]) for l in range(L)]
        rows.append(row)
    _write_csv(os.path.join(out, "rank.csv"), header, rows)
    final = [_safe_rank(layer.wp2) for layer in ref.params.layers]
    result = {"initial_p2": initial, "final_p2": final,
              "ratio_p2": [f / i for f, i in zip(final, initial)]}
    _write_summary(out, " ".join(f"p2_{l}={i:.3f}->{f:.3f}" for l, (i, f) in enumerate(zip(initial, final))))
    return result


# --- error accumulation ---------------------------------------------------

def layer_jacobian(layer, stash) -> np.ndarray:
    """Dense Jacobian of one block at the stashed input (single sequence)."""
    b, n, d = stash.x.shape
    if b != 1:
        raise ConfigError("layer_jacobian expects a single sequence")
    size = n * d
    tiled = type(stash)(*(np.repeat(a, size, axis=0) for a in dataclasses.astuple(stash)))
    eye = np.eye(size, dtype=stash.x.dtype).reshape(size, n, d)
    rows, _ = backward_block(layer, tiled, eye)
    return rows.reshape(size, size)  # backward of the i-th unit output is row i of J


def error_accumulation_trial(seed, dims: ModelDims, lossy: codec.LossyCodec, init_std=None,
                             dtype=np.float64) -> dict:
    """Backward pass with a lossy codec at every block boundary.

    The gradient entering block ``l`` from above is coded; the error against
    the exact backward pass is reported per block input, together with the
    injected error bound ``e = max ||e_l||`` and ``nu = max ||J_l||_2``.
    """
    params, _ = init_model(seed, dims, constrained=False, dtype=dtype)
    rng = np.random.default_rng(seed + 1_000_003)
    if init_std is not None:
        for layer in params.layers:
            for name in ("wq", "wk", "wv", "wp1", "w1", "wp2"):
                setattr(layer, name, rng.normal(0, init_std, getattr(layer, name).shape).astype(dtype))
    n = dims.n_max
    tokens = rng.integers(0, dims.vocab, (1, n))
    targets = rng.integers(0, dims.vocab, (1, n))
    x = embed(params.emb, tokens)
    stashes = []
    for layer in params.layers:
        x, st = forward_block(layer, x)
        stashes.append(st)
    _, dlogits = lm_loss(head_forward(params.head, x), targets)
    _, g_top = head_backward(params.head, x, dlogits)

    L = dims.layers
    true = g_top
    observed = g_top
    injected, errors, nus = [], [], []
    for l in range(L - 1, -1, -1):
        coded = lossy.apply(observed)[0].astype(dtype)
        injected.append(float(np.linalg.norm(coded - observed)))
        observed = coded
        # error at the output of block l, i.e. the gradient block l receives
        errors.append(float(np.linalg.norm(true - observed)))
        nus.append(spectral_norm(layer_jacobian(params.layers[l], stashes[l])))
        true, _ = backward_block(params.layers[l], stashes[l], true)
        observed, _ = backward_block(params.layers[l], stashes[l], observed)
    errors = errors[::-1]  # index 0 is the deepest boundary
    e = max(injected)
    nu = max(nus)
    bounds = [codec.error_bound(e, nu, L, l + 1) for l in range(L)]
    return {"errors": errors, "bounds": bounds, "e": e, "nu": nu}


def cmd_error_accum(cfg: RunConfig, out=None) -> dict:
    out = _prepare_out(cfg, out)
    d = cfg.dims
    dims = ModelDims(d.d, d.d_ff, d.heads, d.layers, d.vocab, min(d.n, 4), d.k)
    mode = cfg.run_mode()
    if mode.kind == LOSSY:
        lossy = codec.codec_for_budget(mode.codec, mode.budget, (1, dims.n_max, dims.d))
    else:
        # a small per-boundary error keeps the accumulation additive; top-k at
        # budget d/k discards most of each gradient and saturates at once
        lossy = codec.LossyCodec("quant", 8)
    rows, holds, trials = [], True, []
    for t in range(cfg.trials):
        r = error_accumulation_trial(cfg.seed + t, dims, lossy)
        trials.append(r)
        for l, (err, bound) in enumerate(zip(r["errors"], r["bounds"])):
            ok = err <= bound * 1.1
            holds &= ok
            rows.append((t, l + 1, err, bound, r["nu"], r["e"], int(ok)))
    _write_csv(os.path.join(out, "error_accum.csv"),
               ["trial", "layer", "measured", "bound", "nu_hat", "e", "within_bound"], rows)
    mean = np.mean([r["errors"] for r in trials], axis=0)
    increasing = bool(np.all(np.diff(mean) < 0))  # deeper boundaries sit at lower indices
    result = {"bound_holds": holds, "mean_errors": mean.tolist(), "increases_with_depth": increasing,
              "nu_min": min(r["nu"] for r in trials)}
    _write_summary(out, f"codec={lossy.name}:{lossy.param:g} bound_holds={holds} "
                        f"increases_with_depth={increasing} mean_errors={[round(x, 6) for x in mean]}")
    return result
