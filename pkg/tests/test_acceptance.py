"""End-to-end acceptance checks at desk scale, one test per criterion."""

import numpy as np

from subpipe import codec
from subpipe.cli.config import PlanSection, RunConfig
from subpipe.cli.corpus import WindowSampler, ingest_corpus
from subpipe.cli.experiments import cmd_compare_codecs, cmd_rank_diag, error_accumulation_trial
from subpipe.model import LayerParams, ModelDims, backward_block, embed, forward_block, grad_flow_invariance, init_model
from subpipe.optim import ROW_CONSTANT, STANDARD, AdamConfig, OptimState, adamw_step
from subpipe.pipeline import Mode, ReferenceTrainer, ShaperConfig, TrainPlan, build_pipeline, gather_params
from subpipe.pipeline.shaper import clamped_normal_moments, sample_bandwidth, shape_delay
from subpipe.subspace import (GrassmannAccumulator, captured_energy, coordinate_subspace, distortion_bound_check,
                              grassmann_gradient, grassmann_step, off_subspace_ratio, project_rows, random_subspace)

from conftest import DESK


def desk_plan(steps, **kw):
    base = dict(steps=steps, microbatches=2, batch=16, seq=DESK.n_max, grassmann_period=500)
    base.update(kw)
    return TrainPlan(**base)


def boundary_errors(params, s, tokens):
    """Max codec round-trip error over every constrained block output."""
    x = embed(params.emb, tokens)
    worst = 0.0
    for layer in params.layers[:-1]:
        x, _ = forward_block(layer, x)
        back = codec.roundtrip_forward(x, tokens, params.emb, s)
        worst = max(worst, float(np.max(np.abs(back - x))))
    return worst


def test_criterion_01_lossless_codec(corpus_path, verdict):
    worst = {}
    for dtype in (np.float32, np.float64):
        params, s = init_model(0, DESK, constrained=True, dtype=dtype)
        trainer = ReferenceTrainer(params, s, Mode.parse("compressed"), desk_plan(500, grassmann_period=100),
                                   AdamConfig(total_steps=500), num_stages=1)
        sampler = WindowSampler(ingest_corpus(corpus_path), 16, DESK.n_max, seed=0)
        probe = sampler.next_batch()[:, :-1]
        errs = [boundary_errors(trainer.params, trainer.subspace, probe)]
        for step in range(500):
            w = sampler.next_batch()
            trainer.step(w[:, :-1], w[:, 1:], step)
            if (step + 1) % 125 == 0:
                errs.append(boundary_errors(trainer.params, trainer.subspace, probe))
        assert len(errs) == 5 and trainer.subspace.version == 5
        worst[np.dtype(dtype).name] = max(errs)
    ok = worst["float32"] <= 1e-5 and worst["float64"] <= 1e-12
    verdict(1, ok, f"max round-trip error f32={worst['float32']:.2e} (<=1e-5) f64={worst['float64']:.2e} (<=1e-12)")


def test_criterion_02_distributed_equals_monolithic(corpus_path, verdict):
    params, s = init_model(0, DESK)
    plan = desk_plan(50, grassmann_period=10)
    adam = AdamConfig(total_steps=50)
    mode = Mode.parse("compressed")
    pipe = build_pipeline(params, s, mode, plan, 4, adam)
    # the single-process reference applies the codec projection at the same three boundaries
    ref = ReferenceTrainer(params.copy(), s, mode, plan, adam, num_stages=4)

    captured = {}
    for st in pipe.stages:
        def hooked(m, lr, scale=1.0, _st=st, _orig=st.apply_update):
            captured.update(_st.mean_grads(m))
            return _orig(m, lr, scale)
        st.apply_update = hooked

    def rel(a, b):
        a, b = a.astype(np.float64), b.astype(np.float64)
        return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)

    sampler = WindowSampler(ingest_corpus(corpus_path), 16, DESK.n_max, seed=0)
    loss_rel = grad_rel = 0.0
    mono_worst = []
    for step in range(50):
        w = sampler.next_batch()
        # informational: a model with no boundaries at all, evaluated at the pipeline's current weights
        mono = ReferenceTrainer(gather_params(pipe, params), pipe.subspace, mode, plan, adam, num_stages=1)
        mono.step(w[:, :-1], w[:, 1:], step)
        captured.clear()
        a = pipe.run_step(w[:, :-1], w[:, 1:], step)
        b = ref.step(w[:, :-1], w[:, 1:], step)
        loss_rel = max(loss_rel, abs(a.loss - b.loss) / abs(b.loss))
        assert set(captured) == set(ref.last_grads)
        for name, g in ref.last_grads.items():
            grad_rel = max(grad_rel, rel(captured[name], g))
        mono_worst.append(max(rel(captured[name], g) for name, g in mono.last_grads.items()))
    assert pipe.subspace.version == 5
    ok = loss_rel <= 1e-5 and grad_rel <= 1e-5
    mono = np.array(mono_worst)
    verdict(2, ok, f"4-stage pipeline vs single-process reference over 50 steps: loss rel {loss_rel:.1e}, "
                   f"gradient rel {grad_rel:.1e} (<=1e-5); no-boundary model at the same weights: median "
                   f"{np.median(mono):.1e}, {int(np.sum(mono > 1e-5))} step(s) above 1e-5")


def test_criterion_03_gradient_flow_invariance(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        s = random_subspace(64, 8, rng, np.float64)
        layer = LayerParams.__new__(LayerParams)
        layer.wp2 = project_rows(rng.normal(size=(256, 64)), s)
        g = rng.normal(size=(2, 8, 64))
        worst = max(worst, grad_flow_invariance(layer, g, s) / np.linalg.norm(g @ layer.wp2.T))
    verdict(3, worst <= 1e-5, f"worst relative residual over 1000 pairs {worst:.2e} (<=1e-5)")


def _fd_rel(f, param, grad, step=1e-5):
    flat = param.reshape(-1)
    fd = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        fd[i] = (up - down) / (2 * step)
    return np.linalg.norm(grad.reshape(-1) - fd) / max(np.linalg.norm(fd), 1e-300)


def test_criterion_04_block_finite_differences(verdict):
    dims = ModelDims(d=8, d_ff=32, heads=2, layers=1, vocab=11, n_max=3, k=2)
    params, _ = init_model(4, dims, constrained=False, dtype=np.float64)
    layer = params.layers[0]
    for name in LayerParams.NAMES:
        setattr(layer, name, getattr(layer, name) * 10)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 8))
    r = rng.normal(size=(2, 3, 8))
    loss = lambda: float(np.sum(forward_block(layer, x)[0] * r))
    _, stash = forward_block(layer, x)
    dx, grads = backward_block(layer, stash, r)
    errs = {name: _fd_rel(loss, getattr(layer, name), grads[name]) for name in LayerParams.NAMES}
    errs["x"] = _fd_rel(loss, x, dx)
    worst = max(errs, key=errs.get)
    verdict(4, errs[worst] <= 1e-3, f"worst relative FD error {errs[worst]:.2e} on {worst} (<=1e-3)")


def test_criterion_05_row_constant_preserves_subspace(verdict):
    rng = np.random.default_rng(5)
    s = random_subspace(64, 8, rng, np.float32)
    w0 = project_rows(rng.normal(0, 0.02, (256, 64)), s).astype(np.float32)
    cfg = AdamConfig()
    w_rc, w_std = w0.copy(), w0.copy()
    st_rc, st_std = OptimState.zeros_like(w0, ROW_CONSTANT), OptimState.zeros_like(w0, STANDARD)
    worst_rc = 0.0
    for _ in range(1000):
        g = project_rows(rng.normal(size=(256, 8)).astype(np.float32) @ s.basis.T, s)
        w_rc = adamw_step(w_rc, g, st_rc, cfg, cfg.lr)
        w_std = adamw_step(w_std, g, st_std, cfg, cfg.lr)
        worst_rc = max(worst_rc, off_subspace_ratio(w_rc, s))
    drift = off_subspace_ratio(w_std, s)
    verdict(5, worst_rc <= 1e-5 and drift > 1e-3,
            f"row-constant max off-subspace {worst_rc:.2e} (<=1e-5), standard {drift:.2e} (>1e-3)")


def test_criterion_06_grassmann(verdict):
    rng = np.random.default_rng(6)
    d, k = 64, 8
    ortho = fd = 0.0
    monotone = True
    for _ in range(100):
        a = rng.normal(size=(d, d))
        gram = a @ a.T / d
        s = random_subspace(d, k, rng, np.float64)
        acc = GrassmannAccumulator(gram, 1)
        for eta in (0.1, 1e-3, 1e-4):
            new = grassmann_step(s, acc, eta)
            u = new.basis
            ortho = max(ortho, np.linalg.norm(u.T @ u - np.eye(k)))
            if eta <= 1e-3:
                monotone &= captured_energy(new, gram) >= captured_energy(s, gram)
        u = s.basis.copy()
        energy = lambda: float(np.trace(u.T @ gram @ u))
        # the loss is -Tr(U^T S U) up to a constant, so its gradient is -2 S U
        fd = max(fd, _fd_rel(lambda: -energy(), u, grassmann_gradient(s, gram), step=1e-6))
    ok = ortho <= 1e-6 and fd <= 1e-4 and monotone
    verdict(6, ok, f"||U^T U - I|| max {ortho:.2e} (<=1e-6), gradient FD rel {fd:.2e} (<=1e-4), "
                   f"energy non-decreasing={monotone}")


def test_criterion_07_compression_ratio(verdict):
    rng = np.random.default_rng(7)
    ratios = []
    for d, k in ((64, 8), (4096, 40)):
        s = coordinate_subspace(d, k, np.float64)
        g = rng.normal(size=(2, 4, k)) @ s.basis.T
        dense = codec.encode_dense(codec.MSG_BACKWARD, g.astype(np.float32), 0)
        small = codec.encode_backward(g, s)
        ratios.append(dense.payload_bytes() / small.payload_bytes())
    ok = ratios[0] == 64 / 8 and ratios[1] == 4096 / 40 and 100 <= ratios[1] <= 103
    verdict(7, ok, f"payload ratio {ratios[0]:g} at d=64 k=8 (exactly 8), {ratios[1]:g} at d=4096 k=40 (in [100, 103])")


def test_criterion_08_error_accumulation(verdict):
    dims = ModelDims(64, 256, 4, 4, 256, 4, 8)
    lossy = codec.LossyCodec("quant", 8)
    holds, increasing, worst, nu_min = True, True, 0.0, np.inf
    for t in range(100):
        r = error_accumulation_trial(t, dims, lossy)
        nu_min = min(nu_min, r["nu"])
        for err, bound in zip(r["errors"], r["bounds"]):
            holds &= err <= 1.1 * bound
            worst = max(worst, err / bound)
        if r["nu"] > 1:
            increasing &= bool(np.all(np.diff(r["errors"]) < 0))  # index 0 is the deepest boundary
    verdict(8, holds and increasing and nu_min > 1,
            f"100 trials: max measured/bound {worst:.3f} (<=1.1), strictly increasing with depth={increasing}, "
            f"min nu_hat {nu_min:.2f}")


def test_criterion_09_distortion_bound(verdict):
    rng = np.random.default_rng(9)
    failures = 0
    for _ in range(100_000):
        n = int(rng.integers(2, 9))
        r = distortion_bound_check(rng.normal(size=n), rng.uniform(0.01, 10.0, size=n))
        failures += not (r.holds and r.alt_holds)
    tight = 0.0
    for m in (1e-3, 0.5, 1.0, 7.0, 1e4):
        r = distortion_bound_check([1.0, 1.0], [m, 3 * m])
        tight = max(tight, abs(r.lhs - r.rhs) / r.rhs)
        failures += not r.holds
    verdict(9, failures == 0 and tight <= 1e-12,
            f"{failures} violations in 100000 random trials, equality case relative gap {tight:.1e}")


def test_criterion_10_shaper(verdict):
    cfg = ShaperConfig(bandwidth=80e6, jitter=0.2, floor=0.1)
    r = np.random.default_rng(10)
    x = np.array([sample_bandwidth(cfg, r) for _ in range(100_000)])
    mean, std = clamped_normal_moments(80e6, 0.2 * 80e6, 0.1 * 80e6)
    mean_err = abs(x.mean() - mean) / mean
    std_err = abs(x.std() - std) / std
    delay = shape_delay(1_000_000, ShaperConfig(bandwidth=80e6, jitter=0.0), r)
    ok = mean_err <= 0.01 and std_err <= 0.05 and abs(delay - 0.1) <= 1e-15
    verdict(10, ok, f"mean err {mean_err:.2%} (<=1%), std err {std_err:.2%} (<=5%), 1 MB delay {delay!r} s")


def test_criterion_11_throughput_analog(corpus_path, verdict):
    sampler = WindowSampler(ingest_corpus(corpus_path), 16, DESK.n_max, seed=0)
    windows = [sampler.next_batch() for _ in range(3)]
    totals = {}
    for mode in ("compressed", "uncompressed"):
        params, s = init_model(0, DESK, constrained=mode == "compressed")
        pipe = build_pipeline(params, s, Mode.parse(mode), desk_plan(3), 4, shaper=ShaperConfig(bandwidth=80e6),
                              compute_time=0.0)
        reports = [pipe.run_step(w[:, :-1], w[:, 1:], i) for i, w in enumerate(windows)]
        totals[mode] = sum(r.virtual_time for r in reports)
    ratio = totals["uncompressed"] / totals["compressed"]
    target = DESK.d / DESK.k
    verdict(11, abs(ratio - target) <= 0.05 * target,
            f"virtual time ratio {ratio:.3f} vs d/k={target:g} (+-5%); forward frames also carry "
            f"{codec.HEADER_SIZE}-byte headers and u32 token ids, which are not compressed")


def test_criterion_12_rank_collapse(corpus_path, tmp_path, verdict):
    cfg = RunConfig(corpus=corpus_path, out=str(tmp_path / "rank"), plan=PlanSection(steps=2000)).validate()
    r = cmd_rank_diag(cfg)
    worst = max(r["ratio_p2"])
    verdict(12, worst <= 0.5,
            f"final/initial W_p2 stable rank per layer {[round(x, 3) for x in r['ratio_p2']]} (each <=0.5), "
            f"initial {[round(x, 1) for x in r['initial_p2']]}")


def test_criterion_13_codec_comparison(corpus_path, tmp_path, verdict):
    cfg = RunConfig(corpus=corpus_path, out=str(tmp_path / "codecs"), stages=2,
                    plan=PlanSection(steps=200)).validate()
    mse = cmd_compare_codecs(cfg)
    ok = mse["subspace"] <= 1e-10 and all(mse[name] > 1e-3 for name in ("topk", "quant", "svd"))
    verdict(13, ok, "boundary MSE at budget d/k: " + ", ".join(f"{k}={v:.2e}" for k, v in mse.items())
            + " (subspace <=1e-10, others >1e-3)")
