import csv

import numpy as np
import pytest
from scipy import integrate, stats

from subpipe import codec
from subpipe.errors import ConfigError, ProtocolError, RangeError, StageFailure
from subpipe.model import ModelDims, init_model
from subpipe.optim import AdamConfig
from subpipe.pipeline import Mode, ReferenceTrainer, ShaperConfig, TrainPlan, VirtualClock, build_pipeline, gather_params
from subpipe.pipeline.runtime import split_microbatches
from subpipe.pipeline.shaper import clamped_normal_moments, sample_bandwidth, shape_delay
from subpipe.pipeline.stage import partition_layers
from subpipe.pipeline.train import metrics_header, train
from subpipe.pipeline.transport import InProcessLink, TapEndpoint, TcpLink, parse_endpoints, read_frame_dump
from subpipe.subspace import off_subspace_ratio

SMALL = ModelDims(d=16, d_ff=32, heads=2, layers=4, vocab=256, n_max=8, k=4)


def batches(seed, b=4, n=8, count=100):
    r = np.random.default_rng(seed)
    return [r.integers(0, 256, (b, n + 1)) for _ in range(count)]


def plan(**kw):
    base = dict(steps=5, microbatches=2, batch=4, seq=8, grassmann_period=0)
    base.update(kw)
    return TrainPlan(**base)


# --- shaper ------------------------------------------------------------------

def test_shape_delay_examples():
    cfg = ShaperConfig(bandwidth=80e6, jitter=0.0)
    assert shape_delay(1_000_000, cfg, np.random.default_rng(0)) == pytest.approx(0.1, abs=1e-15)
    assert shape_delay(0, ShaperConfig(), np.random.default_rng(0)) == 0.0
    with pytest.raises(RangeError):
        shape_delay(-1, cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        ShaperConfig(bandwidth=0).validate()


def test_bandwidth_floor():
    r = np.random.default_rng(0)
    cfg = ShaperConfig(bandwidth=1.0, jitter=5.0, floor=0.1)
    assert min(sample_bandwidth(cfg, r) for _ in range(2000)) == pytest.approx(0.1)


def test_clamped_moments_against_quadrature():
    mean, std, floor = 1.0, 0.7, 0.3
    pdf = stats.norm(mean, std).pdf
    p = stats.norm(mean, std).cdf(floor)
    m1 = integrate.quad(lambda x: x * pdf(x), floor, np.inf)[0] + floor * p
    m2 = integrate.quad(lambda x: x * x * pdf(x), floor, np.inf)[0] + floor ** 2 * p
    got_mean, got_std = clamped_normal_moments(mean, std, floor)
    assert got_mean == pytest.approx(m1, rel=1e-9)
    assert got_std == pytest.approx(np.sqrt(m2 - m1 ** 2), rel=1e-9)


def test_bandwidth_statistics():
    cfg = ShaperConfig()
    r = np.random.default_rng(7)
    x = np.array([sample_bandwidth(cfg, r) for _ in range(100_000)])
    mean, std = clamped_normal_moments(cfg.bandwidth, cfg.jitter * cfg.bandwidth, cfg.floor * cfg.bandwidth)
    assert abs(x.mean() - mean) <= 0.01 * mean
    assert abs(x.std() - std) <= 0.05 * std


def test_virtual_clock_serializes_a_link():
    clock = VirtualClock(ShaperConfig(bandwidth=8.0, jitter=0.0))
    assert clock.transfer(0, 1, 1, 0.0) == 1.0
    assert clock.transfer(0, 1, 1, 0.0) == 2.0  # waits for the link
    assert clock.transfer(1, 0, 1, 0.0) == 1.0  # other direction is independent
    assert clock.compute(0, 0.5, 2.0) == 2.5
    assert clock.barrier() == 2.5
    assert clock.now == 2.5


# --- transport -------------------------------------------------------------

def test_in_process_link():
    link = InProcessLink()
    link.a.send(b"one")
    link.a.send(b"two")
    link.b.send(b"back")
    assert link.b.recv() == b"one" and link.b.recv() == b"two" and link.a.recv() == b"back"
    with pytest.raises(ProtocolError):
        link.b.recv()
    link.a.send(b"x")
    assert link.b.drain() == 1


def test_tcp_link_roundtrip():
    link = TcpLink()
    try:
        big = bytes(range(256)) * 4096
        link.a.send(big)
        link.a.send(b"")
        link.b.send(b"reply")
        assert link.b.recv() == big
        assert link.b.recv() == b""
        assert link.a.recv() == b"reply"
    finally:
        link.close()


def test_tap_and_dump(tmp_path):
    link = InProcessLink()
    path = tmp_path / "dump.bin"
    with open(path, "wb") as fh:
        tap = TapEndpoint(link.a, fh)
        tap.send(b"abc")
        tap.enabled = False
        tap.send(b"zz")
    assert read_frame_dump(path.read_bytes()) == [b"abc"]
    assert link.b.recv() == b"abc"
    with pytest.raises(ProtocolError):
        read_frame_dump(path.read_bytes()[:-1])


def test_parse_endpoints():
    assert parse_endpoints("127.0.0.1:9000, host:1") == [("127.0.0.1", 9000), ("host", 1)]
    with pytest.raises(ConfigError):
        parse_endpoints("nohost")


# --- scheduling --------------------------------------------------------------

def test_partition_layers():
    cfgs = partition_layers(5, 3)
    assert [(c.first_layer, c.last_layer) for c in cfgs] == [(0, 1), (2, 3), (4, 4)]
    assert cfgs[0].has_embeddings and cfgs[-1].has_head and cfgs[-1].runs_grassmann
    assert not partition_layers(4, 2, compressed=False)[-1].runs_grassmann
    with pytest.raises(ConfigError):
        partition_layers(2, 3)


def test_mode_parse():
    assert Mode.parse("compressed").constrained
    m = Mode.parse("lossy:topk:8")
    assert (m.kind, m.codec, m.budget) == ("lossy", "topk", 8.0)
    assert str(m) == "lossy:topk:8"
    for bad in ("lossy:gzip:8", "lossy:topk", "fast", "lossy:svd:-1"):
        with pytest.raises(ConfigError):
            Mode.parse(bad)


def test_plan_validation():
    with pytest.raises(ConfigError):
        plan(batch=5, microbatches=2).validate()
    with pytest.raises(ConfigError):
        plan(microbatches=0).validate()


def test_build_rejects_unconstrained_model_in_compressed_mode():
    p, s = init_model(0, SMALL, constrained=False)
    with pytest.raises(ConfigError):
        build_pipeline(p, s, Mode.parse("compressed"), plan(), 2)


def _params(a, b):
    ta, tb = a.named_tensors(), b.named_tensors()
    return max(float(np.max(np.abs(ta[k] - tb[k]))) for k in ta)


def test_single_stage_matches_plain_step_bitwise():
    p, s = init_model(0, SMALL, constrained=False)
    pipe = build_pipeline(p, s, Mode.parse("uncompressed"), plan(microbatches=1), 1)
    ref = ReferenceTrainer(p.copy(), s, Mode.parse("uncompressed"), plan(microbatches=1))
    for i, w in enumerate(batches(0, count=3)):
        a = pipe.run_step(w[:, :-1], w[:, 1:], i)
        b = ref.step(w[:, :-1], w[:, 1:], i)
        assert a.loss == b.loss
        assert a.bytes_fwd == a.bytes_bwd == 0
    assert _params(gather_params(pipe, p), ref.params) == 0.0


def test_microbatch_accumulation_equivalence():
    p, s = init_model(0, SMALL)
    w = batches(1, count=1)[0]
    one = ReferenceTrainer(p.copy(), s, Mode.parse("compressed"), plan(microbatches=1), num_stages=2)
    two = ReferenceTrainer(p.copy(), s, Mode.parse("compressed"), plan(microbatches=2), num_stages=2)
    a = one.step(w[:, :-1], w[:, 1:], 0)
    b = two.step(w[:, :-1], w[:, 1:], 0)
    assert a.loss == pytest.approx(b.loss, rel=1e-5)
    for name, g in one.last_grads.items():
        np.testing.assert_allclose(two.last_grads[name], g, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("mode", ["compressed", "uncompressed", "lossy:topk:4", "lossy:quant:4", "lossy:svd:4"])
def test_pipeline_matches_reference(mode):
    m = Mode.parse(mode)
    p, s = init_model(0, SMALL, constrained=m.constrained)
    pl = plan(steps=6, grassmann_period=2 if m.constrained else 0)
    pipe = build_pipeline(p, s, m, pl, 4, AdamConfig(warmup_steps=2, total_steps=6))
    ref = ReferenceTrainer(p.copy(), s, m, pl, AdamConfig(warmup_steps=2, total_steps=6), num_stages=4)
    for i, w in enumerate(batches(2, count=6)):
        a = pipe.run_step(w[:, :-1], w[:, 1:], i)
        b = ref.step(w[:, :-1], w[:, 1:], i)
        assert a.loss == b.loss
        assert a.subspace_version == b.subspace_version
    assert _params(gather_params(pipe, p), ref.params) == 0.0
    if m.constrained:
        assert pipe.subspace.version == 3


def test_byte_accounting_is_exact():
    p, s = init_model(0, SMALL)
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(), 4)
    w = batches(3, count=1)[0]
    r = pipe.run_step(w[:, :-1], w[:, 1:], 0)
    mb = 2
    assert r.bytes_fwd == 3 * 2 * codec.frame_size(mb, 8, 4, True)
    assert r.bytes_bwd == 3 * 2 * codec.frame_size(mb, 8, 4, False)
    q, s = init_model(0, SMALL, constrained=False)
    pipe = build_pipeline(q, s, Mode.parse("uncompressed"), plan(), 4)
    r = pipe.run_step(w[:, :-1], w[:, 1:], 0)
    assert r.bytes_fwd == 3 * 2 * codec.frame_size(mb, 8, 16, True)
    assert r.bytes_bwd == 3 * 2 * codec.frame_size(mb, 8, 16, False)


def test_virtual_clock_determinism():
    def run():
        p, s = init_model(0, SMALL)
        pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(grassmann_period=2), 4, compute_time=1e-4)
        return [pipe.run_step(w[:, :-1], w[:, 1:], i) for i, w in enumerate(batches(4, count=4))]
    assert run() == run()


def test_tcp_pipeline_matches_in_process():
    p, s = init_model(0, SMALL)
    a = build_pipeline(p, s, Mode.parse("compressed"), plan(grassmann_period=2), 3)
    b = build_pipeline(p, s, Mode.parse("compressed"), plan(grassmann_period=2), 3, tcp=True)
    try:
        for i, w in enumerate(batches(5, count=4)):
            assert a.run_step(w[:, :-1], w[:, 1:], i) == b.run_step(w[:, :-1], w[:, 1:], i)
    finally:
        b.close()


def test_broadcast_updates_every_stage():
    p, s = init_model(0, SMALL)
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(), 4)
    new = s.replaced(s.basis)
    sent = pipe.broadcast_subspace(new)
    assert sent == 3 * codec.frame_size(1, 16, 4, False)
    assert {st.subspace.version for st in pipe.stages} == {1}
    assert len({st.subspace.basis.tobytes() for st in pipe.stages}) == 1


def test_roundtrip_stays_lossless_after_subspace_updates():
    p, s = init_model(0, SMALL)
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(grassmann_period=2, grassmann_eta=0.5), 4)
    for i, w in enumerate(batches(6, count=6)):
        r = pipe.run_step(w[:, :-1], w[:, 1:], i)
        assert r.boundary_mse <= 1e-10
    assert pipe.subspace.version == 3
    for st in pipe.stages:
        for layer in st.layers:
            if layer.constrained:
                assert off_subspace_ratio(layer.wp2, pipe.subspace) <= 1e-5


def test_stale_stage_resyncs_and_retries():
    p, s = init_model(0, SMALL)
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(), 4)
    pipe.broadcast_subspace(s.replaced(s.basis))
    pipe.stages[2].subspace = s  # a stage that missed the update
    w = batches(7, count=1)[0]
    r = pipe.run_step(w[:, :-1], w[:, 1:], 0)
    assert r.retried
    assert {st.subspace.version for st in pipe.stages} == {1}


def test_stage_failure_names_the_stage():
    p, s = init_model(0, SMALL)
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(), 4)
    pipe.stages[1].layers[0].wp1[:] = np.nan
    w = batches(8, count=1)[0]
    with pytest.raises(StageFailure) as info:
        pipe.run_step(w[:, :-1], w[:, 1:], 0)
    assert info.value.stage_id == 1


def test_lossy_boundary_error_exceeds_compressed():
    mses = {}
    for mode in ("compressed", "lossy:topk:4"):
        m = Mode.parse(mode)
        p, s = init_model(0, SMALL, constrained=m.constrained)
        pipe = build_pipeline(p, s, m, plan(), 2)
        mses[mode] = [pipe.run_step(w[:, :-1], w[:, 1:], i).boundary_mse for i, w in enumerate(batches(9, count=5))]
    assert all(l > c for l, c in zip(mses["lossy:topk:4"], mses["compressed"]))


def test_split_microbatches():
    t = np.arange(12).reshape(4, 3)
    parts = split_microbatches(t, t + 1, 2)
    assert len(parts) == 2 and parts[1][0].tolist() == [[6, 7, 8], [9, 10, 11]]


def test_train_writes_metrics(tmp_path):
    p, s = init_model(0, SMALL)
    path = tmp_path / "m.csv"
    pipe = build_pipeline(p, s, Mode.parse("compressed"), plan(metrics_path=str(path)), 2)
    rows = train(pipe, batches(10, count=5), p)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert table[0][:6] == ["step", "loss", "tps", "bytes_fwd", "bytes_bwd", "grassmann_loss"]
    assert table[0] == metrics_header(4)
    assert "stable_rank_p1_0" in table[0] and "offsub_p2_3" in table[0]
    assert len(table) == 6 and len(rows) == 5
    assert all(np.isfinite(r["loss"]) and r["tps"] > 0 for r in rows)
