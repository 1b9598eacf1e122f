"""GPipe scheduler over message-passing stages.

A step runs every microbatch forward through all stages, then every
microbatch backward, then one optimizer update per stage with the
microbatch-mean gradient. Transfers are timed on a :class:`VirtualClock`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import codec
from ..errors import ConfigError, StageFailure, StaleSubspaceError, SubpipeError
from ..model import EmbeddingTables, ModelParams
from ..optim import AdamConfig, clip_factor, global_grad_norm, lr_at
from ..subspace import Subspace, grassmann_step
from .shaper import ShaperConfig, VirtualClock
from .stage import COMPRESSED, Mode, Stage, partition_layers
from .transport import InProcessLink, TcpLink

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    steps: int = 100
    microbatches: int = 2
    batch: int = 16
    seq: int = 32
    grassmann_period: int = 500
    grassmann_eta: float = 0.1
    metrics_path: str | None = None

    def validate(self) -> None:
        if self.microbatches < 1:
            raise ConfigError("microbatches must be >= 1")
        if self.batch % self.microbatches:
            raise ConfigError(f"batch={self.batch} is not divisible by microbatches={self.microbatches}")
        if self.steps < 0 or self.seq < 1:
            raise ConfigError("steps must be >= 0 and seq >= 1")
        if self.grassmann_period < 0 or self.grassmann_eta <= 0:
            raise ConfigError("grassmann_period must be >= 0 and grassmann_eta > 0")


@dataclass
class StepReport:
    step: int
    loss: float
    grads_applied: int
    bytes_fwd: int
    bytes_bwd: int
    virtual_time: float
    bytes_ctrl: int = 0
    grassmann_loss: float = float("nan")
    boundary_mse: float = 0.0
    subspace_version: int = 0
    retried: bool = False


def split_microbatches(tokens, targets, m):
    return list(zip(np.split(np.asarray(tokens), m), np.split(np.asarray(targets), m)))


def _stage_embeddings(emb: EmbeddingTables, first: bool) -> EmbeddingTables:
    t_s = emb.t_s.copy() if first else np.zeros((0, emb.t_s.shape[1]), emb.t_s.dtype)
    return EmbeddingTables(emb.pos.copy(), emb.t_fixed.copy(), t_s, emb.constrained, emb.train_pos)


@dataclass
class Pipeline:
    stages: list
    links: list
    clock: VirtualClock
    mode: Mode
    plan: TrainPlan
    compute_time: float = 0.0  # virtual seconds per layer per microbatch forward
    history: list = field(default_factory=list)
    _subspace_wire: bytes | None = field(default=None, init=False, repr=False)

    @property
    def subspace(self) -> Subspace:
        return self.stages[-1].subspace

    def close(self) -> None:
        for link in self.links:
            link.close()

    def _call(self, stage, fn, *args):
        try:
            return fn(*args)
        except StaleSubspaceError:
            raise
        except SubpipeError as exc:
            raise StageFailure(stage.stage_id, exc) from exc
        except (ValueError, FloatingPointError, OSError) as exc:
            raise StageFailure(stage.stage_id, exc) from exc

    def _step_once(self, tokens, targets, step_index) -> StepReport:
        plan = self.plan
        m = plan.microbatches
        t0 = self.clock.now
        bytes_fwd = bytes_bwd = 0
        losses, mses = [], []
        mbs = split_microbatches(tokens, targets, m)
        last = len(self.stages) - 1
        for i, (tok, tgt) in enumerate(mbs):
            ready = t0
            for s, stage in enumerate(self.stages):
                out = self._call(stage, stage.forward, i, tok if s == 0 else None, tgt if s == last else None)
                end = self.clock.compute(s, ready, self.compute_time * len(stage.layers))
                if s == last:
                    losses.append(out.loss)
                else:
                    bytes_fwd += out.nbytes
                    mses.append(out.boundary_mse)
                    ready = self.clock.transfer(s, s + 1, out.nbytes, end)
        for i in range(m):
            ready = t0
            for s in range(last, -1, -1):
                stage = self.stages[s]
                nbytes = self._call(stage, stage.backward, i)
                end = self.clock.compute(s, ready, 2.0 * self.compute_time * len(stage.layers))
                if s > 0:
                    bytes_bwd += nbytes
                    ready = self.clock.transfer(s, s - 1, nbytes, end)

        lr = lr_at(self.stages[0].adam, step_index)
        scale = 1.0
        clip = self.stages[0].adam.clip_norm
        if clip > 0:
            norm = global_grad_norm([g for st in self.stages for g in st.mean_grads(m).values()])
            scale = clip_factor(norm, clip)
        applied = sum(st.apply_update(m, lr, scale) for st in self.stages)

        g_loss = float("nan")
        bytes_ctrl = 0
        if self.mode.kind == COMPRESSED:
            source = self._grassmann_stage()
            g_loss = source.finish_grassmann(m)
            period = plan.grassmann_period
            if period and (step_index + 1) % period == 0 and source.acc.sample_count:
                new = grassmann_step(source.subspace, source.acc, plan.grassmann_eta)
                source.acc.reset()
                bytes_ctrl = self.broadcast_subspace(new)
        span = self.clock.barrier()
        loss = float(np.mean(losses))
        return StepReport(step_index, loss, applied, bytes_fwd, bytes_bwd, span, bytes_ctrl, g_loss,
                          max(mses) if mses else 0.0, self.subspace.version)

    def _grassmann_stage(self) -> Stage:
        for st in self.stages:
            if st.cfg.runs_grassmann:
                return st
        return self.stages[-1]

    def run_step(self, tokens, targets, step_index) -> StepReport:
        """One synchronized training step; a stale subspace triggers one resync and retry."""
        try:
            report = self._step_once(tokens, targets, step_index)
        except StaleSubspaceError as exc:
            log.warning("step %d: %s; resyncing", step_index, exc)
            self._abort_step()
            self.resync()
            try:
                report = self._step_once(tokens, targets, step_index)
            except StaleSubspaceError as again:
                self._abort_step()
                raise StageFailure(-1, again) from again
            report.retried = True
        self.history.append(report)
        return report

    def _abort_step(self) -> None:
        for st in self.stages:
            st.reset_step()
        for link in self.links:
            link.a.drain()
            link.b.drain()

    def broadcast_subspace(self, new: Subspace) -> int:
        """Relay ``new`` hop by hop from the Grassmann stage; returns bytes sent.

        Every hop forwards the same bytes, so all stages decode an identical basis.
        """
        source = self._grassmann_stage()
        data = codec.serialize(codec.encode_subspace(new))
        self._subspace_wire = data
        return self._relay(source.stage_id, data)

    def _relay(self, src, data) -> int:
        dtype = self.stages[src].subspace.dtype
        self.stages[src].install_subspace(codec.decode_subspace(codec.deserialize(data), dtype))
        sent = 0
        ready = self.clock.now
        for hops in (range(src - 1, -1, -1), range(src + 1, len(self.stages))):
            prev = src
            for s in hops:
                link = self.links[min(prev, s)]
                (link.a if prev < s else link.b).send(data)
                received = (link.b if prev < s else link.a).recv()
                self.stages[s].install_subspace(codec.decode_subspace(codec.deserialize(received), dtype))
                ready = self.clock.transfer(prev, s, len(data), ready)
                sent += len(data)
                prev = s
        versions = {st.subspace.version for st in self.stages}
        if len(versions) != 1:
            raise StageFailure(-1, f"partial subspace delivery, versions {sorted(versions)}")
        return sent

    def resync(self) -> int:
        """Re-send the last broadcast so every stage agrees on the basis."""
        data = self._subspace_wire
        if data is None:
            source = self._grassmann_stage()
            for st in self.stages:
                st.install_subspace(source.subspace)
            return 0
        return self._relay(self._grassmann_stage().stage_id, data)


def build_pipeline(params: ModelParams, subspace: Subspace, mode: Mode, plan: TrainPlan,
                   num_stages=1, adam: AdamConfig | None = None, shaper: ShaperConfig | None = None,
                   tcp=None, realtime=False, compute_time=0.0, measure_boundary=True) -> Pipeline:
    """Split ``params`` into stages wired by in-process or TCP links.

    ``tcp`` is ``None`` for in-process queues, ``True`` for ephemeral loopback
    ports, or a list of ``(host, port)`` pairs, one per adjacent stage pair.
    """
    plan.validate()
    if mode.constrained and not params.constrained:
        raise ConfigError("compressed mode needs a constrained model")
    if mode.constrained and params.dims.layers < 2:
        raise ConfigError("compressed mode needs at least two layers")
    if mode.constrained and params.emb.train_pos:
        raise ConfigError("trainable positional embeddings cannot be rebuilt by receivers in compressed mode")
    adam = adam or AdamConfig()
    cfgs = partition_layers(params.dims.layers, num_stages, mode.constrained)
    stages = []
    for cfg in cfgs:
        layers = [params.layers[l].copy() for l in range(cfg.first_layer, cfg.last_layer + 1)]
        stages.append(Stage(cfg, layers, _stage_embeddings(params.emb, cfg.has_embeddings),
                            params.head.copy() if cfg.has_head else None, subspace, mode,
                            params.dims.layers, adam, measure_boundary))
    links = []
    for s in range(num_stages - 1):
        if tcp is None or tcp is False:
            link = InProcessLink()
        elif tcp is True:
            link = TcpLink()
        else:
            host, port = tcp[s]
            link = TcpLink(host, port)
        stages[s].next = link.a
        stages[s + 1].prev = link.b
        links.append(link)
    return Pipeline(stages, links, VirtualClock(shaper or ShaperConfig(), realtime), mode, plan, compute_time)


def gather_params(pipe: Pipeline, template: ModelParams) -> ModelParams:
    """Reassemble the distributed parameters into one :class:`ModelParams`."""
    out = template.copy()
    for st in pipe.stages:
        for layer in st.layers:
            out.layers[layer.layer_id] = layer.copy()
        if st.first:
            out.emb.t_s = st.emb.t_s.copy()
            out.emb.pos = st.emb.pos.copy()
        if st.last:
            out.head = st.head.copy()
    return out
