"""Single-process trainer that mirrors a pipeline's boundary treatment.

It runs the whole model in one loop and applies the boundary codec in
process at the same cut points a pipeline would use, so its losses and
gradients can be compared with a distributed run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import codec
from ..model import (FREE, ROW, ModelParams, backward_block, embed, embed_backward,
                     forward_block, head_backward, head_forward, lm_loss)
from ..optim import AdamConfig, AdamW, clip_factor, global_grad_norm, lr_at, project_constrained, rebase_constrained
from ..subspace import GrassmannAccumulator, Subspace, accumulate, grassmann_loss, grassmann_step, project_rows
from .runtime import StepReport, TrainPlan, split_microbatches
from .stage import COMPRESSED, LOSSY, Mode, partition_layers


@dataclass
class ReferenceTrainer:
    params: ModelParams
    subspace: Subspace
    mode: Mode
    plan: TrainPlan
    adam: AdamConfig = field(default_factory=AdamConfig)
    num_stages: int = 1

    def __post_init__(self):
        cfgs = partition_layers(self.params.dims.layers, self.num_stages, self.mode.constrained)
        self.cuts = {c.last_layer for c in cfgs[:-1]}
        self.optim = AdamW(self.adam)
        self.acc = GrassmannAccumulator.zeros(self.subspace.d)
        self.last_grads = {}

    def _boundary_forward(self, x, tokens):
        if self.mode.kind == COMPRESSED:
            return codec.roundtrip_forward(x, tokens, self.params.emb, self.subspace)
        if self.mode.kind == LOSSY:
            approx, _ = codec.codec_for_budget(self.mode.codec, self.mode.budget, x.shape).apply(x)
            return approx.astype(x.dtype)
        return x.astype(np.float32).astype(x.dtype)

    def _boundary_backward(self, g):
        if self.mode.kind == COMPRESSED:
            return codec.roundtrip_backward(g, self.subspace)
        if self.mode.kind == LOSSY:
            approx, _ = codec.codec_for_budget(self.mode.codec, self.mode.budget, g.shape).apply(g)
            return approx.astype(g.dtype)
        return g.astype(np.float32).astype(g.dtype)

    def loss_and_grads(self, tokens, targets):
        """Forward and backward one microbatch; returns (loss, grads, g_final)."""
        p = self.params
        L = p.dims.layers
        x = embed(p.emb, tokens)
        stashes = []
        for layer in p.layers:
            x, st = forward_block(layer, x)
            stashes.append(st)
            if layer.layer_id in self.cuts:
                x = self._boundary_forward(x, tokens)
        loss, dlogits = lm_loss(head_forward(p.head, x), targets)
        grads = {}
        grads["head"], g = head_backward(p.head, x, dlogits)
        g_final = None
        for l in range(L - 1, -1, -1):
            g, layer_grads = backward_block(p.layers[l], stashes[l], g)
            for name, value in layer_grads.items():
                grads[f"layers.{l}.{name}"] = value
            if l == L - 1 and self.mode.constrained:
                g_final = g.copy()
            if l >= 1:
                if l - 1 in self.cuts:
                    g = self._boundary_backward(g)
                elif self.mode.constrained:
                    g = project_rows(g, self.subspace)
        for name, value in embed_backward(p.emb, tokens, g).items():
            grads[f"emb.{name}"] = value
        return loss, grads, g_final

    def _params(self):
        p = self.params
        out = []
        for layer in p.layers:
            for name in layer.NAMES:
                out.append((f"layers.{layer.layer_id}.{name}", layer, name, layer.mode(name)))
        out.append(("emb.t_s", p.emb, "t_s", ROW if p.emb.constrained else FREE))
        if p.emb.train_pos:
            out.append(("emb.pos", p.emb, "pos", FREE))
        out.append(("head", p, "head", FREE))
        return out

    def step(self, tokens, targets, step_index) -> StepReport:
        m = self.plan.microbatches
        losses, total, finals = [], {}, []
        for tok, tgt in split_microbatches(tokens, targets, m):
            loss, grads, g_final = self.loss_and_grads(tok, tgt)
            losses.append(loss)
            for name, value in grads.items():
                total[name] = total[name] + value if name in total else value.copy()
            if g_final is not None:
                finals.append(g_final)
        mean = {name: g * g.dtype.type(1.0 / m) for name, g in total.items()}
        self.last_grads = mean
        scale = clip_factor(global_grad_norm(mean.values()), self.adam.clip_norm) if self.adam.clip_norm > 0 else 1.0
        lr = lr_at(self.adam, step_index)
        applied = 0
        for name, owner, attr, constraint in self._params():
            g = mean.get(name)
            if g is None:
                continue
            if scale != 1.0:
                g = g * g.dtype.type(scale)
            setattr(owner, attr, self.optim.update(name, getattr(owner, attr), g, constraint, lr))
            applied += 1
        g_loss = float("nan")
        if self.mode.constrained:
            project_constrained(self.params.layers, self.params.emb, self.subspace)
            g = np.concatenate(finals, axis=0)
            g = g * g.dtype.type(1.0 / m)
            self.acc = accumulate(self.acc, g)
            g_loss = grassmann_loss(g, self.subspace)
            period = self.plan.grassmann_period
            if period and (step_index + 1) % period == 0:
                new = grassmann_step(self.subspace, self.acc, self.plan.grassmann_eta)
                new = codec.wire_subspace(new)
                self.acc.reset()
                self.install_subspace(new)
        return StepReport(step_index, float(np.mean(losses)), applied, 0, 0, 0.0,
                          grassmann_loss=g_loss, subspace_version=self.subspace.version)

    def install_subspace(self, new: Subspace) -> None:
        old = self.subspace
        for name, owner, attr, constraint in self._params():
            if constraint != FREE:
                self.optim.rebase(name, constraint, old, new)
        rebase_constrained(self.params.layers, self.params.emb, new)
        self.subspace = new
