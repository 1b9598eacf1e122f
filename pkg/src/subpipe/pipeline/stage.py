"""A pipeline stage: a contiguous slice of layers plus its optimizer state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import codec
from ..errors import ConfigError, ProtocolError
from ..model import (COL, FREE, ROW, EmbeddingTables, LayerParams, backward_block, embed,
                     embed_backward, forward_block, head_backward, head_forward, lm_loss)
from ..optim import AdamConfig, AdamW, project_constrained, rebase_constrained
from ..subspace import GrassmannAccumulator, Subspace, accumulate, grassmann_loss, project_rows

COMPRESSED = "compressed"
UNCOMPRESSED = "uncompressed"
LOSSY = "lossy"


@dataclass(frozen=True)
class Mode:
    kind: str = COMPRESSED
    codec: str | None = None
    budget: float | None = None

    @classmethod
    def parse(cls, text: str) -> "Mode":
        parts = text.split(":")
        if parts[0] in (COMPRESSED, UNCOMPRESSED) and len(parts) == 1:
            return cls(parts[0])
        if parts[0] == LOSSY and len(parts) == 3 and parts[1] in codec.LOSSY_NAMES:
            try:
                budget = float(parts[2])
            except ValueError:
                raise ConfigError(f"bad lossy budget in {text!r}") from None
            if budget <= 0:
                raise ConfigError("lossy budget must be positive")
            return cls(LOSSY, parts[1], budget)
        raise ConfigError(f"mode must be compressed, uncompressed or lossy:<topk|quant|svd>:<ratio>, got {text!r}")

    def __str__(self) -> str:
        if self.kind == LOSSY:
            return f"lossy:{self.codec}:{self.budget:g}"
        return self.kind

    @property
    def constrained(self) -> bool:
        return self.kind == COMPRESSED


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    first_layer: int
    last_layer: int
    endpoint: str = "inprocess"
    has_embeddings: bool = False
    has_head: bool = False
    runs_grassmann: bool = False


def partition_layers(num_layers, num_stages, compressed=True):
    """Contiguous, near-even layer ranges, earlier stages taking the extras."""
    if not 1 <= num_stages <= num_layers:
        raise ConfigError(f"need 1 <= stages <= layers, got {num_stages} stages for {num_layers} layers")
    base, extra = divmod(num_layers, num_stages)
    out, start = [], 0
    for s in range(num_stages):
        size = base + (1 if s < extra else 0)
        out.append(StageConfig(s, start, start + size - 1, has_embeddings=s == 0,
                               has_head=s == num_stages - 1,
                               runs_grassmann=compressed and s == num_stages - 1))
        start += size
    return out


@dataclass
class ForwardResult:
    loss: float | None = None
    nbytes: int = 0
    boundary_mse: float = 0.0


@dataclass
class _Entry:
    tokens: np.ndarray
    stashes: list
    final: np.ndarray | None = None
    dlogits: np.ndarray | None = None


@dataclass
class Stage:
    cfg: StageConfig
    layers: list
    emb: EmbeddingTables
    head: np.ndarray | None
    subspace: Subspace
    mode: Mode
    num_layers: int
    adam: AdamConfig = field(default_factory=AdamConfig)
    measure_boundary: bool = True

    def __post_init__(self):
        self.prev = None
        self.next = None
        self.optim = AdamW(self.adam)
        self.entries = {}
        self.grads = {}
        self.g_final = []
        self.acc = GrassmannAccumulator.zeros(self.subspace.d)
        self.last_grassmann_loss = float("nan")

    @property
    def stage_id(self) -> int:
        return self.cfg.stage_id

    @property
    def first(self) -> bool:
        return self.cfg.has_embeddings

    @property
    def last(self) -> bool:
        return self.cfg.has_head

    # --- boundary coding -------------------------------------------------

    def _codec(self, shape):
        return codec.codec_for_budget(self.mode.codec, self.mode.budget, shape)

    def _encode_forward(self, x, tokens, mb):
        layer_id = self.cfg.last_layer
        if self.mode.kind == COMPRESSED:
            return codec.encode_forward(x, tokens, self.emb, self.subspace, layer_id=layer_id, microbatch_id=mb)
        if self.mode.kind == LOSSY:
            return codec.encode_lossy(codec.MSG_FORWARD, x, self._codec(x.shape), self.subspace.version,
                                      tokens, layer_id, mb)
        return codec.encode_dense(codec.MSG_FORWARD, x, self.subspace.version, tokens, layer_id, mb)

    def _decode_forward(self, frame):
        if self.mode.kind == COMPRESSED:
            return codec.decode_forward(frame, self.emb, self.subspace, dtype=self.emb.t_fixed.dtype)
        if frame.msg_type != codec.MSG_FORWARD:
            raise ProtocolError(f"expected a forward frame, got msg_type {frame.msg_type}")
        if self.mode.kind == LOSSY:
            x = codec.decode_lossy(frame, self._codec((frame.b, frame.n, frame.k)))
        else:
            x = codec.decode_dense(frame)
        return x.astype(self.emb.t_fixed.dtype, copy=False)

    def _encode_backward(self, g, mb):
        layer_id = self.cfg.first_layer
        if self.mode.kind == COMPRESSED:
            return codec.encode_backward(g, self.subspace, layer_id, mb)
        if self.mode.kind == LOSSY:
            return codec.encode_lossy(codec.MSG_BACKWARD, g, self._codec(g.shape), self.subspace.version,
                                      None, layer_id, mb)
        return codec.encode_dense(codec.MSG_BACKWARD, g, self.subspace.version, None, layer_id, mb)

    def _decode_backward(self, frame, dtype):
        if self.mode.kind == COMPRESSED:
            return codec.decode_backward(frame, self.subspace, dtype)
        if frame.msg_type != codec.MSG_BACKWARD:
            raise ProtocolError(f"expected a backward frame, got msg_type {frame.msg_type}")
        if self.mode.kind == LOSSY:
            g = codec.decode_lossy(frame, self._codec((frame.b, frame.n, frame.k)))
        else:
            g = codec.decode_dense(frame)
        return g.astype(dtype, copy=False)

    # --- compute ---------------------------------------------------------

    def forward(self, mb, tokens=None, targets=None) -> ForwardResult:
        if self.first:
            x = embed(self.emb, tokens)
        else:
            frame = codec.deserialize(self.prev.recv())
            if frame.microbatch_id != mb:
                raise ProtocolError(f"stage {self.stage_id} expected microbatch {mb}, got {frame.microbatch_id}")
            x = self._decode_forward(frame)
            tokens = frame.token_ids
        stashes = []
        for layer in self.layers:
            x, st = forward_block(layer, x)
            stashes.append(st)
        entry = _Entry(tokens, stashes)
        self.entries[mb] = entry
        if self.last:
            logits = head_forward(self.head, x)
            loss, entry.dlogits = lm_loss(logits, targets)
            entry.final = x
            return ForwardResult(loss=loss)
        frame = self._encode_forward(x, tokens, mb)
        data = codec.serialize(frame)
        mse = 0.0
        if self.measure_boundary:
            recovered = self._decode_forward(codec.deserialize(data))
            mse = float(np.mean((recovered.astype(np.float64) - x) ** 2))
        self.next.send(data)
        return ForwardResult(nbytes=len(data), boundary_mse=mse)

    def backward(self, mb) -> int:
        entry = self.entries.pop(mb, None)
        if entry is None:
            raise ProtocolError(f"stage {self.stage_id} has no stash for microbatch {mb}")
        if self.last:
            d_head, g = head_backward(self.head, entry.final, entry.dlogits)
            self._add_grad("head", d_head)
        else:
            frame = codec.deserialize(self.next.recv())
            if frame.microbatch_id != mb:
                raise ProtocolError(f"stage {self.stage_id} expected microbatch {mb}, got {frame.microbatch_id}")
            g = self._decode_backward(frame, entry.stashes[-1].x.dtype)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            g, grads = backward_block(layer, entry.stashes[idx], g)
            for name, value in grads.items():
                self._add_grad(f"layers.{layer.layer_id}.{name}", value)
            if self.cfg.runs_grassmann and layer.layer_id == self.num_layers - 1:
                self.g_final.append(g.copy())
            if self.mode.constrained and idx > 0:
                g = project_rows(g, self.subspace)
        if self.first:
            for name, value in embed_backward(self.emb, entry.tokens, g).items():
                self._add_grad(f"emb.{name}", value)
            return 0
        data = codec.serialize(self._encode_backward(g, mb))
        self.prev.send(data)
        return len(data)

    def _add_grad(self, name, value):
        if name in self.grads:
            self.grads[name] = self.grads[name] + value
        else:
            self.grads[name] = value.copy()

    # --- step boundary ---------------------------------------------------

    def mean_grads(self, m) -> dict:
        scale = 1.0 / m
        return {name: g * g.dtype.type(scale) for name, g in self.grads.items()}

    def params(self):
        """(name, owner, attribute, constraint) for every trainable tensor."""
        out = []
        for layer in self.layers:
            for name in LayerParams.NAMES:
                out.append((f"layers.{layer.layer_id}.{name}", layer, name, layer.mode(name)))
        if self.first:
            out.append(("emb.t_s", self.emb, "t_s", ROW if self.emb.constrained else FREE))
            if self.emb.train_pos:
                out.append(("emb.pos", self.emb, "pos", FREE))
        if self.last:
            out.append(("head", self, "head", FREE))
        return out

    def apply_update(self, m, lr, scale=1.0) -> int:
        grads = self.mean_grads(m)
        applied = 0
        for name, owner, attr, constraint in self.params():
            g = grads.get(name)
            if g is None:
                continue
            if scale != 1.0:
                g = g * g.dtype.type(scale)
            setattr(owner, attr, self.optim.update(name, getattr(owner, attr), g, constraint, lr))
            applied += 1
        if self.mode.constrained:
            project_constrained(self.layers, self.emb if self.first else None, self.subspace)
        self.grads = {}
        return applied

    def finish_grassmann(self, m) -> float:
        """Fold this step's final-layer input gradient into the accumulator."""
        if not self.g_final:
            return float("nan")
        g = np.concatenate(self.g_final, axis=0)
        g = g * g.dtype.type(1.0 / m)
        self.g_final = []
        self.acc = accumulate(self.acc, g)
        self.last_grassmann_loss = grassmann_loss(g, self.subspace)
        return self.last_grassmann_loss

    def install_subspace(self, new: Subspace) -> None:
        """Swap to a new basis, carrying constrained weights and moments along."""
        old = self.subspace
        if new.version == old.version and np.array_equal(new.basis, old.basis):
            return
        if self.mode.constrained:
            for name, owner, attr, constraint in self.params():
                if constraint in (ROW, COL):
                    self.optim.rebase(name, constraint, old, new)
            rebase_constrained(self.layers, self.emb if self.first else None, new)
        self.subspace = new

    def reset_step(self) -> None:
        self.entries = {}
        self.grads = {}
        self.g_final = []
