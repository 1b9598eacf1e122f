"""Decoder-only transformer with a hand-written backward pass.

Layer ``l`` maps ``X^l -> X^{l+1}``::

    X_attn   = concat_h(softmax(mask(Q_h K_h^T / sqrt(d_H))) V_h) W_p1 + X
    X_hidden = relu(X_attn W_1)
    X^{l+1}  = X_hidden W_p2 + X_attn

There are no layer norms. In a constrained model every layer but the last
keeps Row(W_p1), Row(W_p2) and Col(W_1) inside the shared subspace, and the
token table is split into a frozen ``T_fixed`` and a trainable ``T_S`` whose
rows live in the subspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidTokenError, NumericFaultError, ProtocolError, ShapeError
from .linalg import DEFAULT_DTYPE, relu, softmax_rows
from .subspace import Subspace, project_columns, project_rows, random_subspace

INIT_STD = 0.02
EMBED_STD = 1.0

ROW = "row"
COL = "col"
FREE = "free"


@dataclass(frozen=True)
class ModelDims:
    d: int = 64
    d_ff: int = 256
    heads: int = 4
    layers: int = 4
    vocab: int = 256
    n_max: int = 32
    k: int = 8

    def validate(self) -> None:
        for name in ("d", "d_ff", "heads", "layers", "vocab", "n_max", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d_ff % self.d:
            raise ConfigError(f"d_ff={self.d_ff} must be a multiple of d={self.d}")
        if self.k >= self.d:
            raise ConfigError(f"k={self.k} must be smaller than d={self.d}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


@dataclass
class LayerParams:
    layer_id: int
    wq: np.ndarray  # (H, d, d_H)
    wk: np.ndarray
    wv: np.ndarray
    wp1: np.ndarray  # (d, d)
    w1: np.ndarray  # (d, d_ff)
    wp2: np.ndarray  # (d_ff, d)
    constrained: bool = False

    NAMES = ("wq", "wk", "wv", "wp1", "w1", "wp2")

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in self.NAMES}

    def mode(self, name) -> str:
        if not self.constrained:
            return FREE
        return {"wp1": ROW, "wp2": ROW, "w1": COL}.get(name, FREE)

    def copy(self) -> "LayerParams":
        return LayerParams(self.layer_id, *(getattr(self, n).copy() for n in self.NAMES),
                           constrained=self.constrained)


@dataclass
class EmbeddingTables:
    pos: np.ndarray  # (n_max, d)
    t_fixed: np.ndarray  # (v, d), never updated
    t_s: np.ndarray  # (v, d), rows in S when constrained
    constrained: bool = False
    train_pos: bool = False

    def lookup_fixed(self, tokens, positions) -> np.ndarray:
        """PE + T_fixed[t]: the part of X^0 every stage can rebuild locally."""
        return self.pos[positions] + self.t_fixed[tokens]

    def copy(self) -> "EmbeddingTables":
        return EmbeddingTables(self.pos.copy(), self.t_fixed.copy(), self.t_s.copy(),
                               self.constrained, self.train_pos)


@dataclass
class ModelParams:
    dims: ModelDims
    layers: list
    emb: EmbeddingTables
    head: np.ndarray  # (d, v)
    constrained: bool = False

    @property
    def dtype(self):
        return self.head.dtype

    def named_tensors(self) -> dict:
        out = {}
        for layer in self.layers:
            for name, t in layer.tensors().items():
                out[f"layers.{layer.layer_id}.{name}"] = t
        out["emb.pos"] = self.emb.pos
        out["emb.t_fixed"] = self.emb.t_fixed
        out["emb.t_s"] = self.emb.t_s
        out["head"] = self.head
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, [l.copy() for l in self.layers], self.emb.copy(),
                           self.head.copy(), self.constrained)


@dataclass
class LayerStash:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    concat: np.ndarray
    x_attn: np.ndarray
    pre_relu: np.ndarray
    x_hidden: np.ndarray


def init_model(seed, dims: ModelDims, constrained=True, dtype=DEFAULT_DTYPE, subspace=None):
    """Build parameters and the shared subspace from one seed.

    Returns ``(params, subspace)``. In a constrained model ``W_p1``/``W_p2``
    are row-projected, ``W_1`` column-projected and ``T_S = T_fixed U U^T``
    for every layer except the last.
    """
    dims.validate()
    rng = np.random.default_rng(seed)
    s = subspace if subspace is not None else random_subspace(dims.d, dims.k, rng, dtype)
    s = s.astype(dtype)
    d, dff, h, dh = dims.d, dims.d_ff, dims.heads, dims.d_head

    def gauss(*shape, std=INIT_STD):
        return (rng.standard_normal(shape) * std).astype(dtype)

    pos = gauss(dims.n_max, d, std=EMBED_STD)
    t_fixed = gauss(dims.vocab, d, std=EMBED_STD)
    t_s = project_rows(t_fixed, s)
    layers = []
    for l in range(dims.layers):
        layer = LayerParams(l, gauss(h, d, dh), gauss(h, d, dh), gauss(h, d, dh),
                            gauss(d, d), gauss(d, dff), gauss(dff, d),
                            constrained=constrained and l < dims.layers - 1)
        if layer.constrained:
            layer.wp1 = project_rows(layer.wp1, s)
            layer.wp2 = project_rows(layer.wp2, s)
            layer.w1 = project_columns(layer.w1, s)
        layers.append(layer)
    head = gauss(d, dims.vocab)
    emb = EmbeddingTables(pos, t_fixed, t_s, constrained=constrained)
    return ModelParams(dims, layers, emb, head, constrained), s


def causal_mask(n) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def forward_block(layer: LayerParams, x):
    """Run one block; returns ``(output, stash)``."""
    x = np.asarray(x)
    b, n, d = x.shape
    if d != layer.wp1.shape[0]:
        raise ShapeError(f"layer {layer.layer_id} expects d={layer.wp1.shape[0]}, got {d}")
    h, _, dh = layer.wq.shape
    xe = x[:, None]  # (b, 1, n, d)
    q = xe @ layer.wq  # (b, H, n, d_H)
    k = xe @ layer.wk
    v = xe @ layer.wv
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh).astype(x.dtype)
    scores = np.where(causal_mask(n), -np.inf, scores).astype(x.dtype)
    probs = softmax_rows(scores)
    heads = probs @ v
    concat = heads.transpose(0, 2, 1, 3).reshape(b, n, d)
    x_attn = concat @ layer.wp1 + x
    pre_relu = x_attn @ layer.w1
    x_hidden = relu(pre_relu)
    out = x_hidden @ layer.wp2 + x_attn
    if not np.all(np.isfinite(out)):
        raise NumericFaultError(layer.layer_id)
    return out, LayerStash(x, q, k, v, probs, concat, x_attn, pre_relu, x_hidden)


def _sum_batch(a, b):
    """sum over leading axes of a^T b, flattened to 2-D."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def backward_block(layer: LayerParams, stash: LayerStash, g):
    """Gradients of one block given dL/dX^{l+1}; returns ``(dL/dX^l, grads)``."""
    if stash is None:
        raise ProtocolError(f"no stash for layer {layer.layer_id}")
    g = np.asarray(g)
    if g.shape != stash.x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match activation {stash.x.shape}")
    b, n, d = g.shape
    h, _, dh = layer.wq.shape

    d_wp2 = _sum_batch(stash.x_hidden, g)
    d_hidden = g @ layer.wp2.T
    d_pre = d_hidden * (stash.pre_relu > 0)
    d_w1 = _sum_batch(stash.x_attn, d_pre)
    d_attn = d_pre @ layer.w1.T + g
    d_wp1 = _sum_batch(stash.concat, d_attn)
    d_concat = d_attn @ layer.wp1.T

    d_heads = d_concat.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    d_probs = d_heads @ stash.v.transpose(0, 1, 3, 2)
    d_v = stash.probs.transpose(0, 1, 3, 2) @ d_heads
    d_scores = stash.probs * (d_probs - np.sum(d_probs * stash.probs, axis=-1, keepdims=True))
    d_scores = d_scores / np.sqrt(dh).astype(g.dtype)
    d_q = d_scores @ stash.k
    d_k = d_scores.transpose(0, 1, 3, 2) @ stash.q

    x_t = stash.x.reshape(b * n, d).T
    d_wq = np.stack([x_t @ d_q[:, i].reshape(b * n, dh) for i in range(h)])
    d_wk = np.stack([x_t @ d_k[:, i].reshape(b * n, dh) for i in range(h)])
    d_wv = np.stack([x_t @ d_v[:, i].reshape(b * n, dh) for i in range(h)])
    d_x = d_attn.copy()
    for i in range(h):
        d_x += d_q[:, i] @ layer.wq[i].T + d_k[:, i] @ layer.wk[i].T + d_v[:, i] @ layer.wv[i].T
    grads = {"wq": d_wq, "wk": d_wk, "wv": d_wv, "wp1": d_wp1, "w1": d_w1, "wp2": d_wp2}
    return d_x, grads


def grad_flow_invariance(layer: LayerParams, g, s: Subspace) -> float:
    """||g W_p2^T - (g U U^T) W_p2^T||_F: zero when Row(W_p2) lies in S."""
    g = np.asarray(g)
    direct = g @ layer.wp2.T
    projected = project_rows(g, s) @ layer.wp2.T
    return float(np.linalg.norm((direct - projected).astype(np.float64)))


def check_tokens(tokens, vocab) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InvalidTokenError(f"token id outside [0, {vocab})")
    return tokens


def default_positions(n) -> np.ndarray:
    return np.arange(n)


def embed(emb: EmbeddingTables, tokens, positions=None) -> np.ndarray:
    tokens = check_tokens(tokens, emb.t_fixed.shape[0])
    if positions is None:
        positions = default_positions(tokens.shape[-1])
    return emb.pos[positions] + emb.t_fixed[tokens] + emb.t_s[tokens]


def embed_backward(emb: EmbeddingTables, tokens, g, positions=None) -> dict:
    d = g.shape[-1]
    d_ts = np.zeros_like(emb.t_s)
    np.add.at(d_ts, np.asarray(tokens).reshape(-1), g.reshape(-1, d))
    grads = {"t_s": d_ts}
    if emb.train_pos:
        if positions is None:
            positions = default_positions(g.shape[1])
        d_pos = np.zeros_like(emb.pos)
        np.add.at(d_pos, np.broadcast_to(positions, g.shape[:2]).reshape(-1), g.reshape(-1, d))
        grads["pos"] = d_pos
    return grads


def head_forward(head, x) -> np.ndarray:
    return x @ head


def head_backward(head, x, dlogits):
    return _sum_batch(x, dlogits), dlogits @ head.T


def lm_loss(logits, targets):
    """Mean next-token cross-entropy and its gradient w.r.t. the logits.

    ``targets[b, i]`` is the token following input position ``i``.
    """
    logits = np.asarray(logits)
    b, n, v = logits.shape
    targets = check_tokens(targets, v)
    if targets.shape != (b, n):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    probs = softmax_rows(logits.astype(np.float64))
    picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs
    np.put_along_axis(dlogits, targets[..., None], picked[..., None] - 1.0, axis=-1)
    dlogits /= b * n
    return loss, dlogits.astype(logits.dtype)

