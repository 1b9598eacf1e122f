"""AdamW as used for subspace-constrained training.

The default update is taken literally::

    M_t = b1 M_{t-1} + (1 - b1) g          V_t = b2 V_{t-1} + (1 - b2) g^2
    M^  = M_t / (b1 + eps)                 V^  = V_t / (b2 + eps)
    W   <- W - lr * M^ / (sqrt(V^) + eps) - wd * W

so there is no step-dependent bias correction and the decay is not scaled by
the learning rate. ``row_constant`` mode replaces every row of ``V^`` with its
row mean, which turns the adaptive scale into one scalar per row and keeps a
row-constrained weight inside its subspace. ``conventional=True`` switches to
textbook AdamW for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import FREE, ROW
from .subspace import Subspace, project_columns, project_rows

STANDARD = "standard"
ROW_CONSTANT = "row_constant"


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    total_steps: int = 0  # 0 disables the linear decay
    min_lr_ratio: float = 0.1
    conventional: bool = False
    clip_norm: float = 0.0


def lr_at(cfg: AdamConfig, step: int) -> float:
    """Linear warmup, then linear decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.total_steps and cfg.total_steps > cfg.warmup_steps:
        frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
        frac = min(max(frac, 0.0), 1.0)
        return cfg.lr * (1.0 - (1.0 - cfg.min_lr_ratio) * frac)
    return cfg.lr


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    mode: str = STANDARD

    @classmethod
    def zeros_like(cls, w, mode=STANDARD) -> "OptimState":
        return cls(np.zeros_like(w), np.zeros_like(w), 0, mode)


def row_constant_second_moment(v_hat) -> np.ndarray:
    v_hat = np.asarray(v_hat)
    return np.broadcast_to(v_hat.mean(axis=-1, keepdims=True), v_hat.shape).copy()


def adamw_step(w, g, st: OptimState, cfg: AdamConfig, lr=None) -> np.ndarray:
    """Update moments in ``st`` and return the new weight."""
    w = np.asarray(w)
    g = np.asarray(g)
    if w.shape != g.shape or st.m.shape != w.shape:
        raise ShapeError(f"weight {w.shape}, grad {g.shape}, state {st.m.shape} disagree")
    lr = cfg.lr if lr is None else lr
    dt = w.dtype.type
    b1, b2, eps = dt(cfg.beta1), dt(cfg.beta2), dt(cfg.eps)
    st.t += 1
    st.m = b1 * st.m + (dt(1) - b1) * g
    st.v = b2 * st.v + (dt(1) - b2) * (g * g)
    if cfg.conventional:
        m_hat = st.m / dt(1.0 - cfg.beta1 ** st.t)
        v_hat = st.v / dt(1.0 - cfg.beta2 ** st.t)
    else:
        m_hat = st.m / (b1 + eps)
        v_hat = st.v / (b2 + eps)
    if st.mode == ROW_CONSTANT:
        v_hat = row_constant_second_moment(v_hat)
    step = dt(lr) * m_hat / (np.sqrt(v_hat) + eps)
    decay = dt(cfg.weight_decay) * w
    if cfg.conventional:
        decay = dt(lr) * decay
    return w - step - decay


def global_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_factor(norm, clip_norm) -> float:
    if clip_norm <= 0 or norm <= clip_norm:
        return 1.0
    return clip_norm / (norm + 1e-12)


@dataclass
class AdamW:
    """Per-tensor AdamW state keyed by parameter name."""

    cfg: AdamConfig = field(default_factory=AdamConfig)
    state: dict = field(default_factory=dict)

    def update(self, name, w, g, constraint=FREE, lr=None) -> np.ndarray:
        st = self.state.get(name)
        if st is None:
            mode = ROW_CONSTANT if name.endswith("wp2") and constraint == ROW else STANDARD
            st = self.state[name] = OptimState.zeros_like(w, mode)
        return adamw_step(w, g, st, self.cfg, lr)

    def rebase(self, name, constraint, old: Subspace, new: Subspace) -> None:
        """Carry a constrained tensor's first moment into a new subspace."""
        st = self.state.get(name)
        if st is None or constraint == FREE:
            return
        if constraint == ROW:
            st.m = project_rows(project_rows(st.m, old), new)
        else:
            st.m = project_columns(project_columns(st.m, old), new)


def project_constrained(layers, emb, s: Subspace) -> None:
    """Pull W_p1 rows, W_1 columns and T_S rows back into S (W_p2 untouched)."""
    for layer in layers:
        if layer.constrained:
            layer.wp1 = project_rows(layer.wp1, s)
            layer.w1 = project_columns(layer.w1, s)
    if emb is not None and emb.constrained:
        emb.t_s = project_rows(emb.t_s, s)


def rebase_constrained(layers, emb, s: Subspace) -> None:
    """Project every constrained tensor, W_p2 included, onto a new subspace."""
    for layer in layers:
        if layer.constrained:
            layer.wp2 = project_rows(layer.wp2, s)
    project_constrained(layers, emb, s)
