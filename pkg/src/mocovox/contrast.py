"""Momentum contrast: key queue, EMA update, InfoNCE, training step, prototypical losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .errors import ConfigError, ContractError, ShapeError, StateError

UNIT_TOL = 1e-4
W_MIN = 1e-6


def _check_unit(name, x, tol=UNIT_TOL):
    norms = np.sqrt((x * x).sum(axis=-1))
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        i = int(np.flatnonzero(bad.ravel())[0])
        raise ContractError(f"{name} row {i} has norm {norms.ravel()[i]:.6g}, expected unit norm")


def _log_softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def infonce_loss(q, k_pos, negatives, tau):
    """Mean (N+1)-way softmax cross-entropy with the positive key at index 0.

    Keys are constants; only the gradient w.r.t. ``q`` is returned.
    Returns ``(loss, grad_q)``.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    q, k_pos, negatives = np.asarray(q), np.asarray(k_pos), np.asarray(negatives)
    if q.ndim != 2 or k_pos.shape != q.shape:
        raise ShapeError(f"q and k_pos must both be (B, d); got {q.shape} and {k_pos.shape}")
    if negatives.ndim != 2 or negatives.shape[0] < 1 or negatives.shape[1] != q.shape[1]:
        raise ShapeError(f"negatives must be (N>=1, {q.shape[1]}), got {negatives.shape}")
    for name, x in (("q", q), ("k_pos", k_pos), ("negatives", negatives)):
        _check_unit(name, x)

    B = q.shape[0]
    logits = np.empty((B, negatives.shape[0] + 1), dtype=np.result_type(q, negatives))
    logits[:, 0] = (q * k_pos).sum(axis=1)
    logits[:, 1:] = q @ negatives.T
    logits /= tau
    logp = _log_softmax(logits)
    loss = -logp[:, 0].mean()

    p = np.exp(logp)
    p[:, 0] -= 1.0
    grad_q = (p[:, :1] * k_pos + p[:, 1:] @ negatives) / (tau * B)
    return float(loss), grad_q


def momentum_update(theta_k, theta_q, m):
    """theta_k <- m * theta_k + (1 - m) * theta_q, returned as a new array."""
    theta_k, theta_q = np.asarray(theta_k), np.asarray(theta_q)
    if theta_k.shape != theta_q.shape:
        raise ShapeError(f"layout mismatch: theta_k {theta_k.shape} vs theta_q {theta_q.shape}")
    if not 0 <= m <= 1:
        raise ConfigError(f"momentum must lie in [0, 1], got {m}")
    return m * theta_k + (1 - m) * theta_q


class DictionaryQueue:
    """Fixed-capacity ring buffer of key embeddings; oldest batch is overwritten first."""

    def __init__(self, capacity: int, dim: int, batch_size: int | None = None, dtype=np.float64):
        if capacity < 1 or dim < 1:
            raise ConfigError(f"queue needs positive capacity and dim, got {capacity}x{dim}")
        if batch_size is not None and capacity % batch_size:
            raise ConfigError(f"queue size {capacity} is not a multiple of batch size {batch_size}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=dtype)
        self.ptr = 0
        self.filled = 0

    def enqueue(self, keys) -> None:
        keys = np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"keys must be (B, {self.dim}), got {keys.shape}")
        B = keys.shape[0]
        if B < 1 or self.capacity % B:
            raise ConfigError(f"batch of {B} keys does not divide queue capacity {self.capacity}")
        _check_unit("key", keys)
        self.buffer[self.ptr:self.ptr + B] = keys
        self.ptr = (self.ptr + B) % self.capacity
        self.filled = min(self.filled + B, self.capacity)

    def negatives_view(self) -> np.ndarray:
        if self.filled == 0:
            raise StateError("dictionary queue is empty; enqueue keys before drawing negatives")
        return self.buffer[:self.filled]

    def ordered(self) -> np.ndarray:
        """Valid rows from oldest to newest."""
        if self.filled < self.capacity:
            return self.buffer[:self.filled].copy()
        return np.concatenate([self.buffer[self.ptr:], self.buffer[:self.ptr]])


@dataclass
class StepMetrics:
    loss: float
    pos_logit_mean: float
    queue_filled: int


@dataclass
class MoCoState:
    theta_q: enc.EncoderParams
    theta_k: enc.EncoderParams
    queue: DictionaryQueue
    m: float = 0.999
    tau: float = 0.07
    # angular prototypical scale/bias, learnt alongside theta_q
    ap_w: float = 10.0
    ap_b: float = -5.0

    def __post_init__(self):
        if self.theta_q.cfg != self.theta_k.cfg:
            raise ConfigError("query and key encoders must share one EncoderConfig")
        if not 0 <= self.m <= 1:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.m}")
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")

    @classmethod
    def create(cls, theta_q, queue_size, batch_size, m=0.999, tau=0.07):
        queue = DictionaryQueue(queue_size, theta_q.cfg.embed_dim, batch_size, theta_q.theta.dtype)
        return cls(theta_q, theta_q.copy(), queue, m, tau)


def _ema_and_enqueue(state: MoCoState, k):
    state.theta_k.theta[...] = momentum_update(state.theta_k.theta, state.theta_q.theta, state.m)
    state.queue.enqueue(k)


def prime_queue(state: MoCoState, key_batch) -> None:
    """Encode one batch with the key encoder and enqueue it, without any update."""
    k, _ = enc.forward(state.theta_k, key_batch)
    state.queue.enqueue(k)


def moco_step(state: MoCoState, query_batch, key_batch, optimizer) -> StepMetrics:
    """One instance-discrimination step.

    Order: query forward (taped) -> key forward -> InfoNCE against the queue ->
    backprop and optimiser update of theta_q -> EMA of theta_k -> enqueue keys.
    ``optimizer`` is any callable ``optimizer(theta, grad)`` that updates theta in place.
    """
    q, tape = enc.forward(state.theta_q, query_batch, want_tape=True)
    k, _ = enc.forward(state.theta_k, key_batch)
    negatives = state.queue.negatives_view()
    loss, grad_q = infonce_loss(q, k, negatives, state.tau)
    pos_mean = float((q * k).sum(axis=1).mean() / state.tau)
    grad = enc.backward(tape, grad_q)
    optimizer(state.theta_q.theta, grad)
    _ema_and_enqueue(state, k)
    return StepMetrics(loss, pos_mean, state.queue.filled)


def prototypical_loss(queries, supports):
    """Prototypical loss with a single support per utterance.

    Logits are negative squared Euclidean distances; row i's target is support i.
    Returns ``(loss, grad_queries, grad_supports)``.
    """
    queries, supports = np.asarray(queries), np.asarray(supports)
    if queries.ndim != 2 or queries.shape != supports.shape:
        raise ShapeError(f"queries and supports must match as (B, d); got {queries.shape}, {supports.shape}")
    B = queries.shape[0]
    if B < 2:
        raise ConfigError("prototypical loss needs B >= 2 so that negatives exist")
    _check_unit("queries", queries)
    _check_unit("supports", supports)
    diff = queries[:, None, :] - supports[None, :, :]
    S = -(diff * diff).sum(axis=2)
    logp = _log_softmax(S)
    loss = -np.trace(logp) / B
    dS = np.exp(logp)
    dS[np.diag_indices(B)] -= 1.0
    dS /= B
    # dS_ij * dS_ij/dq_i where dS_ij/dq_i = -2 (q_i - s_j)
    grad_q = -2.0 * (dS.sum(axis=1)[:, None] * queries - dS @ supports)
    grad_s = 2.0 * (dS.T @ queries - dS.sum(axis=0)[:, None] * supports)
    return float(loss), grad_q, grad_s


@dataclass
class AngularGrads:
    queries: np.ndarray
    supports: np.ndarray
    w: float
    b: float


def angular_prototypical_loss(queries, supports, w, b):
    """Softmax over ``w * cos(q_i, s_j) + b`` with target i. Returns ``(loss, AngularGrads)``."""
    if not w >= W_MIN:
        raise ContractError(f"scale w={w} is below the clamp value {W_MIN}")
    queries, supports = np.asarray(queries), np.asarray(supports)
    if queries.ndim != 2 or queries.shape != supports.shape:
        raise ShapeError(f"queries and supports must match as (B, d); got {queries.shape}, {supports.shape}")
    B = queries.shape[0]
    if B < 2:
        raise ConfigError("angular prototypical loss needs B >= 2")
    qn = np.sqrt((queries * queries).sum(axis=1, keepdims=True))
    sn = np.sqrt((supports * supports).sum(axis=1, keepdims=True))
    qh, sh = queries / qn, supports / sn
    cos = qh @ sh.T
    logp = _log_softmax(w * cos + b)
    loss = -np.trace(logp) / B
    dS = np.exp(logp)
    dS[np.diag_indices(B)] -= 1.0
    dS /= B
    dcos = w * dS
    gq = (dcos @ sh - (dcos * cos).sum(axis=1)[:, None] * qh) / qn
    gs = (dcos.T @ qh - (dcos * cos).sum(axis=0)[:, None] * sh) / sn
    return float(loss), AngularGrads(gq, gs, float((dS * cos).sum()), float(dS.sum()))


def pretext_step(state: MoCoState, query_batch, key_batch, optimizer, pretext: str,
                 lr: float = 0.0) -> StepMetrics:
    """In-batch prototypical / angular-prototypical step on theta_q.

    Both segments go through the query encoder; the EMA update and key enqueue
    still run so that the queue and theta_k evolve exactly as in ``moco_step``.
    """
    xq = np.asarray(query_batch)
    xs = np.asarray(key_batch)
    B = xq.shape[0]
    z, tape = enc.forward(state.theta_q, np.concatenate([xq, xs]), want_tape=True)
    q, s = z[:B], z[B:]
    if pretext == "prototypical":
        loss, gq, gs = prototypical_loss(q, s)
        pos = float((-((q - s) ** 2).sum(axis=1)).mean())
    elif pretext == "angular_prototypical":
        loss, g = angular_prototypical_loss(q, s, state.ap_w, state.ap_b)
        gq, gs = g.queries, g.supports
        pos = float((state.ap_w * (q * s).sum(axis=1) + state.ap_b).mean())
        state.ap_w = max(W_MIN, state.ap_w - lr * g.w)
        state.ap_b = state.ap_b - lr * g.b
    else:
        raise ConfigError(f"unknown pretext task {pretext!r}")
    grad = enc.backward(tape, np.concatenate([gq, gs]))
    optimizer(state.theta_q.theta, grad)
    k, _ = enc.forward(state.theta_k, xs)
    _ema_and_enqueue(state, k)
    return StepMetrics(loss, pos, state.queue.filled)
