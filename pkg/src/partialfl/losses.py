"""Contrastive alignment losses and the combined training objectives.

Every function returns the loss together with gradients for its inputs so
the callers can route them into whichever model is being optimised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import ModelParams, ShapeError, softmax_cross_entropy

SERVER_ANCHORED = "L->S"
LOCAL_ANCHORED = "S->L"


class PairingError(ValueError):
    """Two embedding batches do not describe the same samples in the same order."""


class NoNegativesError(ValueError):
    """A contrastive batch has fewer than two samples."""


@dataclass(frozen=True)
class EmbeddingBatch:
    sample_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        vecs = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "vectors", vecs)
        if vecs.ndim != 2 or ids.shape != (vecs.shape[0],):
            raise ShapeError(f"ids {ids.shape} vs vectors {vecs.shape}")
        if np.unique(ids).size != ids.size:
            raise PairingError("sample ids must be unique within a batch")

    def __len__(self) -> int:
        return self.sample_ids.size

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def select(self, ids: np.ndarray) -> "EmbeddingBatch":
        """Rows for ``ids`` in the order given."""
        pos = self.__dict__.get("_rows")
        if pos is None:
            pos = {int(s): i for i, s in enumerate(self.sample_ids)}
            object.__setattr__(self, "_rows", pos)
        try:
            rows = [pos[int(s)] for s in ids]
        except KeyError as exc:
            raise PairingError(f"sample id {exc.args[0]} not present") from None
        return EmbeddingBatch(np.asarray(ids), self.vectors[rows])


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    beta: float = 0.01
    include_inter_modal_negatives: bool = False
    normalize: bool = False

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive and finite, got {self.temperature}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


def _check_pair(a: EmbeddingBatch, b: EmbeddingBatch) -> None:
    if len(a) < 2:
        raise NoNegativesError("contrastive loss needs at least 2 samples per batch")
    if a.sample_ids.shape != b.sample_ids.shape or not np.array_equal(a.sample_ids, b.sample_ids):
        raise PairingError("anchor and positive batches must share sample ids in the same order")
    if a.dim != b.dim:
        raise ShapeError(f"embedding dims differ: {a.dim} vs {b.dim}")


def _l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x / norms, norms


def _l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return (grad - unit * np.sum(grad * unit, axis=1, keepdims=True)) / norms


def _contrastive_core(
    a: np.ndarray, p: np.ndarray, tau: float, inter_modal: bool
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over i of -log softmax of the positive among {a_i.a_j (j!=i), a_i.p_i}.

    With ``inter_modal`` the denominator also holds a_i.p_j for j != i.
    """
    b = a.shape[0]
    eye = np.eye(b, dtype=bool)
    s_aa = (a @ a.T) / tau
    s_aa[eye] = -np.inf
    s_ap = (a @ p.T) / tau
    s_pos = np.diag(s_ap).copy()
    if inter_modal:
        s_cross = s_ap.copy()
        s_cross[eye] = -np.inf
        cols = np.concatenate([s_aa, s_pos[:, None], s_cross], axis=1)
    else:
        cols = np.concatenate([s_aa, s_pos[:, None]], axis=1)
    top = cols.max(axis=1, keepdims=True)
    w = np.exp(cols - top)
    denom = w.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - s_pos))
    w /= denom

    w_aa = w[:, :b]
    coef_pos = w[:, b] - 1.0
    grad_a = (w_aa @ a + w_aa.T @ a + coef_pos[:, None] * p) / tau
    grad_p = coef_pos[:, None] * a / tau
    if inter_modal:
        w_ap = w[:, b + 1:]
        grad_a += (w_ap @ p) / tau
        grad_p += (w_ap.T @ a) / tau
    return loss, grad_a / b, grad_p / b


def cross_modal_contrastive(
    anchors: EmbeddingBatch,
    positives: EmbeddingBatch,
    tau: float,
    *,
    inter_modal_negatives: bool = False,
    normalize: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-modal InfoNCE with intra-modal negatives of the anchor modality.

    Returns ``(loss, grad_anchors, grad_positives)``. Similarities are raw dot
    products divided by ``tau`` unless ``normalize`` is set.
    """
    _check_pair(anchors, positives)
    if not tau > 0:
        raise ValueError("tau must be positive")
    a, p = anchors.vectors, positives.vectors
    if normalize:
        a_unit, a_norm = _l2_normalize(a)
        p_unit, p_norm = _l2_normalize(p)
        loss, ga, gp = _contrastive_core(a_unit, p_unit, tau, inter_modal_negatives)
        return loss, _l2_normalize_backward(a_unit, a_norm, ga), _l2_normalize_backward(p_unit, p_norm, gp)
    return _contrastive_core(a, p, tau, inter_modal_negatives)


def embedding_alignment(
    server_emb: EmbeddingBatch,
    local_emb: EmbeddingBatch,
    tau: float,
    direction: str,
    *,
    inter_modal_negatives: bool = False,
    normalize: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive alignment between server and on-device text embeddings.

    ``"L->S"`` anchors the server embeddings (negatives are other server
    embeddings); ``"S->L"`` anchors the local ones. Returns
    ``(loss, grad_server, grad_local)`` regardless of direction.
    """
    kw = dict(inter_modal_negatives=inter_modal_negatives, normalize=normalize)
    if direction == SERVER_ANCHORED:
        loss, g_server, g_local = cross_modal_contrastive(server_emb, local_emb, tau, **kw)
    elif direction == LOCAL_ANCHORED:
        loss, g_local, g_server = cross_modal_contrastive(local_emb, server_emb, tau, **kw)
    else:
        raise ValueError(f"direction must be {SERVER_ANCHORED!r} or {LOCAL_ANCHORED!r}")
    return loss, g_server, g_local


def global_objective(
    logits: np.ndarray,
    labels: np.ndarray,
    modal_emb: EmbeddingBatch,
    server_text_emb: EmbeddingBatch,
    cfg: ContrastiveConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """CE + beta * cross-modal contrastive, anchored on the global model's embedding.

    Returns ``(loss, grad_logits, grad_modal_emb)``. The server embeddings are
    treated as constants.
    """
    ce, g_logits = softmax_cross_entropy(logits, labels)
    if cfg.beta == 0.0:
        return ce, g_logits, np.zeros_like(modal_emb.vectors)
    con, g_emb, _ = cross_modal_contrastive(
        modal_emb,
        server_text_emb,
        cfg.temperature,
        inter_modal_negatives=cfg.include_inter_modal_negatives,
        normalize=cfg.normalize,
    )
    return ce + cfg.beta * con, g_logits, cfg.beta * g_emb


def local_objective(
    logits: np.ndarray,
    labels: np.ndarray,
    local_text_emb: EmbeddingBatch,
    server_text_emb: EmbeddingBatch,
    cfg: ContrastiveConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """CE + beta * alignment anchored on the local text embeddings.

    Returns ``(loss, grad_logits, grad_local_emb)``.
    """
    ce, g_logits = softmax_cross_entropy(logits, labels)
    if cfg.beta == 0.0:
        return ce, g_logits, np.zeros_like(local_text_emb.vectors)
    con, _, g_local = embedding_alignment(
        server_text_emb,
        local_text_emb,
        cfg.temperature,
        LOCAL_ANCHORED,
        inter_modal_negatives=cfg.include_inter_modal_negatives,
        normalize=cfg.normalize,
    )
    return ce + cfg.beta * con, g_logits, cfg.beta * g_local


def fedprox_term(params: ModelParams, global_params: ModelParams, mu: float) -> tuple[float, np.ndarray]:
    """(mu / 2) * ||params - global_params||^2 and its gradient."""
    if len(params) != len(global_params):
        raise ShapeError(f"length mismatch: {len(params)} vs {len(global_params)}")
    diff = params.values - global_params.values
    return 0.5 * mu * float(diff @ diff), mu * diff
