"""The three learners of the protocol, built from :mod:`partialfl.nn_core` networks.

* :class:`ServerModel` encodes uploaded text representations on the server.
* :class:`GlobalModel` is the federated model over the protected modality
  (optionally fused with text).
* :class:`LocalModel` is the per-device text encoder plus classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import EmbeddingBatch
from .nn_core import ModelParams, Network, ShapeError, StateError

UNI_MODAL = "uni_modal"
MULTI_MODAL = "multi_modal"


class ModalityError(ValueError):
    """A model was asked to run without a modality it needs."""


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 32
    embedding_dim: int = 16
    server_hidden: int = 64
    edge_hidden: int = 32
    classifier_hidden: int = 16


class FrozenExtractor:
    """Fixed random affine map followed by tanh; stands in for a pretrained encoder."""

    def __init__(self, in_dim: int, out_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
        b = rng.normal(0.0, 0.1, size=out_dim)
        w.setflags(write=False)
        b.setflags(write=False)
        self._w, self._b = w, b

    @property
    def in_dim(self) -> int:
        return self._w.shape[0]

    @property
    def out_dim(self) -> int:
        return self._w.shape[1]

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.in_dim:
            raise ShapeError(f"extractor expects [B, {self.in_dim}], got {list(raw.shape)}")
        return np.tanh(raw @ self._w + self._b)


def _classifier(dims: ModelDims, num_classes: int, rng: np.random.Generator) -> Network:
    return Network.mlp(
        [dims.embedding_dim, dims.classifier_hidden, num_classes], rng, role="classifier"
    )


class ServerModel:
    def __init__(self, encoder: Network):
        self.encoder = encoder

    @classmethod
    def build(cls, dims: ModelDims, rng: np.random.Generator) -> "ServerModel":
        return cls(Network.mlp([dims.feature_dim, dims.server_hidden, dims.embedding_dim], rng))

    @property
    def embedding_dim(self) -> int:
        return self.encoder.out_dim

    def get_params(self) -> ModelParams:
        return self.encoder.get_params()

    def set_params(self, params: ModelParams) -> None:
        self.encoder.set_params(params)

    def copy(self) -> "ServerModel":
        return ServerModel(self.encoder.copy())


def server_encode(model: ServerModel, features: np.ndarray, ids: np.ndarray) -> EmbeddingBatch:
    return EmbeddingBatch(np.asarray(ids), model.encoder.forward(features))


class GlobalModel:
    """Encoder over the protected modality, optional fusion projection, classifier.

    Parameter order in :meth:`get_params` is encoder, fusion (multi-modal
    only), classifier.
    """

    def __init__(
        self,
        encoder: Network,
        classifier: Network,
        fusion: Network | None = None,
        modality_mode: str = UNI_MODAL,
        shareable_dim: int | None = None,
    ):
        if modality_mode not in (UNI_MODAL, MULTI_MODAL):
            raise ValueError(f"unknown modality mode {modality_mode!r}")
        if modality_mode == MULTI_MODAL:
            if fusion is None or shareable_dim is None:
                raise ValueError("multi-modal global model needs a fusion projection")
            if fusion.in_dim != encoder.out_dim + shareable_dim:
                raise ShapeError("fusion input must be encoder output + shareable features")
            emb_dim = fusion.out_dim
        else:
            emb_dim = encoder.out_dim
        if classifier.in_dim != emb_dim:
            raise ShapeError(f"classifier expects {classifier.in_dim}, embedding is {emb_dim}")
        self.encoder = encoder
        self.fusion = fusion if modality_mode == MULTI_MODAL else None
        self.classifier = classifier
        self.modality_mode = modality_mode
        self.shareable_dim = shareable_dim
        self._cache: tuple | None = None

    @classmethod
    def build(
        cls, dims: ModelDims, num_classes: int, rng: np.random.Generator, modality_mode: str = UNI_MODAL
    ) -> "GlobalModel":
        encoder = Network.mlp([dims.feature_dim, dims.edge_hidden, dims.embedding_dim], rng)
        fusion = None
        if modality_mode == MULTI_MODAL:
            fusion = Network.mlp(
                [dims.embedding_dim + dims.feature_dim, dims.embedding_dim], rng, role="projection"
            )
        classifier = _classifier(dims, num_classes, rng)
        return cls(encoder, classifier, fusion, modality_mode, dims.feature_dim)

    @property
    def networks(self) -> list[Network]:
        return [n for n in (self.encoder, self.fusion, self.classifier) if n is not None]

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    def get_params(self) -> ModelParams:
        return ModelParams.concat([n.get_params() for n in self.networks])

    def set_params(self, params: ModelParams) -> None:
        start = 0
        for net in self.networks:
            n = net.num_params
            net.set_params(ModelParams(params.values[start:start + n], net.layout))
            start += n
        if start != len(params):
            raise ShapeError("parameter vector length does not match the global model")

    def copy(self) -> "GlobalModel":
        return GlobalModel(
            self.encoder.copy(),
            self.classifier.copy(),
            self.fusion.copy() if self.fusion is not None else None,
            self.modality_mode,
            self.shareable_dim,
        )

    def forward(
        self, non_shareable: np.ndarray, shareable: np.ndarray | None = None, impute_missing: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        h = self.encoder.forward(non_shareable)
        fused_in = None
        if self.modality_mode == MULTI_MODAL:
            if shareable is None:
                if not impute_missing:
                    raise ModalityError("multi-modal global model needs shareable features")
                shareable = np.zeros((h.shape[0], self.shareable_dim))
            fused_in = np.concatenate([h, np.asarray(shareable, dtype=np.float64)], axis=1)
            emb = self.fusion.forward(fused_in)
        else:
            emb = h
        logits = self.classifier.forward(emb)
        self._cache = (np.asarray(non_shareable, dtype=np.float64), fused_in, emb)
        return emb, logits

    def backward(self, grad_emb: np.ndarray, grad_logits: np.ndarray) -> ModelParams:
        """Parameter gradient given upstream grads on the embedding and the logits."""
        if self._cache is None:
            raise StateError("backward called before forward")
        x, fused_in, emb = self._cache
        g_cls, g_emb = self.classifier.backward(emb, grad_logits)
        g_emb = g_emb + grad_emb
        parts = []
        if self.fusion is not None:
            g_fus, g_fused_in = self.fusion.backward(fused_in, g_emb)
            g_emb = g_fused_in[:, : self.encoder.out_dim]
            parts.append(g_fus)
        g_enc, _ = self.encoder.backward(x, g_emb)
        return ModelParams.concat([g_enc, *parts, g_cls])


def global_forward(
    model: GlobalModel,
    non_shareable: np.ndarray,
    shareable: np.ndarray | None,
    ids: np.ndarray,
    impute_missing: bool = False,
) -> tuple[EmbeddingBatch, np.ndarray]:
    emb, logits = model.forward(non_shareable, shareable, impute_missing)
    return EmbeddingBatch(np.asarray(ids), emb), logits


class LocalModel:
    """Text encoder and classifier owned by one device; parameters stay on it."""

    def __init__(self, encoder: Network, classifier: Network):
        if classifier.in_dim != encoder.out_dim:
            raise ShapeError("classifier input must equal encoder output")
        self.encoder = encoder
        self.classifier = classifier
        self._cache: tuple | None = None

    @classmethod
    def build(cls, dims: ModelDims, num_classes: int, rng: np.random.Generator) -> "LocalModel":
        encoder = Network.mlp([dims.feature_dim, dims.edge_hidden, dims.embedding_dim], rng)
        return cls(encoder, _classifier(dims, num_classes, rng))

    def get_params(self) -> ModelParams:
        return ModelParams.concat([self.encoder.get_params(), self.classifier.get_params()])

    def set_params(self, params: ModelParams) -> None:
        n = self.encoder.num_params
        self.encoder.set_params(ModelParams(params.values[:n], self.encoder.layout))
        self.classifier.set_params(ModelParams(params.values[n:], self.classifier.layout))

    def encode(self, shareable: np.ndarray) -> np.ndarray:
        return self.encoder.forward(shareable)

    def forward(self, shareable: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        emb = self.encoder.forward(shareable)
        logits = self.classifier.forward(emb)
        self._cache = (np.asarray(shareable, dtype=np.float64), emb)
        return emb, logits

    def backward(self, grad_emb: np.ndarray, grad_logits: np.ndarray) -> ModelParams:
        if self._cache is None:
            raise StateError("backward called before forward")
        x, emb = self._cache
        g_cls, g_emb = self.classifier.backward(emb, grad_logits)
        g_enc, _ = self.encoder.backward(x, g_emb + grad_emb)
        return ModelParams.concat([g_enc, g_cls])


def local_forward(model: LocalModel, shareable: np.ndarray, ids: np.ndarray) -> tuple[EmbeddingBatch, np.ndarray]:
    emb, logits = model.forward(shareable)
    return EmbeddingBatch(np.asarray(ids), emb), logits
