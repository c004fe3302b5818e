"""Round-based simulation of PartialFL and its FedAvg / FedProx / centralized baselines.

A round samples clients, sends them the global parameters together with
their slice of server text embeddings, trains every participant (global
model first, then the on-device text model, per mini-batch), lets the
server align its text encoder to the uploaded on-device embeddings,
re-encodes the stored text representations for all clients and finally
averages the returned global parameters.

Everything random is drawn from keyed generators so results do not depend
on client execution order or thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .data import ClientShard, Dataset
from .losses import (
    SERVER_ANCHORED,
    ContrastiveConfig,
    EmbeddingBatch,
    PairingError,
    embedding_alignment,
    fedprox_term,
    global_objective,
    local_objective,
)
from .metrics import evaluate_logits
from .models import MULTI_MODAL, UNI_MODAL, FrozenExtractor, GlobalModel, LocalModel, ModelDims, ServerModel
from .nn_core import AdamState, ModelParams, adam_step, softmax_cross_entropy

logger = logging.getLogger(__name__)

ALGORITHMS = ("partialfl", "fedavg", "fedprox", "centralized")
AGGREGATIONS = ("uniform", "size_weighted")
STREAMS = ("data", "partition", "sampling", "init", "batching")

Hook = Callable[..., None]


class ProtocolError(RuntimeError):
    """The round protocol was driven into an invalid state."""


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    sample_rate: float = 0.5
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    tau: float = 0.1
    beta: float = 0.01
    mu: float = 0.01
    aggregation: str = "uniform"
    algorithm: str = "partialfl"
    global_modality_mode: str = UNI_MODAL
    inter_modal_negatives: bool = False
    normalize_embeddings: bool = False
    eval_interval: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.rounds < 0 or self.local_epochs < 1:
            raise ValueError("rounds must be >= 0 and local_epochs >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm == "partialfl" and self.beta > 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 while a contrastive loss is active")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.global_modality_mode not in (UNI_MODAL, MULTI_MODAL):
            raise ValueError(f"global_modality_mode must be {UNI_MODAL!r} or {MULTI_MODAL!r}")
        if self.eval_interval < 1 or self.workers < 1:
            raise ValueError("eval_interval and workers must be >= 1")
        ContrastiveConfig(self.tau, self.beta)

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.beta, self.inter_modal_negatives, self.normalize_embeddings)

    @property
    def uses_proximal(self) -> bool:
        return self.algorithm == "fedprox" or (self.algorithm == "partialfl" and self.mu > 0)

    @property
    def participants_per_round(self) -> int:
        return max(1, int(np.floor(self.sample_rate * self.num_clients + 1e-9)))


class SeedStreams:
    """Five independent generators derived from one master seed.

    ``rng(name, *key)`` returns a fresh generator for a stream and an
    arbitrary integer key, e.g. ``rng("batching", round, client)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self._roots = {name: int(c.generate_state(1, np.uint64)[0]) for name, c in zip(STREAMS, children)}

    def rng(self, name: str, *key: int) -> np.random.Generator:
        return np.random.default_rng([self._roots[name], *[int(k) for k in key]])


# Message types. Every field of a client->server message is listed in
# ``to_payload``; nothing else leaves the device.


@dataclass(frozen=True)
class ShareableUpload:
    """One-off upload of frozen text representations (before round 0)."""

    client_id: int
    sample_ids: np.ndarray
    features: np.ndarray

    def to_payload(self) -> dict[str, Any]:
        return {
            "client_id": int(self.client_id),
            "sample_ids": self.sample_ids.tolist(),
            "features": self.features.tolist(),
        }


@dataclass(frozen=True)
class ClientUpdate:
    """What a participant returns at the end of local training."""

    client_id: int
    num_samples: int
    global_params: ModelParams
    local_embeddings: EmbeddingBatch | None

    def to_payload(self) -> dict[str, Any]:
        emb = None
        if self.local_embeddings is not None:
            emb = {
                "sample_ids": self.local_embeddings.sample_ids.tolist(),
                "vectors": self.local_embeddings.vectors.tolist(),
            }
        return {
            "client_id": int(self.client_id),
            "num_samples": int(self.num_samples),
            "global_params": self.global_params.values.tolist(),
            "local_embeddings": emb,
        }


@dataclass(frozen=True)
class Broadcast:
    """Server -> client: current global parameters and that client's text embeddings."""

    global_params: ModelParams
    server_embeddings: EmbeddingBatch | None


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    audio_features: np.ndarray
    text_features: np.ndarray | None
    local_model: LocalModel | None = None
    local_adam: AdamState | None = None
    server_embeddings: EmbeddingBatch | None = None

    @property
    def has_shareable(self) -> bool:
        return self.text_features is not None


@dataclass
class ClientResult:
    update: ClientUpdate
    loss_glob: float | None
    loss_loc: float | None
    skipped: bool = False


@dataclass
class RoundReport:
    round: int
    participants: list[int] | None
    loss_glob: float | None
    loss_loc: float | None
    loss_server: float | None
    metrics: dict[str, float] | None = None
    skipped_clients: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"round": self.round}
        if self.participants is not None:
            out["participants"] = list(self.participants)
            out["skipped_clients"] = list(self.skipped_clients)
        out.update(
            loss_glob=self.loss_glob, loss_loc=self.loss_loc, loss_server=self.loss_server, metrics=self.metrics
        )
        return out


def minibatches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks of ``order``; a trailing single sample joins the previous chunk."""
    chunks = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def sample_clients(num_clients: int, sample_rate: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, ascending ids."""
    m = FederationConfig(num_clients=num_clients, sample_rate=sample_rate).participants_per_round
    return sorted(rng.choice(num_clients, size=m, replace=False).tolist())


def aggregate(param_list: Sequence[ModelParams], sizes: Sequence[int] | None = None, mode: str = "uniform") -> ModelParams:
    """Mean of client parameters, uniform or weighted by local dataset size.

    Accumulated as first + weighted deviations so identical inputs come back
    bit-for-bit.
    """
    if not param_list:
        raise ProtocolError("cannot aggregate an empty update list")
    n = len(param_list[0])
    if any(len(p) != n for p in param_list):
        raise ProtocolError("parameter vectors differ in length")
    if mode == "uniform":
        weights = np.full(len(param_list), 1.0 / len(param_list))
    elif mode == "size_weighted":
        if sizes is None or len(sizes) != len(param_list):
            raise ProtocolError("size_weighted aggregation needs one size per update")
        s = np.asarray(sizes, dtype=np.float64)
        if s.sum() <= 0:
            raise ProtocolError("total client size must be positive")
        weights = s / s.sum()
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    base = param_list[0].values
    acc = np.zeros(n)
    for w, p in zip(weights, param_list):
        acc += w * (p.values - base)
    out = base.copy()
    moved = acc != 0.0  # adding +0.0 would turn -0.0 into +0.0
    out[moved] += acc[moved]
    return param_list[0].with_values(out)


def _mean_or_none(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def client_train(
    global_params: ModelParams,
    template: GlobalModel,
    client: ClientState,
    server_embeddings: EmbeddingBatch | None,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> ClientResult:
    """Local epochs of alternating updates: global model on L_glob, then local model on L_loc.

    Mutates the client's local model and optimiser state; the global
    parameters are trained on a private copy and returned in the update.
    """
    shard = client.shard
    if shard.size == 0:
        logger.warning("client %d has an empty shard; skipping", client.client_id)
        return ClientResult(ClientUpdate(client.client_id, 0, global_params, None), None, None, skipped=True)

    partial = cfg.algorithm == "partialfl"
    ccfg = cfg.contrastive
    model = template.copy()
    model.set_params(global_params)
    params = model.get_params()
    adam = AdamState(len(params), lr=cfg.lr)
    local = client.local_model if partial else None
    glob_losses, loc_losses = [], []

    for _ in range(cfg.local_epochs):
        for idx in minibatches(rng.permutation(shard.size), cfg.batch_size):
            ids = shard.ids[idx]
            labels = shard.labels[idx]
            x_audio = client.audio_features[idx]
            x_text = client.text_features[idx] if client.has_shareable else None
            align = partial and ccfg.beta > 0 and server_embeddings is not None and idx.size >= 2
            z_t = server_embeddings.select(ids) if align else None

            emb, logits = model.forward(x_audio, x_text, impute_missing=True)
            if align:
                loss, g_logits, g_emb = global_objective(logits, labels, EmbeddingBatch(ids, emb), z_t, ccfg)
            else:
                loss, g_logits = softmax_cross_entropy(logits, labels)
                g_emb = np.zeros_like(emb)
            grads = model.backward(g_emb, g_logits)
            if cfg.uses_proximal:
                p_loss, p_grad = fedprox_term(params, global_params, cfg.mu)
                loss += p_loss
                grads = grads.with_values(grads.values + p_grad)
            params = adam_step(adam, params, grads)
            model.set_params(params)
            glob_losses.append(loss)

            if local is not None and x_text is not None:
                l_emb, l_logits = local.forward(x_text)
                if align:
                    l_loss, gl_logits, gl_emb = local_objective(
                        l_logits, labels, EmbeddingBatch(ids, l_emb), z_t, ccfg
                    )
                else:
                    l_loss, gl_logits = softmax_cross_entropy(l_logits, labels)
                    gl_emb = np.zeros_like(l_emb)
                l_grads = local.backward(gl_emb, gl_logits)
                local.set_params(adam_step(client.local_adam, local.get_params(), l_grads))
                loc_losses.append(l_loss)

    local_emb = None
    if local is not None and client.has_shareable:
        local_emb = EmbeddingBatch(shard.ids, local.encode(client.text_features))
    update = ClientUpdate(client.client_id, shard.size, params, local_emb)
    return ClientResult(update, _mean_or_none(glob_losses), _mean_or_none(loc_losses))


def server_train(
    server: ServerModel,
    adam: AdamState,
    updates: Sequence[ClientUpdate],
    store: dict[int, ShareableUpload],
    cfg: FederationConfig,
    rng_for: Callable[[int], np.random.Generator],
) -> float | None:
    """Align the server text encoder to each participant's uploaded embeddings.

    Participants are visited in ascending client id; one pass over each
    client's stored representations. Returns the mean batch loss.
    """
    losses = []
    ccfg = cfg.contrastive
    for upd in sorted(updates, key=lambda u: u.client_id):
        if upd.local_embeddings is None:
            continue
        if upd.client_id not in store:
            raise PairingError(f"client {upd.client_id} has no stored text representations")
        stored = store[upd.client_id]
        row_of = {int(s): i for i, s in enumerate(stored.sample_ids)}
        try:
            rows = np.array([row_of[int(s)] for s in upd.local_embeddings.sample_ids])
        except KeyError as exc:
            raise PairingError(f"sample id {exc.args[0]} not in the server store") from None
        ids = upd.local_embeddings.sample_ids
        feats = stored.features[rows]
        for idx in minibatches(rng_for(upd.client_id).permutation(ids.size), cfg.batch_size):
            if idx.size < 2:
                continue
            z_s = server.encoder.forward(feats[idx])
            loss, g_server, _ = embedding_alignment(
                EmbeddingBatch(ids[idx], z_s),
                EmbeddingBatch(ids[idx], upd.local_embeddings.vectors[idx]),
                ccfg.temperature,
                SERVER_ANCHORED,
                inter_modal_negatives=ccfg.include_inter_modal_negatives,
                normalize=ccfg.normalize,
            )
            grads, _ = server.encoder.backward(feats[idx], g_server)
            server.set_params(adam_step(adam, server.get_params(), grads))
            losses.append(loss)
    return _mean_or_none(losses)


class Simulation:
    """Owns all models, client states and the server store for one run."""

    def __init__(
        self,
        cfg: FederationConfig,
        shards: Sequence[ClientShard],
        test: Dataset,
        dims: ModelDims,
        streams: SeedStreams,
        metrics: Sequence[str] = ("accuracy", "uar"),
        hook: Hook | None = None,
    ):
        if len(shards) != cfg.num_clients:
            raise ProtocolError(f"config expects {cfg.num_clients} clients, got {len(shards)} shards")
        self.cfg = cfg
        self.dims = dims
        self.streams = streams
        self.metrics = list(metrics)
        self.hook = hook or (lambda event, **info: None)
        self.test = test
        num_classes = test.num_classes

        audio_dim = shards[0].audio.shape[1] if shards else test.audio.shape[1]
        text_dim = test.text.shape[1]
        ext_seed = int(streams.rng("init", 0).integers(2**32))
        self.audio_extractor = FrozenExtractor(audio_dim, dims.feature_dim, ext_seed)
        self.text_extractor = FrozenExtractor(text_dim, dims.feature_dim, ext_seed + 1)

        self.global_model = GlobalModel.build(dims, num_classes, streams.rng("init", 1), cfg.global_modality_mode)
        self.global_params = self.global_model.get_params()

        partial = cfg.algorithm == "partialfl"
        self.clients: list[ClientState] = []
        for shard in shards:
            text = self.text_extractor(shard.text) if shard.has_shareable and shard.text is not None else None
            state = ClientState(shard.client_id, shard, self.audio_extractor(shard.audio), text)
            if partial and text is not None:
                state.local_model = LocalModel.build(dims, num_classes, streams.rng("init", 3, shard.client_id))
                state.local_adam = AdamState(len(state.local_model.get_params()), lr=cfg.lr)
            self.clients.append(state)

        self.server: ServerModel | None = None
        self.server_adam: AdamState | None = None
        self.store: dict[int, ShareableUpload] = {}
        if partial:
            self.server = ServerModel.build(dims, streams.rng("init", 2))
            self.server_adam = AdamState(len(self.server.get_params()), lr=cfg.lr)
            self.upload_shareable_representations()
            self.refresh_server_embeddings(-1)

        self._sampler = streams.rng("sampling")
        self._test_audio = self.audio_extractor(test.audio)
        self._test_text = self.text_extractor(test.text)

    def upload_shareable_representations(self) -> None:
        """Clients with the shareable modality send frozen text representations once."""
        for c in self.clients:
            if c.text_features is None:
                continue
            msg = ShareableUpload(c.client_id, c.shard.ids.copy(), c.text_features.copy())
            self.hook("upload", message=msg)
            self.store[c.client_id] = msg

    def refresh_server_embeddings(self, round_index: int) -> None:
        """Re-encode every stored client's text with the current server model."""
        for k, msg in sorted(self.store.items()):
            self.clients[k].server_embeddings = EmbeddingBatch(msg.sample_ids, self.server.encoder.forward(msg.features))
        self.hook("server_embeddings", round=round_index, embeddings={
            k: self.clients[k].server_embeddings for k in sorted(self.store)
        })

    def evaluate(self) -> dict[str, float]:
        model = self.global_model
        model.set_params(self.global_params)
        _, logits = model.forward(self._test_audio, self._test_text)
        return evaluate_logits(logits, self.test.labels, self.metrics)

    def _train_one(self, t: int, client: ClientState) -> ClientResult:
        bcast = Broadcast(self.global_params, client.server_embeddings)
        self.hook("distribute", round=t, client_id=client.client_id, message=bcast)
        return client_train(
            bcast.global_params,
            self.global_model,
            client,
            bcast.server_embeddings,
            self.cfg,
            self.streams.rng("batching", t, client.client_id),
        )

    def run_round(self, t: int, evaluate: bool = True) -> RoundReport:
        cfg = self.cfg
        participants = sample_clients(cfg.num_clients, cfg.sample_rate, self._sampler)
        self.hook("sample", round=t, participants=participants)

        chosen = [self.clients[k] for k in participants]
        if cfg.workers > 1 and len(chosen) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda c: self._train_one(t, c), chosen))
        else:
            results = [self._train_one(t, c) for c in chosen]

        live = [r for r in results if not r.skipped]
        for r in live:
            self.hook("uplink", round=t, message=r.update)

        loss_server = None
        if self.server is not None:
            loss_server = server_train(
                self.server,
                self.server_adam,
                [r.update for r in live],
                self.store,
                cfg,
                lambda k: self.streams.rng("batching", t, k, 1),
            )
            self.refresh_server_embeddings(t)

        if live:
            self.global_params = aggregate(
                [r.update.global_params for r in live], [r.update.num_samples for r in live], cfg.aggregation
            )
        self.hook("aggregate", round=t, params=self.global_params)

        partial = cfg.algorithm == "partialfl"
        return RoundReport(
            round=t,
            participants=participants,
            loss_glob=_mean_or_none([r.loss_glob for r in live]),
            loss_loc=_mean_or_none([r.loss_loc for r in live]) if partial else None,
            loss_server=loss_server,
            metrics=self.evaluate() if evaluate else None,
            skipped_clients=[r.update.client_id for r in results if r.skipped],
        )


class CentralizedTrainer:
    """Trains the global architecture on pooled data with a matched step budget.

    One "round" performs as many Adam steps as a federated round performs on
    average across its participants.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        train: Dataset,
        test: Dataset,
        dims: ModelDims,
        streams: SeedStreams,
        metrics: Sequence[str] = ("accuracy", "uar"),
    ):
        self.cfg = cfg
        self.streams = streams
        self.metrics = list(metrics)
        ext_seed = int(streams.rng("init", 0).integers(2**32))
        audio_ext = FrozenExtractor(train.audio.shape[1], dims.feature_dim, ext_seed)
        text_ext = FrozenExtractor(train.text.shape[1], dims.feature_dim, ext_seed + 1)
        self.model = GlobalModel.build(dims, test.num_classes, streams.rng("init", 1), cfg.global_modality_mode)
        self.params = self.model.get_params()
        self.adam = AdamState(len(self.params), lr=cfg.lr)
        self.train_audio, self.train_text = audio_ext(train.audio), text_ext(train.text)
        self.train_labels = train.labels
        self.test = test
        self._test_audio, self._test_text = audio_ext(test.audio), text_ext(test.text)
        per_client = len(train) / cfg.num_clients
        self.steps_per_round = cfg.local_epochs * cfg.participants_per_round * max(
            1, int(np.ceil(per_client / cfg.batch_size))
        )

    def evaluate(self) -> dict[str, float]:
        self.model.set_params(self.params)
        _, logits = self.model.forward(self._test_audio, self._test_text)
        return evaluate_logits(logits, self.test.labels, self.metrics)

    def run_round(self, t: int, evaluate: bool = True) -> RoundReport:
        rng = self.streams.rng("batching", t)
        n = self.train_labels.size
        order = np.concatenate([rng.permutation(n) for _ in range(-(-self.steps_per_round * self.cfg.batch_size // n))])
        losses = []
        for s in range(self.steps_per_round):
            idx = order[s * self.cfg.batch_size:(s + 1) * self.cfg.batch_size]
            _, logits = self.model.forward(self.train_audio[idx], self.train_text[idx])
            loss, g_logits = softmax_cross_entropy(logits, self.train_labels[idx])
            grads = self.model.backward(np.zeros((idx.size, self.model.classifier.in_dim)), g_logits)
            self.params = adam_step(self.adam, self.params, grads)
            self.model.set_params(self.params)
            losses.append(loss)
        return RoundReport(
            round=t,
            participants=None,
            loss_glob=_mean_or_none(losses),
            loss_loc=None,
            loss_server=None,
            metrics=self.evaluate() if evaluate else None,
        )


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    final_metrics: dict[str, float]
    final_params: ModelParams


def run_experiment(
    cfg: FederationConfig,
    shards: Sequence[ClientShard],
    train: Dataset,
    test: Dataset,
    dims: ModelDims,
    streams: SeedStreams,
    metrics: Sequence[str] = ("accuracy", "uar"),
    hook: Hook | None = None,
) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds, evaluating every ``eval_interval`` rounds and at the end."""
    if cfg.algorithm == "centralized":
        runner: Simulation | CentralizedTrainer = CentralizedTrainer(cfg, train, test, dims, streams, metrics)
    else:
        runner = Simulation(cfg, shards, test, dims, streams, metrics, hook)
    reports = []
    for t in range(cfg.rounds):
        last = t == cfg.rounds - 1
        reports.append(runner.run_round(t, evaluate=last or (t + 1) % cfg.eval_interval == 0))
        logger.debug("round %d: %s", t, reports[-1].metrics)
    final = reports[-1].metrics if reports else runner.evaluate()
    params = runner.params if isinstance(runner, CentralizedTrainer) else runner.global_params
    return ExperimentResult(reports, dict(final), params)
