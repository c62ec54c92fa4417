"""Round-based federated training with pluggable upload pipelines.

Pipelines:

``fedavg``        dense parameter deltas
``flat``          Top-k over the flattened delta, with residual feedback
``thgs``          per-layer Top-k with geometrically decaying layer rates
``secagg``        masked sparse upload with per-client dynamic rate
``secagg-plain``  same transmit positions as ``secagg`` but no masks; the
                  cancellation oracle for ``secagg``

Clients send ``global - local`` after local SGD; the server averages the
selected clients' decoded updates (unweighted) and subtracts the average from
the global model.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import secagg
from .data import Dataset, PartitionSpec, parse_mode, partition
from .errors import ConfigError
from .ledger import dense_bits
from .sparsify import (
    ENTRY_BITS,
    ResidualState,
    SparseUpdate,
    decode,
    encode,
    schedule_rates,
    sparsify_flat,
    sparsify_layered,
)
from .tensor import Batch, LayeredTensor, apply_update, evaluate, forward_loss_grad, init_model

logger = logging.getLogger(__name__)

PIPELINES = ("fedavg", "flat", "thgs", "secagg", "secagg-plain")
SPARSE_PIPELINES = PIPELINES[1:]
SECAGG_PIPELINES = ("secagg", "secagg-plain")

# Tags that keep the per-purpose random streams independent of each other.
_SEL, _BATCH, _INIT, _PART, _DH = range(5)


@dataclass
class RunConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    local_iterations: int = 5
    batch_size: int = 50
    learning_rate: float = 0.05
    rounds: int = 100
    pipeline: str = "fedavg"
    hidden: list[int] = field(default_factory=lambda: [200])
    partition: str = "iid"
    shard_size: int | None = None
    seed: int = 0
    # flat Top-k
    s: float = 0.01
    # THGS layer schedule
    s_0: float = 0.1
    alpha: float = 0.5
    s_min: float = 0.01
    # secure aggregation
    R_0: float = 0.5
    R_min: float = 0.01
    rate_alpha: float = 1.0
    mask_p: float = 0.0
    mask_q: float = 1.0
    k_ratio: float = 0.1

    def validate(self) -> None:
        for name in ("num_clients", "clients_per_round", "batch_size", "rounds"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.local_iterations < 0:
            raise ConfigError("local_iterations must be >= 0")
        if self.clients_per_round > self.num_clients:
            raise ConfigError("clients_per_round must not exceed num_clients")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive")
        parse_mode(self.partition)
        if self.shard_size is not None and self.shard_size < 1:
            raise ConfigError("shard_size must be positive")
        if self.pipeline == "flat" and not 0 < self.s <= 1:
            raise ConfigError(f"s must lie in (0, 1], got {self.s}")
        if self.pipeline == "thgs":
            schedule_rates(self.s_0, self.alpha, self.s_min, 1)
        if self.pipeline in SECAGG_PIPELINES:
            if self.clients_per_round < 2:
                raise ConfigError("secure aggregation needs clients_per_round >= 2")
            if not 0 < self.R_min <= self.R_0 <= 1:
                raise ConfigError("need 0 < R_min <= R_0 <= 1")
            self.mask_params()

    def mask_params(self) -> secagg.MaskParams:
        return secagg.MaskParams(self.mask_p, self.mask_q, self.k_ratio, self.clients_per_round)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    loss: float
    clients: list[int]
    upload_bits: list[float]
    framing_bits: list[int]
    download_bits: int
    exposures: int | None = None
    predicted_bits: list[int] | None = None


def select_clients(num_clients: int, clients_per_round: int, round: int, seed: int) -> list[int]:
    rng = np.random.default_rng([seed, _SEL, round])
    return sorted(int(c) for c in rng.choice(num_clients, clients_per_round, replace=False))


def local_train(global_model: LayeredTensor, data: Dataset, config: RunConfig,
                rng: np.random.Generator) -> tuple[LayeredTensor, float]:
    """Local mini-batch SGD from the global model.

    Returns ``(global - local, mean loss over the local iterations)``. With
    zero iterations the loss is the global model's loss on the full local set.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("client holds no samples")
    w = global_model
    losses = []
    for _ in range(config.local_iterations):
        if n <= config.batch_size:
            batch = Batch(data.samples, data.labels)
        else:
            idx = rng.choice(n, config.batch_size, replace=False)
            batch = Batch(data.samples[idx], data.labels[idx])
        loss, grad = forward_loss_grad(w, batch)
        losses.append(loss)
        w = apply_update(w, grad, config.learning_rate)
    if not losses:
        losses.append(forward_loss_grad(w, Batch(data.samples, data.labels))[0])
    return global_model - w, float(np.mean(losses))


def client_partition(train: Dataset, config: RunConfig) -> PartitionSpec:
    return partition(train, config.num_clients, config.partition,
                     seed=hash_seed(config.seed, _PART), shard_size=config.shard_size)


def average_dense(updates: Sequence[LayeredTensor], num_clients: int) -> LayeredTensor:
    total = updates[0].zeros_like()
    for u in updates:
        total = total + u
    return total / num_clients


class Federation:
    """Mutable simulation state: global model, per-client residuals and rates."""

    def __init__(self, config: RunConfig, train: Dataset, test: Dataset,
                 parts: PartitionSpec | None = None):
        config.validate()
        self.config = config
        self.train = train
        self.test = test
        self.parts = parts or client_partition(train, config)
        if self.parts.num_clients != config.num_clients:
            raise ConfigError("partition client count differs from num_clients")
        self.client_data = [train.subset(a) for a in self.parts.assignment]
        dims = [train.feature_dim, *config.hidden, train.num_classes]
        self.model = init_model(dims, hash_seed(config.seed, _INIT))
        self.round = 0
        self.residuals: dict[int, ResidualState] = {}
        self.rates: dict[int, secagg.DynamicRateState] = {}
        self.schedule = None
        if config.pipeline == "thgs":
            self.schedule = schedule_rates(config.s_0, config.alpha, config.s_min, len(self.model))
        self.pair_seeds = None
        if config.pipeline in SECAGG_PIPELINES:
            self.pair_seeds = secagg.dh_exchange(range(config.num_clients), seed=hash_seed(config.seed, _DH))
        # per-client (transmitted, generated) running sums; diagnostics only
        self.ledger_sums: dict[int, tuple[LayeredTensor, LayeredTensor]] = {}

    @property
    def m(self) -> int:
        return self.model.total_len

    def _residual(self, client: int) -> ResidualState:
        if client not in self.residuals:
            self.residuals[client] = ResidualState.zeros_like(self.model)
        return self.residuals[client]

    def _rate(self, client: int) -> secagg.DynamicRateState:
        if client not in self.rates:
            c = self.config
            self.rates[client] = secagg.DynamicRateState(R=c.R_0, R_min=c.R_min, alpha=c.rate_alpha, T=c.rounds)
        return self.rates[client]

    def _track(self, client: int, generated: LayeredTensor, sent: LayeredTensor) -> None:
        if client in self.ledger_sums:
            s, g = self.ledger_sums[client]
            self.ledger_sums[client] = (s + sent, g + generated)
        else:
            self.ledger_sums[client] = (sent, generated)

    def run_round(self) -> RoundRecord:
        c = self.config
        t = self.round
        selected = select_clients(c.num_clients, c.clients_per_round, t, c.seed)
        pair_masks = None
        if c.pipeline in SECAGG_PIPELINES:
            pair_masks = secagg.round_pair_masks(selected, self.pair_seeds, self.model.shapes, c.mask_params())

        dense_updates: list[LayeredTensor] = []
        wire: list[bytes] = []
        uploads, framing, predicted = [], [], []
        for client in selected:
            rng = np.random.default_rng([c.seed, _BATCH, t, client])
            delta, loss = local_train(self.model, self.client_data[client], c, rng)
            if c.pipeline == "fedavg":
                dense_updates.append(delta)
                uploads.append(dense_bits(self.m))
                framing.append(0)
                continue

            state = self._residual(client)
            effective = delta + state.residual
            if c.pipeline == "flat":
                sparse, res = sparsify_flat(effective, c.s)
            elif c.pipeline == "thgs":
                sparse, res = sparsify_layered(effective, self.schedule)
            else:
                rate = secagg.update_rate(replace(self._rate(client), t=t), loss)
                self.rates[client] = rate
                signed = secagg.signed_masks_for(client, selected, pair_masks)
                masks = secagg.build_masks(effective, rate.R, signed)
                if c.pipeline == "secagg":
                    sparse = secagg.encrypt_encode(effective, masks)
                else:
                    sparse = secagg.plain_encode(effective, masks)
                res = secagg.residual(effective, masks)
            self.residuals[client] = ResidualState(res)
            if c.pipeline in ("flat", "thgs"):
                self._track(client, delta, sparse.to_dense())
            buf = encode(sparse)
            wire.append(buf)
            framing.append(sparse.framing_bits)
            uploads.append(8 * len(buf) - sparse.framing_bits)
            predicted.append(ENTRY_BITS * sparse.nnz)

        exposures = None
        if c.pipeline == "fedavg":
            avg = average_dense(dense_updates, len(selected))
        else:
            decoded: list[SparseUpdate] = [decode(b, self.model.shapes) for b in wire]
            avg = secagg.server_aggregate(decoded, len(selected))
            if c.pipeline in SECAGG_PIPELINES:
                exposures = secagg.audit_exposure(decoded).count
        self.model = apply_update(self.model, avg, 1.0)
        self.round += 1
        acc, test_loss = evaluate(self.model, self.test.samples, self.test.labels)
        record = RoundRecord(
            round=self.round,
            accuracy=acc,
            loss=test_loss,
            clients=selected,
            upload_bits=uploads,
            framing_bits=framing,
            download_bits=dense_bits(self.m),
            exposures=exposures,
            predicted_bits=predicted or None,
        )
        logger.debug("round %d acc=%.4f loss=%.4f", record.round, acc, test_loss)
        return record

    def run(self, rounds: int | None = None, callback=None) -> list[RoundRecord]:
        records = []
        for _ in range(self.config.rounds if rounds is None else rounds):
            rec = self.run_round()
            records.append(rec)
            if callback is not None:
                callback(rec)
        return records


def hash_seed(seed: int, tag: int) -> int:
    """Derive a 63-bit sub-seed from the master seed for one purpose."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def run_experiment(config: RunConfig, train: Dataset, test: Dataset) -> tuple[list[RoundRecord], LayeredTensor]:
    fed = Federation(config, train, test)
    records = fed.run()
    return records, fed.model
