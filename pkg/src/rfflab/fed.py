"""Federated training of the RIEI model with one-bit uplink compression.

Each round every client copies the global model, runs ``L`` local epochs of
the alternating scheme on its own receiver's data and uploads the
normalized change ``(theta_global - theta_local) / eta`` (per block, using
that block's client stepsize), optionally sign-compressed. The server
applies the sample-count weighted sum of the decoded uploads.

BatchNorm running statistics are not part of the gradient payload; the
server replaces them by the weighted mean of the clients' local statistics.
They are counted separately as ``stat_bits``.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ProtocolError, TrainingDivergedError
from .riei import Batch, RieiModel, TrainConfig, group_of, iter_minibatches, stepsize_for, train_minibatch
from .synth import SampleSet

FLOAT_BITS = 64
BASELINE_FLOAT_BITS = 32


class Compressor(str, enum.Enum):
    NONE = "None"
    SIGN = "Sign"
    NOISY_SIGN_GAUSSIAN = "NoisySignGaussian"
    NOISY_SIGN_UNIFORM = "NoisySignUniform"


@dataclass
class FedConfig:
    T: int = 20
    L: int = 1
    compressor: Compressor = Compressor.NONE
    sigma: float = 0.01
    server_eta: float | None = None
    batch: int | None = 16
    steps_per_epoch: int | None = None
    weights: str = "BySampleCount"
    seed: int = 0

    def __post_init__(self):
        self.compressor = Compressor(self.compressor)

    def validate(self):
        if self.T < 0 or self.L < 1:
            raise ConfigError("need T >= 0 rounds and L >= 1 local epochs")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.server_eta is not None and self.server_eta <= 0:
            raise ConfigError("server_eta must be positive")
        if self.batch is not None and self.batch < 2:
            raise ConfigError("client batch must be >= 2")
        if self.weights != "BySampleCount":
            raise ConfigError("only BySampleCount client weighting is supported")
        return self


@dataclass
class ClientState:
    client_id: int
    data: SampleSet

    @property
    def n_samples(self):
        return len(self.data)


@dataclass
class CompressedDelta:
    """Per-block upload. ``blocks`` holds int8 signs when compressed, float64 otherwise."""

    blocks: dict
    compressed: bool

    @property
    def coordinates(self):
        return sum(v.size for v in self.blocks.values())

    @property
    def payload_bits(self):
        return self.coordinates * (1 if self.compressed else FLOAT_BITS)

    def decoded(self, name):
        return self.blocks[name].astype(np.float64)


@dataclass
class ClientResult:
    delta: dict
    running_stats: dict
    metrics: dict


@dataclass
class RoundLog:
    round: int
    client_losses: dict
    uplink_bits: int
    cumulative_bits: int
    cumulative_bits_32: int
    stat_bits: int
    eval_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def compression_ratio_32(self):
        return self.cumulative_bits_32 / self.cumulative_bits if self.cumulative_bits else math.nan


def client_update(state: ClientState, global_model: RieiModel, train_cfg: TrainConfig, cfg: FedConfig,
                  rng: np.random.Generator) -> ClientResult:
    """Local alternating training from the broadcast model; returns the normalized delta."""
    local = global_model.copy()
    n = state.n_samples
    if n == 0:
        raise ConfigError(f"client {state.client_id} holds no data")
    batch = n if cfg.batch is None else cfg.batch
    sums = np.zeros(3)
    steps = 0
    for _ in range(cfg.L):
        chunks = iter_minibatches(n, batch, rng)
        if cfg.steps_per_epoch is not None:
            chunks = chunks[:cfg.steps_per_epoch]
        for idx in chunks:
            b = Batch(state.data.frames[idx], state.data.emitter[idx], state.data.receiver[idx])
            try:
                ce, ie, mi, _ = train_minibatch(local, b, train_cfg)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), client=state.client_id) from None
            sums += (ce, ie, mi)
            steps += 1
    before = global_model.named_blocks()
    delta, stats = {}, {}
    for b in local.blocks():
        if b.trainable:
            eta = stepsize_for(train_cfg, group_of(b.name))
            delta[b.name] = (before[b.name].values - b.values) / eta
        else:
            stats[b.name] = b.values.copy()
    sums /= max(steps, 1)
    metrics = {"loss_ce": float(sums[0]), "loss_ie": float(sums[1]), "loss_mi": float(sums[2])}
    return ClientResult(delta, stats, metrics)


def _signs(x):
    return np.where(x >= 0, 1, -1).astype(np.int8)


def compress(delta: dict, scheme, sigma=0.01, rng: np.random.Generator | None = None) -> CompressedDelta:
    """Quantize a delta with one of the sign schemes.

    Sign: +1 where x >= 0, else -1. NoisySignGaussian adds N(0, sigma^2)
    first; NoisySignUniform adds U(-sigma*sqrt(3), sigma*sqrt(3)), which has
    the same variance. Noise is drawn block by block in ``delta`` order.
    """
    scheme = Compressor(scheme)
    if scheme is Compressor.NONE:
        return CompressedDelta({k: np.asarray(v, dtype=np.float64).copy() for k, v in delta.items()}, False)
    out = {}
    for name, x in delta.items():
        x = np.asarray(x, dtype=np.float64)
        if scheme is Compressor.SIGN or sigma == 0:
            out[name] = _signs(x)
        elif scheme is Compressor.NOISY_SIGN_GAUSSIAN:
            out[name] = _signs(x + sigma * rng.standard_normal(x.shape))
        else:
            half = sigma * math.sqrt(3.0)
            out[name] = _signs(x + rng.uniform(-half, half, x.shape))
    return CompressedDelta(out, True)


def server_round(global_params: dict, compressed, weights, server_eta) -> dict:
    """theta - eta * sum_k w_k Q(delta_k), summed in ascending client order.

    ``server_eta`` is a scalar or a map from block name to stepsize.
    """
    weights = [float(w) for w in weights]
    if len(weights) != len(compressed):
        raise ProtocolError("one weight per client upload is required")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ProtocolError(f"client weights sum to {sum(weights)}, expected 1")
    new = {}
    for name, theta in global_params.items():
        acc = np.zeros_like(theta, dtype=np.float64)
        for q, w in zip(compressed, weights):
            if name not in q.blocks or q.blocks[name].shape != theta.shape:
                raise ProtocolError(f"upload for block {name} missing or mis-shaped")
            acc += w * q.decoded(name)
        eta = server_eta[name] if isinstance(server_eta, dict) else server_eta
        new[name] = theta - eta * acc
    for q in compressed:
        extra = set(q.blocks) - set(global_params)
        if extra:
            raise ProtocolError(f"upload carries unknown blocks {sorted(extra)}")
    return new


def client_weights(clients):
    total = sum(c.n_samples for c in clients)
    return [c.n_samples / total for c in clients]


def fed_fit(clients, model: RieiModel, train_cfg: TrainConfig, cfg: FedConfig,
            evaluate: Callable | None = None, on_round: Callable | None = None, threads: int = 1):
    """Run ``cfg.T`` rounds; returns ``(model, logs)``. ``model`` is updated in place.

    Client RNG streams are keyed by (seed, client id, round) and uploads are
    aggregated in ascending client id, so results do not depend on
    ``threads``.
    """
    cfg.validate()
    train_cfg.validate()
    clients = sorted(clients, key=lambda c: c.client_id)
    if len(clients) < 2:
        raise ConfigError("federated training needs at least two clients")
    weights = client_weights(clients)
    trainable = [b for b in model.blocks() if b.trainable]
    stat_blocks = [b for b in model.blocks() if not b.trainable]
    P = sum(b.values.size for b in trainable)
    if cfg.server_eta is None:
        server_eta = {b.name: stepsize_for(train_cfg, group_of(b.name)) for b in trainable}
    else:
        server_eta = cfg.server_eta

    def work(client, t):
        r = rngmod.stream(cfg.seed, "client", client.client_id, t)
        try:
            res = client_update(client, model, train_cfg, cfg, r)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), round_index=t) from None
        q = compress(res.delta, cfg.compressor, cfg.sigma, rngmod.stream(cfg.seed, "compress", client.client_id, t))
        return res, q

    logs, cumulative, cumulative32 = [], 0, 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(1, cfg.T + 1):
            if pool is None:
                results = [work(c, t) for c in clients]
            else:
                results = list(pool.map(lambda c: work(c, t), clients))
            new = server_round({b.name: b.values for b in trainable}, [q for _, q in results], weights, server_eta)
            for b in trainable:
                b.values[...] = new[b.name]
            for b in stat_blocks:
                b.values[...] = sum(w * res.running_stats[b.name] for (res, _), w in zip(results, weights))
            uplink = sum(q.payload_bits for _, q in results)
            cumulative += uplink
            cumulative32 += BASELINE_FLOAT_BITS * P * len(clients)
            log = RoundLog(t, {c.client_id: res.metrics for c, (res, _) in zip(clients, results)}, uplink,
                           cumulative, cumulative32,
                           FLOAT_BITS * sum(b.values.size for b in stat_blocks) * len(clients))
            if evaluate is not None:
                log.eval_accuracy = float(evaluate(model))
            logs.append(log)
            if on_round is not None:
                on_round(t, model, log)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, logs


def bits_accounting(logs):
    """Cumulative uplink bits after each round."""
    return [log.cumulative_bits for log in logs]


def write_round_log(path, logs):
    """Append-only CSV: round, per-client losses, cumulative bits, accuracy."""
    ids = sorted(logs[0].client_losses) if logs else []
    header = ["round"]
    for k in ids:
        header += [f"client{k}_loss_ce", f"client{k}_loss_ie", f"client{k}_loss_mi"]
    header += ["uplink_bits", "cumulative_bits", "compression_ratio_32", "eval_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for log in logs:
            row = [log.round]
            for k in ids:
                m = log.client_losses[k]
                row += [repr(m["loss_ce"]), repr(m["loss_ie"]), repr(m["loss_mi"])]
            acc = "" if log.eval_accuracy is None else repr(log.eval_accuracy)
            row += [log.uplink_bits, log.cumulative_bits, repr(log.compression_ratio_32), acc]
            w.writerow(row)
