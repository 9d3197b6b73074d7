"""Federated rounds over HHE-protected updates.

Roles.  The TPA generates one BFV key set and one PASTA key per client.  The
server receives only (HE_pk, HE_eval); each client receives (HE_pk, HE_sk,
sk_i).  A round is: selected clients train and upload, the server aggregates
sum_k n_k * w_k without decrypting, clients decrypt and divide by n =
sum_k n_k, evaluate, and report metrics that the server averages.

Three upload modes share every step except the crypto: ``plain`` sends the
quantized field vector, ``bfv`` sends BFV ciphertexts directly and ``hhe``
sends PASTA chunks plus the BFV-encrypted PASTA key.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import ceil, log2

import numpy as np

from hhefl import codec
from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import (
    BfvCiphertext,
    EvaluationKeys,
    PublicKey,
    SecretKey,
    decrypt,
    encrypt,
    he_add,
    he_plain_mul,
    keygen,
)
from hhefl.errors import ConfigurationError, ParameterError, ProtocolError, RoundAborted
from hhefl.field import P
from hhefl.hesd import HesdContext, max_lanes, rotation_steps
from hhefl.learner import ClientShard, Dataset, EvalMetrics, TrainConfig, evaluate, model_shapes, train_local
from hhefl.pasta import BlockNonce, PastaKey, PastaVariant, SymCiphertextChunk, encrypt_vector
from hhefl.rand import Seed, make_rng

MODES = ("plain", "bfv", "hhe")


# -- configuration constraint


def aggregation_bound(spec: codec.QuantSpec = codec.QuantSpec(), p: int = P) -> int:
    """Largest allowed sum of batch counts: qmax * sum(n_k) must stay below p / 2."""
    return (p // 2 - 1) // spec.qmax


def check_constraint(batches_per_client, training_clients: int | None = None, spec: codec.QuantSpec = codec.QuantSpec(), p: int = P) -> bool:
    """True iff a weighted sum of quantized updates cannot wrap mod p.

    Either pass one batch count and a client count, or a sequence of
    per-client batch counts (and no client count).
    """
    if training_clients is None:
        counts = [int(n) for n in batches_per_client]
    else:
        counts = [int(batches_per_client)] * int(training_clients)
    if not counts or any(n < 1 for n in counts):
        raise ParameterError("batch and client counts must be positive")
    return spec.qmax * sum(counts) < p // 2


def power_of_two_rule(batches_per_client: int, training_clients: int, budget_bits: int = 8) -> bool:
    """Coarser sufficient check: 2^ceil(log2 b) * 2^ceil(log2 k) <= 2^budget_bits."""
    if batches_per_client < 1 or training_clients < 1:
        raise ParameterError("batch and client counts must be positive")
    return ceil(log2(batches_per_client)) + ceil(log2(training_clients)) <= budget_bits


def require_constraint(counts, spec: codec.QuantSpec = codec.QuantSpec()) -> None:
    counts = list(counts)
    if not check_constraint(counts, spec=spec):
        total = sum(counts)
        raise ConfigurationError(f"{spec.qmax} * sum(n_k) = {spec.qmax * total} is not below {P // 2}; sum(n_k) must be at most {aggregation_bound(spec)}")


# -- keys


@dataclass(frozen=True, eq=False)
class ServerKeyShare:
    public: PublicKey
    eval_keys: EvaluationKeys


@dataclass(frozen=True, eq=False)
class ClientKeyShare:
    client_id: int
    public: PublicKey
    secret: SecretKey
    pasta_key: PastaKey


@dataclass(frozen=True, eq=False)
class TpaKeyBundle:
    params: BfvParams
    variant: PastaVariant
    server: ServerKeyShare
    clients: list[ClientKeyShare]


def tpa_setup(n_clients: int, params: BfvParams, variant: PastaVariant, seed: Seed = 0, rotations: bool = True) -> TpaKeyBundle:
    """One HE key set for the whole system and a distinct PASTA key per client.
    Without ``rotations`` only the relinearization key is generated (enough
    for plain and BFV-only runs)."""
    if n_clients < 1:
        raise ParameterError("need at least one client")
    steps = rotation_steps(variant, params) if rotations else ()
    keys = keygen(params, steps, seed=make_rng(seed, "tpa-bfv").integers(1 << 62))
    pasta = [PastaKey.generate(variant, make_rng(seed, "tpa-pasta", i)) for i in range(n_clients)]
    if len(set(pasta)) != n_clients:
        raise ParameterError("PASTA key collision; pick another seed")
    server = ServerKeyShare(keys.public, keys.evaluation_keys())
    clients = [ClientKeyShare(i, keys.public, keys.secret, k) for i, k in enumerate(pasta)]
    return TpaKeyBundle(params, variant, server, clients)


# -- slot layouts


@dataclass(frozen=True)
class SlotLayout:
    """Block j of ``width`` values starts at slot ``stride * j`` of a ciphertext."""

    width: int
    lanes: int
    stride: int

    def pack(self, blocks, n_slots: int) -> np.ndarray:
        out = np.zeros(n_slots, dtype=np.int64)
        for j, b in enumerate(blocks):
            out[j * self.stride : j * self.stride + len(b)] = b
        return out

    def unpack(self, slots, count: int) -> list[np.ndarray]:
        slots = np.asarray(slots, dtype=np.int64)
        return [slots[j * self.stride : j * self.stride + self.width] for j in range(count)]


def hhe_layout(variant: PastaVariant, params: BfvParams, lanes: int | None = None) -> SlotLayout:
    return SlotLayout(variant.t, lanes or max_lanes(variant.t, params.row_size), 4 * variant.t)


def bfv_layout(t: int, params: BfvParams, full_slots: bool = False) -> SlotLayout:
    """Chunked packing puts one t-value block per ciphertext; full packing fills every slot."""
    return SlotLayout(t, params.n // t, t) if full_slots else SlotLayout(t, 1, t)


# -- updates


@dataclass(eq=False)
class ClientUpdate:
    """What a training client uploads.  Exactly one payload is set, by mode."""

    client_id: int
    round: int
    n_k: int
    mode: str
    chunks: list[SymCiphertextChunk] | None = None
    sk_he: BfvCiphertext | None = None
    ciphertexts: list[BfvCiphertext] | None = None
    values: np.ndarray | None = None
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.n_k < 1:
            raise ParameterError("n_k must be at least 1")
        if self.chunks is not None:
            for expect, c in enumerate(self.chunks):
                if c.counter != expect:
                    raise ProtocolError(f"chunk counter gap in update from client {self.client_id}")


@dataclass(eq=False)
class AggregateResult:
    """Slot-aligned weighted sums plus n = sum of contributing n_k."""

    mode: str
    n: int
    contributors: tuple[int, ...]
    length: int
    layout: SlotLayout | None = None
    ciphertexts: list[BfvCiphertext] | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.n <= 0 or not self.contributors:
            raise ProtocolError("an aggregate needs at least one contributing client")


@dataclass(frozen=True)
class EvalReport:
    client_id: int
    accuracy: float
    loss: float
    count: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or self.count <= 0:
            raise ParameterError("accuracy must lie in [0, 1] and count be positive")


@dataclass(frozen=True)
class GlobalMetrics:
    accuracy: float
    loss: float
    count: int


# -- client side


def batch_count(shard: ClientShard, batch_size: int) -> int:
    n = len(shard.train) // batch_size
    if n < 1:
        raise ParameterError(f"client has {len(shard.train)} training samples, fewer than one batch of {batch_size}")
    return n


@dataclass(eq=False)
class Client:
    keys: ClientKeyShare
    shard: ClientShard
    params: BfvParams
    variant: PastaVariant
    mode: str = "hhe"
    spec: codec.QuantSpec = field(default_factory=codec.QuantSpec)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: Seed = 0
    full_slots: bool = False
    weights: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def client_id(self) -> int:
        return self.keys.client_id

    def training_phase(self, global_weights, round_index: int) -> ClientUpdate:
        """Train from the global weights, then quantize and encrypt the result."""
        if round_index < 1:
            raise ParameterError("rounds are numbered from 1")
        t0 = time.perf_counter()
        local = train_local(global_weights, self.shard, self.train_cfg, seed=(self.seed, round_index, self.client_id))
        t1 = time.perf_counter()
        spec = codec.QuantSpec(self.spec.alpha, self.spec.bits, self.variant.t)
        encoded = codec.encode_weights(local, spec)
        n_k = batch_count(self.shard, self.train_cfg.batch_size)
        update = ClientUpdate(self.client_id, round_index, n_k, self.mode)
        if self.mode == "plain":
            update.values = encoded
        elif self.mode == "bfv":
            layout = bfv_layout(self.variant.t, self.params, self.full_slots)
            blocks = encoded.reshape(-1, self.variant.t)
            rng = make_rng(self.seed, "bfv-upload", round_index, self.client_id)
            update.ciphertexts = [
                encrypt(layout.pack(blocks[i : i + layout.lanes], self.params.n), self.keys.public, rng)
                for i in range(0, len(blocks), layout.lanes)
            ]
        else:
            nonce = BlockNonce.for_round(round_index, self.client_id)
            update.chunks = encrypt_vector(encoded, self.keys.pasta_key, nonce, self.variant)
            key_slots = np.zeros(self.params.n, dtype=np.int64)
            key_slots[: self.variant.key_size] = self.keys.pasta_key.values
            rng = make_rng(self.seed, "key-upload", round_index, self.client_id)
            update.sk_he = encrypt(key_slots, self.keys.public, rng)
        update.timings = {"train": t1 - t0, "encrypt": time.perf_counter() - t1}
        return update

    def decode_aggregate(self, agg: AggregateResult, shapes) -> list[np.ndarray]:
        """Decrypt (if needed), lift to signed integers, divide by n and unflatten."""
        spec = codec.QuantSpec(self.spec.alpha, self.spec.bits, self.variant.t)
        if agg.values is not None:
            sums = np.asarray(agg.values)
        else:
            blocks = []
            remaining = -(-agg.length // agg.layout.width)
            for ct in agg.ciphertexts:
                take = min(agg.layout.lanes, remaining)
                blocks += agg.layout.unpack(decrypt(ct, self.keys.secret).values, take)
                remaining -= take
            sums = np.concatenate(blocks)
        return codec.decode_weights(sums[: agg.length], agg.n, shapes, spec)

    def evaluation_phase(self, agg: AggregateResult, shapes) -> tuple[EvalReport, list[np.ndarray]]:
        weights = self.decode_aggregate(agg, shapes)
        self.weights = weights
        m: EvalMetrics = evaluate(weights, self.shard.test)
        return EvalReport(self.client_id, m.accuracy, m.loss, m.count), weights


def client_training_phase(client: Client, global_weights, round_index: int) -> ClientUpdate:
    return client.training_phase(global_weights, round_index)


def client_evaluation_phase(agg: AggregateResult, client: Client, shapes) -> EvalReport:
    return client.evaluation_phase(agg, shapes)[0]


# -- server side


@dataclass(eq=False)
class Server:
    """Holds only the server key share; never sees HE_sk or any sk_i."""

    keys: ServerKeyShare | None
    params: BfvParams
    variant: PastaVariant
    mode: str = "hhe"
    spec: codec.QuantSpec = field(default_factory=codec.QuantSpec)
    full_slots: bool = False
    lanes: int | None = None
    _hesd: HesdContext | None = field(default=None, repr=False)

    def hesd_context(self) -> HesdContext:
        if self._hesd is None:
            self._hesd = HesdContext(self.params, self.keys.eval_keys, self.variant, lanes=self.lanes)
        return self._hesd

    def aggregate(self, updates, length: int) -> tuple[AggregateResult, dict]:
        """Weighted sum over the surviving updates; returns timings per client too."""
        updates = [u for u in updates if u is not None]
        if not updates:
            raise RoundAborted("no client update survived the round")
        require_constraint([u.n_k for u in updates], self.spec)
        timings: dict[int, float] = {}
        n = sum(u.n_k for u in updates)
        ids = tuple(u.client_id for u in updates)
        t0 = time.perf_counter()
        if self.mode == "plain":
            acc = np.zeros_like(updates[0].values)
            for u in updates:
                acc = (acc + u.n_k * u.values) % P
            timings["agg"] = time.perf_counter() - t0
            return AggregateResult("plain", n, ids, length, values=acc), timings
        if self.mode == "bfv":
            cts = self._weighted_sum([(u.n_k, u.ciphertexts) for u in updates])
            timings["agg"] = time.perf_counter() - t0
            layout = bfv_layout(self.variant.t, self.params, self.full_slots)
            return AggregateResult("bfv", n, ids, length, layout, ciphertexts=cts), timings
        ctx = self.hesd_context()
        terms = []
        hesd_total = 0.0
        for u in updates:
            start = time.perf_counter()
            nonce = BlockNonce.for_round(u.round, u.client_id)
            batches = ctx.hesd_chunks(u.chunks, nonce, u.sk_he)
            timings[u.client_id] = time.perf_counter() - start
            hesd_total += timings[u.client_id]
            terms.append((u.n_k, [b.ciphertext for b in batches]))
        start = time.perf_counter()
        cts = self._weighted_sum(terms)
        timings["agg"] = time.perf_counter() - start
        layout = hhe_layout(self.variant, self.params, ctx.lanes)
        return AggregateResult("hhe", n, ids, length, layout, ciphertexts=cts), timings

    @staticmethod
    def _weighted_sum(terms) -> list[BfvCiphertext]:
        counts = {len(cts) for _, cts in terms}
        if len(counts) != 1:
            raise ProtocolError("clients uploaded different numbers of ciphertexts")
        out = None
        for n_k, cts in terms:
            scaled = [he_plain_mul(c, n_k) for c in cts]
            out = scaled if out is None else [he_add(a, b) for a, b in zip(out, scaled)]
        return out


def server_aggregation_phase(server: Server, updates, length: int) -> AggregateResult:
    return server.aggregate(updates, length)[0]


def server_evaluation_phase(reports) -> GlobalMetrics:
    """Test-count weighted mean of the reported accuracy and loss."""
    reports = [r for r in reports if r is not None]
    if not reports:
        raise RoundAborted("no evaluation report arrived")
    w = np.array([r.count for r in reports], dtype=np.float64)
    acc = float(np.dot(w, [r.accuracy for r in reports]) / w.sum())
    loss = float(np.dot(w, [r.loss for r in reports]) / w.sum())
    return GlobalMetrics(acc, loss, int(w.sum()))


def select_clients(pool, k: int, round_index: int, seed: Seed = 0) -> list[int]:
    """k clients uniformly without replacement, fixed by (seed, round)."""
    pool = sorted(pool)
    if not 0 <= k <= len(pool):
        raise ParameterError(f"cannot select {k} of {len(pool)} clients")
    rng = make_rng(seed, "select", round_index)
    return sorted(int(x) for x in rng.choice(pool, size=k, replace=False))


def quantized_oracle(weight_sets, counts, spec: codec.QuantSpec) -> np.ndarray:
    """Plain integer sum_k n_k q_k (no modular reduction) for testing aggregates."""
    total = None
    for w, n_k in zip(weight_sets, counts):
        q = codec.pad(codec.quantize(codec.flatten(w), spec), spec.chunk) * n_k
        total = q if total is None else total + q
    return total


__all__ = [
    "AggregateResult",
    "Client",
    "ClientKeyShare",
    "ClientUpdate",
    "Dataset",
    "EvalReport",
    "GlobalMetrics",
    "Server",
    "ServerKeyShare",
    "SlotLayout",
    "TpaKeyBundle",
    "check_constraint",
    "client_evaluation_phase",
    "client_training_phase",
    "model_shapes",
    "select_clients",
    "server_aggregation_phase",
    "server_evaluation_phase",
    "tpa_setup",
]
