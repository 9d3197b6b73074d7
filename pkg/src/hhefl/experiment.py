"""Experiment configuration, the message-driven round loop, metrics and benchmarks."""

from __future__ import annotations

import csv
import logging
import os
import threading
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from hhefl import codec
from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import encrypt, keygen
from hhefl.errors import (
    ConfigurationError,
    DecryptionIntegrityError,
    ParameterError,
    PeerTimeout,
    PeerUnavailable,
    ProtocolError,
    RoundAborted,
    TrainingDiverged,
)
from hhefl.hesd import HesdContext, rotation_steps
from hhefl.learner import (
    IDX_IMAGES,
    Dataset,
    TrainConfig,
    init_model,
    load_idx,
    model_shapes,
    partition_iid,
    read_idx,
    synthetic,
)
from hhefl.pasta import BlockNonce, PastaKey, PastaVariant, encrypt_vector
from hhefl.protocol import (
    MODES,
    Client,
    GlobalMetrics,
    Server,
    batch_count,
    check_constraint,
    aggregation_bound,
    select_clients,
    server_evaluation_phase,
    tpa_setup,
)
from hhefl.rand import make_rng
from hhefl.transport import Channel, TcpListener, connect, parse_endpoint, pipe
from hhefl.wire import (
    Message,
    MsgType,
    Phase,
    UpdateSizes,
    decode_aggregate,
    decode_keys,
    decode_plain_weights,
    decode_report,
    decode_select,
    decode_update,
    encode_aggregate,
    encode_announce,
    encode_plain_weights,
    encode_report,
    encode_select,
    encode_update,
)

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    clients: int = 12
    train_clients: int = 4
    eval_clients: int = 0  # 0: every live client
    rounds: int = 10
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.001
    patience: int = 2
    alpha: float = 5.0
    bits: int = 8
    pasta: str = "pasta-3"
    bfv: str = "bfv-16384"
    seed: int = 0
    dataset: str = "synthetic"
    samples: int = 6000
    features: int = 784
    model: str = "paper-size"
    transport: str = "inprocess"
    timeout: float = 600.0
    bfv_packing: str = "chunked"
    lanes: int = 0
    drop: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if min(self.clients, self.train_clients) < 1 or self.eval_clients < 0 or self.rounds < 0:
            raise ConfigurationError("client counts must be positive and rounds non-negative")
        if self.train_clients > self.clients or self.eval_clients > self.clients:
            raise ConfigurationError("cannot select more clients per phase than exist")
        if self.bfv_packing not in ("chunked", "full"):
            raise ConfigurationError("bfv_packing is 'chunked' or 'full'")
        if self.transport != "inprocess" and not self.transport.startswith("tcp"):
            raise ConfigurationError("transport is 'inprocess' or 'tcp[:host:port]'")
        PastaVariant.named(self.pasta)
        BfvParams.preset(self.bfv)

    @property
    def variant(self) -> PastaVariant:
        return PastaVariant.named(self.pasta)

    @property
    def params(self) -> BfvParams:
        return BfvParams.preset(self.bfv)

    @property
    def quant(self) -> codec.QuantSpec:
        return codec.QuantSpec(self.alpha, self.bits, self.variant.t)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.patience)


def _parse_drop(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.replace(",", " ").split():
        r, _, c = item.partition(":")
        out.append((int(r), int(c)))
    return tuple(out)


_CASTS = {int: int, float: float, str: str}


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys and bad
    values are reported with their line number."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip().lower(), val.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            if key == "drop":
                values[key] = _parse_drop(val)
            else:
                typ = type(getattr(ExperimentConfig, key, "")) if key != "mode" else str
                values[key] = _CASTS.get(typ, str)(val)
        except ValueError:
            raise ConfigurationError(f"{source}:{lineno}: bad value {val!r} for {key}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "mode" not in values:
        raise ConfigurationError(f"{source}: 'mode' is required (plain, bfv or hhe)")
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a config file.  HHEFL_SEED in the environment replaces its seed;
    explicit ``overrides`` (e.g. CLI flags) win over both."""
    path = Path(path)
    over = {}
    if os.environ.get("HHEFL_SEED"):
        over["seed"] = int(os.environ["HHEFL_SEED"])
    over.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(path.read_text(), str(path), over)


def dataset_size(cfg: ExperimentConfig) -> int:
    if cfg.dataset == "synthetic":
        return cfg.samples
    images, _ = _idx_paths(cfg.dataset)
    n = read_idx(images, IDX_IMAGES).shape[0]
    return min(n, cfg.samples) if cfg.samples else n


def expected_batches(cfg: ExperimentConfig) -> int:
    """Batch count of the largest shard under the IID split."""
    shard = -(-dataset_size(cfg) // cfg.clients)
    train = shard - int(round(shard * 0.2))
    fit = train - int(round(train * 0.2))
    return fit // cfg.batch_size


def validate(cfg: ExperimentConfig) -> None:
    n_k = expected_batches(cfg)
    if n_k < 1:
        raise ConfigurationError("shards are too small for a single training batch")
    if not check_constraint(n_k, cfg.train_clients, cfg.quant):
        raise ConfigurationError(
            f"{cfg.train_clients} training clients x {n_k} batches: {cfg.quant.qmax} * {n_k * cfg.train_clients} "
            f"is not below p // 2 = 32768 (at most {aggregation_bound(cfg.quant)} batches per round)"
        )


def _idx_paths(spec: str) -> tuple[str, str]:
    if not spec.startswith("idx:") or "," not in spec:
        raise ConfigurationError("dataset is 'synthetic' or 'idx:<images>,<labels>'")
    images, labels = spec[4:].split(",", 1)
    return images.strip(), labels.strip()


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        return synthetic(cfg.samples, cfg.features, seed=cfg.seed)
    ds = load_idx(*_idx_paths(cfg.dataset))
    if cfg.samples and cfg.samples < len(ds):
        ds = ds.subset(make_rng(cfg.seed, "subsample").permutation(len(ds))[: cfg.samples])
    return ds


# ---------------------------------------------------------------------------
# metrics

CSV_HEADER = [
    "round",
    "client_id",
    "phase",
    "bytes_up",
    "bytes_down",
    "t_train_ms",
    "t_encrypt_ms",
    "t_decrypt_ms",
    "t_hesd_ms",
    "t_agg_ms",
    "accuracy",
    "loss",
]
GLOBAL_CLIENT = -1


@dataclass
class RoundRecord:
    """One CSV row.  client_id -1 marks the per-round global row."""

    round: int
    client_id: int
    phase: str
    bytes_up: int = 0
    bytes_down: int = 0
    t_train_ms: float = 0.0
    t_encrypt_ms: float = 0.0
    t_decrypt_ms: float = 0.0
    t_hesd_ms: float = 0.0
    t_agg_ms: float = 0.0
    accuracy: float = float("nan")
    loss: float = float("nan")

    def __post_init__(self):
        if min(self.bytes_up, self.bytes_down) < 0:
            raise ParameterError("byte counts are non-negative")


_PHASE_ORDER = {"train": 0, "eval": 1, "global": 2}


class MetricsSink:
    """Append-only, thread-safe collection keyed by (round, client, phase)."""

    def __init__(self):
        self._rows: dict[tuple[int, int, str], RoundRecord] = {}
        self._lock = threading.Lock()

    def add(self, round_index: int, client_id: int, phase: str, **values) -> None:
        with self._lock:
            key = (round_index, client_id, phase)
            row = self._rows.setdefault(key, RoundRecord(round_index, client_id, phase))
            for k, v in values.items():
                setattr(row, k, getattr(row, k) + v if k.startswith(("bytes", "t_")) else v)

    def records(self) -> list[RoundRecord]:
        with self._lock:
            rows = list(self._rows.values())
        return sorted(rows, key=lambda r: (r.round, _PHASE_ORDER.get(r.phase, 9), r.client_id))


def write_metrics(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([getattr(r, k) for k in CSV_HEADER])
    return path


def read_metrics(path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ProtocolError(f"{path}: unexpected CSV header")
        out = []
        for row in reader:
            vals = dict(zip(header, row))
            out.append(
                RoundRecord(
                    int(vals["round"]),
                    int(vals["client_id"]),
                    vals["phase"],
                    int(vals["bytes_up"]),
                    int(vals["bytes_down"]),
                    *(float(vals[k]) for k in CSV_HEADER[5:]),
                )
            )
        return out


# ---------------------------------------------------------------------------
# the round loop


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    metrics: list[GlobalMetrics]
    weights: list[np.ndarray]
    aggregates: list[np.ndarray] = field(default_factory=list, repr=False)
    dropped: list[tuple[int, int]] = field(default_factory=list)

    @property
    def final(self) -> GlobalMetrics | None:
        return self.metrics[-1] if self.metrics else None


def client_loop(channel: Channel, client: Client, shapes, sink: MetricsSink, kill_rounds=frozenset()) -> None:
    """Serve one client until the server says FINISH (or the channel dies)."""
    weights = None
    params = client.params
    try:
        channel.send(Message(MsgType.KEYS, 0, encode_announce(client.client_id)))
        while True:
            down0 = channel.bytes_received
            msg = channel.recv()
            if msg.type is MsgType.ABORT:
                return
            if msg.type is not MsgType.SELECT:
                raise ProtocolError(f"client {client.client_id}: unexpected {msg.type.name}")
            phase, model_follows, _ = decode_select(msg.payload)
            r = msg.round
            if phase is Phase.FINISH:
                return
            if phase is Phase.TRAIN:
                if r in kill_rounds:
                    return  # simulated crash: the channel closes in finally
                if model_follows:
                    model = channel.recv()
                    if model.type is MsgType.GLOBAL_PLAIN:
                        weights = decode_plain_weights(model.payload)
                    else:
                        weights = client.decode_aggregate(decode_aggregate(model.payload, params), shapes)
                up0 = channel.bytes_sent
                try:
                    update = client.training_phase(weights, r)
                except TrainingDiverged as exc:
                    channel.send(Message(MsgType.ABORT, r, str(exc).encode()))
                    continue
                payload, _ = encode_update(update)
                channel.send(Message(MsgType.UPDATE, r, payload))
                sink.add(
                    r,
                    client.client_id,
                    "train",
                    bytes_up=channel.bytes_sent - up0,
                    bytes_down=channel.bytes_received - down0,
                    t_train_ms=1e3 * update.timings["train"],
                    t_encrypt_ms=1e3 * update.timings["encrypt"],
                )
            else:
                model = channel.recv()
                t0 = time.perf_counter()
                up0 = channel.bytes_sent
                try:
                    report, weights = client.evaluation_phase(decode_aggregate(model.payload, params), shapes)
                except DecryptionIntegrityError as exc:
                    channel.send(Message(MsgType.ABORT, r, str(exc).encode()))
                    continue
                elapsed = time.perf_counter() - t0
                channel.send(Message(MsgType.EVAL_REPORT, r, encode_report(report)))
                sink.add(
                    r,
                    client.client_id,
                    "eval",
                    bytes_up=channel.bytes_sent - up0,
                    bytes_down=channel.bytes_received - down0,
                    t_decrypt_ms=1e3 * elapsed,
                    accuracy=report.accuracy,
                    loss=report.loss,
                )
    except PeerUnavailable:
        return
    finally:
        channel.close()


def server_loop(links: dict[int, Channel], server: Server, cfg: ExperimentConfig, init_weights, sink: MetricsSink, audit=None):
    """Drive cfg.rounds rounds over the given client links.

    Returns (global metrics per round, encoded aggregates per round, dropped
    (round, client) pairs).  ``audit`` sees every server-bound message."""
    shapes = model_shapes(init_weights)
    length = sum(int(np.prod(s)) for s in shapes)
    alive = set(links)
    reported: set[int] = set()
    last_agg: bytes | None = None
    history, aggregates, dropped = [], [], []

    def drop(r, cid):
        """The peer is gone: exclude it from this and every later round."""
        dropped.append((r, cid))
        alive.discard(cid)
        links[cid].close()

    def recv(cid, r, kinds, deadline):
        """Next message of one of ``kinds`` for round r; leftovers a late
        client sends for an earlier round or phase are discarded."""
        while True:
            msg = links[cid].recv(timeout=max(0.0, deadline - time.monotonic()))
            if audit:
                audit(msg)
            if msg.round > r:
                raise ProtocolError(f"client {cid} answered for round {msg.round} in round {r}")
            if msg.round == r and msg.type in kinds:
                return msg
            log.info("discarding late %s from client %d (round %d)", msg.type.name, cid, msg.round)

    def collect(ids, r, kinds):
        """{cid: message} from every live client in ids that answers by the deadline."""
        deadline = time.monotonic() + cfg.timeout
        got = {}
        for cid in ids:
            if cid not in alive:
                continue
            try:
                got[cid] = recv(cid, r, kinds, deadline)
            except PeerTimeout:
                dropped.append((r, cid))  # missed the deadline; eligible again next round
            except PeerUnavailable:
                drop(r, cid)
        return got

    def send(cid, *msgs):
        try:
            for m in msgs:
                links[cid].send(m)
        except PeerUnavailable:
            drop(r, cid)

    for r in range(1, cfg.rounds + 1):
        if not alive:
            raise RoundAborted(f"round {r}: every client has left")
        chosen = select_clients(alive, min(cfg.train_clients, len(alive)), r, cfg.seed)
        for cid in chosen:
            if r == 1:
                model = Message(MsgType.GLOBAL_PLAIN, r, encode_plain_weights(init_weights))
            elif cid not in reported:
                model = Message(MsgType.GLOBAL_CT, r, last_agg)
            else:
                model = None
            select = Message(MsgType.SELECT, r, encode_select(Phase.TRAIN, chosen, model_follows=model is not None))
            send(cid, *([select] if model is None else [select, model]))
        updates = []
        for cid, msg in collect(chosen, r, {MsgType.UPDATE, MsgType.ABORT}).items():
            if msg.type is MsgType.ABORT:
                dropped.append((r, cid))
            else:
                updates.append(decode_update(msg.payload, server.params, server.variant))
        try:
            agg, timings = server.aggregate(updates, length)
        except RoundAborted as exc:
            raise RoundAborted(f"round {r}: {exc}") from exc
        for u in updates:
            sink.add(r, u.client_id, "train", t_hesd_ms=1e3 * timings.get(u.client_id, 0.0))
        last_agg = encode_aggregate(agg)
        aggregates.append(last_agg)

        pool = sorted(alive)
        evaluators = pool if not cfg.eval_clients or cfg.eval_clients >= len(pool) else select_clients(pool, cfg.eval_clients, r, (cfg.seed, "eval"))
        for cid in evaluators:
            send(cid, Message(MsgType.SELECT, r, encode_select(Phase.EVALUATE, evaluators, model_follows=True)), Message(MsgType.GLOBAL_CT, r, last_agg))
        answers = collect(evaluators, r, {MsgType.EVAL_REPORT, MsgType.ABORT})
        reports = [decode_report(m.payload) for m in answers.values() if m.type is MsgType.EVAL_REPORT]
        reported = {cid for cid, m in answers.items() if m.type is MsgType.EVAL_REPORT}
        metrics = server_evaluation_phase(reports)
        history.append(metrics)
        sink.add(
            r,
            GLOBAL_CLIENT,
            "global",
            t_agg_ms=1e3 * timings["agg"],
            accuracy=metrics.accuracy,
            loss=metrics.loss,
        )
    for cid in sorted(alive):
        try:
            links[cid].send(Message(MsgType.SELECT, cfg.rounds, encode_select(Phase.FINISH, [])))
        except PeerUnavailable:
            pass
    return history, aggregates, dropped


def build_client(cfg: ExperimentConfig, share, shard) -> Client:
    batch_count(shard, cfg.batch_size)
    return Client(
        share,
        shard,
        cfg.params,
        cfg.variant,
        cfg.mode,
        cfg.quant,
        cfg.train_config,
        seed=cfg.seed,
        full_slots=cfg.bfv_packing == "full",
    )


def build_clients(cfg: ExperimentConfig, bundle, ds: Dataset) -> list[Client]:
    plan = partition_iid(ds, cfg.clients, seed=cfg.seed)
    return [build_client(cfg, bundle.clients[i], plan.shards[i]) for i in range(cfg.clients)]


def run_experiment(cfg: ExperimentConfig, out_dir=None, bundle=None, dataset: Dataset | None = None, audit=None) -> ExperimentResult:
    """Run the full simulation (server plus every client) in this process."""
    validate(cfg)
    ds = dataset if dataset is not None else load_dataset(cfg)
    init = init_model(model_sizes(cfg, ds), seed=cfg.seed)
    if cfg.rounds == 0:
        return ExperimentResult([], [], init)
    bundle = bundle or tpa_setup(cfg.clients, cfg.params, cfg.variant, cfg.seed, rotations=cfg.mode == "hhe")
    clients = build_clients(cfg, bundle, ds)
    server = Server(bundle.server, cfg.params, cfg.variant, cfg.mode, cfg.quant, cfg.bfv_packing == "full", cfg.lanes or None)
    sink = MetricsSink()
    shapes = model_shapes(init)
    kills: dict[int, set[int]] = {}
    for r, c in cfg.drop:
        kills.setdefault(c, set()).add(r)

    listener = None
    links: dict[int, Channel] = {}
    ends: list[Channel] = []
    if cfg.transport == "inprocess":
        pairs = [pipe() for _ in clients]
        ends = [b for _, b in pairs]
        server_ends = [a for a, _ in pairs]
    else:
        host, port = ("127.0.0.1", 0) if cfg.transport == "tcp" else parse_endpoint(cfg.transport[4:])
        listener = TcpListener(host, port)
    threads = []
    try:
        for i, c in enumerate(clients):
            if listener is not None:
                ends.append(connect(*listener.address, timeout=cfg.timeout))
            th = threading.Thread(target=client_loop, args=(ends[i], c, shapes, sink, frozenset(kills.get(i, ()))), daemon=True)
            threads.append(th)
        for th in threads:
            th.start()
        candidates = server_ends if listener is None else [listener.accept(cfg.timeout) for _ in clients]
        for ch in candidates:
            hello = ch.recv(timeout=cfg.timeout)
            if audit:
                audit(hello)
            if hello.type is not MsgType.KEYS:
                raise ProtocolError("expected a client announcement")
            _, cid, _ = decode_keys(hello.payload, cfg.params)
            links[cid] = ch
        history, aggregates, dropped = server_loop(links, server, cfg, init, sink, audit)
    finally:
        for th in threads:
            th.join(timeout=cfg.timeout)
        for ch in links.values():
            ch.close()
        if listener is not None:
            listener.close()
    final = next((c.weights for c in clients if c.weights is not None), init)
    result = ExperimentResult(sink.records(), history, final, aggregates, dropped)
    if out_dir is not None:
        write_metrics(result.records, Path(out_dir) / "metrics.csv")
    return result


def model_sizes(cfg: ExperimentConfig, ds: Dataset):
    from hhefl.learner import MODEL_PRESETS

    sizes = list(MODEL_PRESETS[cfg.model]) if cfg.model in MODEL_PRESETS else [int(x) for x in cfg.model.split("-")]
    sizes[0], sizes[-1] = ds.features, ds.n_classes
    return tuple(sizes)


# ---------------------------------------------------------------------------
# communication and HESD benchmarks


def measure_upload(update) -> UpdateSizes:
    """Exact bytes of an update frame, split into weights and key payloads."""
    payload, sizes = encode_update(update)
    frame = Message(MsgType.UPDATE, update.round, payload).wire_size
    return replace(sizes, total=frame)


@dataclass(frozen=True)
class ScalingRow:
    params: int
    chunks: int
    total_s: float
    per_chunk_s: float


@dataclass(frozen=True)
class ScalingTable:
    rows: list[ScalingRow]
    slope_s_per_param: float
    intercept_s: float
    r2: float
    chunk_cov: float


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot else 1.0
    return float(slope), float(intercept), r2


def bench_hesd(variant: PastaVariant, param_counts, params: BfvParams, seed: int = 0, lanes: int | None = None, log=None) -> ScalingTable:
    """Time HESD over ceil(P/t) chunks for each parameter count P."""
    counts = list(param_counts)
    if counts != sorted(counts):
        raise ParameterError("parameter counts must be sorted ascending")
    keys = keygen(params, rotation_steps(variant, params), seed=seed)
    ctx = HesdContext(params, keys.evaluation_keys(), variant, lanes=lanes)
    rng = make_rng(seed, "bench-hesd")
    pk = PastaKey.generate(variant, rng)
    slots = np.zeros(params.n, dtype=np.int64)
    slots[: variant.key_size] = pk.values
    ctx.set_encrypted_key(encrypt(slots, keys.public, rng))
    rows = []
    for count in counts:
        n_chunks = -(-count // variant.t)
        values = rng.integers(0, 2**16, size=n_chunks * variant.t)
        nonce = BlockNonce.for_round(1, count)
        chunks = encrypt_vector(values, pk, nonce, variant)
        t0 = time.perf_counter()
        ctx.hesd_chunks(chunks, nonce)
        total = time.perf_counter() - t0
        rows.append(ScalingRow(count, n_chunks, total, total / n_chunks))
        if log:
            log(rows[-1])
    slope, intercept, r2 = linear_fit([r.params for r in rows], [r.total_s for r in rows])
    per = np.array([r.per_chunk_s for r in rows])
    cov = float(per.std() / per.mean()) if len(per) > 1 else 0.0
    return ScalingTable(rows, slope, intercept, r2, cov)
