"""Command line: keygen, run-sim, run-server, run-client, bench-hesd, report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from hhefl.bfv.params import BfvParams
from hhefl.errors import HhefError
from hhefl.experiment import (
    ExperimentConfig,
    MetricsSink,
    bench_hesd,
    build_client,
    client_loop,
    load_config,
    load_dataset,
    model_sizes,
    read_metrics,
    run_experiment,
    server_loop,
    write_metrics,
)
from hhefl.learner import init_model, model_shapes, partition_iid
from hhefl.pasta import PastaVariant
from hhefl.protocol import Server, tpa_setup
from hhefl.transport import TcpListener, connect, parse_endpoint
from hhefl.wire import (
    Message,
    MsgType,
    decode_keys,
    encode_client_keys,
    encode_server_keys,
)


def _config(args) -> ExperimentConfig:
    overrides = {"mode": args.mode, "seed": args.seed}
    if getattr(args, "transport", None):
        overrides["transport"] = args.transport
    return load_config(args.config, overrides)


def _write_frame(path: Path, payload: bytes) -> None:
    path.write_bytes(Message(MsgType.KEYS, 0, payload).to_bytes())


def _read_keys(path: Path, params: BfvParams):
    msg = Message.from_bytes(path.read_bytes())
    return decode_keys(msg.payload, params)[2]


def cmd_keygen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = tpa_setup(cfg.clients, cfg.params, cfg.variant, cfg.seed, rotations=cfg.mode == "hhe")
    _write_frame(out / "server.keys", encode_server_keys(bundle.server))
    for share in bundle.clients:
        _write_frame(out / f"client-{share.client_id}.keys", encode_client_keys(share))
    print(f"wrote server.keys and {cfg.clients} client key files to {out}")
    return 0


def _summary(metrics) -> None:
    for r, m in enumerate(metrics, 1):
        print(f"round {r:3d}  accuracy {m.accuracy:.4f}  loss {m.loss:.4f}")


def cmd_run_sim(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, out_dir=args.out)
    _summary(result.metrics)
    if result.dropped:
        print("dropped (round, client):", result.dropped)
    print(f"metrics written to {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_run_server(args) -> int:
    cfg = _config(args)
    if not cfg.transport.startswith("tcp:"):
        raise SystemExit("run-server needs --transport tcp:HOST:PORT")
    share = _read_keys(Path(args.keys) / "server.keys", cfg.params)
    init = init_model(model_sizes(cfg, load_dataset(cfg)), seed=cfg.seed)
    server = Server(share, cfg.params, cfg.variant, cfg.mode, cfg.quant, cfg.bfv_packing == "full", cfg.lanes or None)
    listener = TcpListener(*parse_endpoint(cfg.transport[4:]))
    print(f"listening on {listener.address[0]}:{listener.address[1]} for {cfg.clients} clients")
    links = {}
    try:
        while len(links) < cfg.clients:
            ch = listener.accept(cfg.timeout)
            hello = ch.recv(timeout=cfg.timeout)
            _, cid, _ = decode_keys(hello.payload, cfg.params)
            links[cid] = ch
        sink = MetricsSink()
        history, _, dropped = server_loop(links, server, cfg, init, sink)
    finally:
        for ch in links.values():
            ch.close()
        listener.close()
    write_metrics(sink.records(), Path(args.out) / "server-metrics.csv")
    _summary(history)
    return 0


def cmd_run_client(args) -> int:
    cfg = _config(args)
    if not cfg.transport.startswith("tcp:"):
        raise SystemExit("run-client needs --transport tcp:HOST:PORT")
    share = _read_keys(Path(args.keys) / f"client-{args.client_id}.keys", cfg.params)
    ds = load_dataset(cfg)
    shard = partition_iid(ds, cfg.clients, seed=cfg.seed).shards[args.client_id]
    client = build_client(cfg, share, shard)
    shapes = model_shapes(init_model(model_sizes(cfg, ds), seed=cfg.seed))
    sink = MetricsSink()
    client_loop(connect(*parse_endpoint(cfg.transport[4:]), timeout=cfg.timeout), client, shapes, sink)
    write_metrics(sink.records(), Path(args.out) / f"client-{args.client_id}-metrics.csv")
    return 0


def cmd_bench_hesd(args) -> int:
    counts = [int(x) for x in args.params.split(",")]
    table = bench_hesd(
        PastaVariant.named(args.pasta),
        counts,
        BfvParams.preset(args.bfv),
        seed=args.seed or 0,
        lanes=args.lanes,
        log=lambda r: print(f"P={r.params:6d}  chunks={r.chunks:4d}  total={r.total_s:8.2f}s  per-chunk={r.per_chunk_s * 1e3:8.2f}ms"),
    )
    print(f"fit: {table.slope_s_per_param * 1e3:.4f} ms/param + {table.intercept_s:.3f} s, R^2 = {table.r2:.5f}, per-chunk CoV = {table.chunk_cov:.3%}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "hesd-scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["params", "chunks", "total_s", "per_chunk_s"])
        for r in table.rows:
            w.writerow([r.params, r.chunks, f"{r.total_s:.6f}", f"{r.per_chunk_s:.6f}"])
    return 0


def cmd_report(args) -> int:
    records = read_metrics(args.metrics)
    rounds = sorted({r.round for r in records})
    print(f"{'round':>5} {'accuracy':>9} {'loss':>8} {'up MB':>10} {'down MB':>10} {'hesd s':>9}")
    for rnd in rounds:
        rows = [r for r in records if r.round == rnd]
        glob = next((r for r in rows if r.phase == "global"), None)
        up = sum(r.bytes_up for r in rows) / 1e6
        down = sum(r.bytes_down for r in rows) / 1e6
        hesd = sum(r.t_hesd_ms for r in rows) / 1e3
        acc = glob.accuracy if glob else float("nan")
        loss = glob.loss if glob else float("nan")
        print(f"{rnd:5d} {acc:9.4f} {loss:8.4f} {up:10.3f} {down:10.3f} {hesd:9.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hhefl", description="Federated learning with hybrid homomorphic encryption.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, transport=True):
        p.add_argument("--config", required=True, help="key = value experiment file")
        p.add_argument("--mode", choices=["plain", "bfv", "hhe"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out", help="output directory")
        if transport:
            p.add_argument("--transport", help="inprocess, tcp or tcp:HOST:PORT")

    p = sub.add_parser("keygen", help="TPA: generate and write every key share")
    common(p, transport=False)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("run-sim", help="run server and all clients in one process")
    common(p)
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("run-server", help="serve rounds to TCP clients")
    common(p)
    p.add_argument("--keys", required=True, help="directory written by keygen")
    p.set_defaults(func=cmd_run_server)

    p = sub.add_parser("run-client", help="join a TCP server as one client")
    common(p)
    p.add_argument("--keys", required=True)
    p.add_argument("--client-id", type=int, required=True)
    p.set_defaults(func=cmd_run_client)

    p = sub.add_parser("bench-hesd", help="HESD time versus parameter count")
    p.add_argument("--pasta", default="pasta-4")
    p.add_argument("--bfv", default="bfv-16384")
    p.add_argument("--params", default="1000,2000,4000,8000")
    p.add_argument("--lanes", type=int, help="chunks per ciphertext (default: as many as fit)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_bench_hesd)

    p = sub.add_parser("report", help="summarize a metrics CSV per round")
    p.add_argument("metrics")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (HhefError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
