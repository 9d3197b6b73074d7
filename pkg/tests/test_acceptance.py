"""End-to-end acceptance checks, one per criterion, each printing a PASS/FAIL line.

Slow: the full-size ring (N = 16384) cases take several minutes on one core.
"""

import dataclasses
import time
import types

import numpy as np
import pytest

import test_bfv
import test_field_ring
import test_pasta
from fedutil import decrypt_sums, make_update
from gradcheck import max_relative_error
from hhefl import codec
from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import PublicKey, SecretKey, decrypt, encrypt, keygen
from hhefl.bfv.serialize import secret_key_to_bytes
from hhefl.experiment import ExperimentConfig, bench_hesd, measure_upload, run_experiment
from hhefl.field import P
from hhefl.hesd import HesdContext, rotation_steps, unpack_lanes
from hhefl.learner import init_model, synthetic
from hhefl.pasta import PASTA3, PASTA4, BlockNonce, PastaKey, encrypt_vector
from hhefl.protocol import ClientKeyShare, Server, check_constraint, server_aggregation_phase, tpa_setup

FULL = BfvParams.preset("bfv-16384")
TOY = BfvParams.preset("toy-1024x14")


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def full_bundle():
    return tpa_setup(4, FULL, PASTA4, seed=2024)


# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", [PASTA4, PASTA3], ids=lambda v: v.name)
def test_c1_transciphering_matches_plaintext(variant, full_bundle, verdict):
    if variant is PASTA4:
        public, secret, ek = full_bundle.clients[0].public, full_bundle.clients[0].secret, full_bundle.server.eval_keys
    else:
        keys = keygen(FULL, rotation_steps(variant, FULL), seed=77)
        public, secret, ek = keys.public, keys.secret, keys.evaluation_keys()
    rng = np.random.default_rng(variant.t)
    ctx = HesdContext(FULL, ek, variant)
    key = PastaKey.generate(variant, rng)
    ctx.set_encrypted_key(encrypt(key.values, public, rng))
    nonce = BlockNonce.for_round(1, 0)
    values = rng.integers(0, P, 100 * variant.t)
    t0 = time.perf_counter()
    batches = ctx.hesd_chunks(encrypt_vector(values, key, nonce, variant), nonce)
    elapsed = time.perf_counter() - t0
    row = FULL.row_size
    got = np.concatenate([np.concatenate(unpack_lanes(decrypt(b.ciphertext, secret).values[:row], variant.t, len(b))) for b in batches])
    wrong = int(np.count_nonzero(got != values))
    verdict(1, wrong == 0, f"{variant.name} at N=16384: 100 chunks, {wrong} wrong values, {len(batches)} batches in {elapsed:.1f} s")


def test_c2_hhe_aggregate_is_exact(verdict):
    bundle = tpa_setup(4, TOY, PASTA4, seed=8)
    server = Server(bundle.server, TOY, PASTA4, "hhe")
    rng = np.random.default_rng(2)
    bad = 0
    for trial in range(50):
        k = int(rng.integers(1, 5))
        if trial == 0:
            k, ns = 4, np.full(4, 63)
        else:
            ns = rng.multinomial(int(rng.integers(k, 253)) - k, np.ones(k) / k) + 1
        assert ns.sum() <= 252
        qs = [rng.integers(-127, 128, 64) for _ in range(k)]
        if trial % 10 == 1:
            qs = [np.full(64, 127 * (-1) ** i) for i in range(k)]
        ups = [make_update(bundle, i, q, int(n), "hhe", round_index=trial + 1, seed=trial) for i, (q, n) in enumerate(zip(qs, ns))]
        agg = server_aggregation_phase(server, ups, 64)
        oracle = sum(int(n) * q.astype(np.int64) for n, q in zip(ns, qs))
        bad += not np.array_equal(decrypt_sums(agg, bundle.clients[0].secret), oracle)
    verdict(2, bad == 0, f"50 HHE trials (K <= 4, sum n_k <= 252): {bad} mismatches against the integer oracle")


def _wraps(counts) -> bool:
    """Push both extreme aggregates through the field and see if they survive."""
    total = sum(counts)
    for q in (127, -127):
        field = 0
        for n in counts:
            field = (field + n * int(codec.encode_unsigned(np.array([q]))[0])) % P
        if int(codec.decode_centered(np.array([field]))[0]) != q * total:
            return True
    return False


def test_c3_constraint_matches_wraparound_oracle(verdict):
    rng = np.random.default_rng(3)
    disagree = 0
    configs = [[63] * 4]
    while len(configs) < 10_000:
        k = int(rng.integers(1, 17))
        hi = max(2, int(rng.integers(1, 2 * 300 // k + 2)))
        configs.append([int(x) for x in rng.integers(1, hi, k)])
    accepted = 0
    for counts in configs:
        ok = check_constraint(counts)
        accepted += ok
        disagree += ok == _wraps(counts)
    table_case = check_constraint(63, 4)
    verdict(
        3,
        disagree == 0 and table_case,
        f"10^4 configurations ({accepted} accepted): {disagree} disagreements; (63 batches, 4 clients) accepted={table_case}",
    )


def test_c4_quantization_error_bound(verdict):
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.uniform(-10, 10, 500_000), rng.normal(0, 2, 500_000)])
    spec = codec.QuantSpec(5.0, 8, 32)
    back = codec.average_dequantize(codec.quantize(x, spec), 1, spec)
    worst = float(np.max(np.abs(back - np.clip(x, -5, 5))))
    verdict(4, worst <= 5 / 254 + 1e-6, f"10^6 values: worst error {worst:.6f} vs bound {5 / 254 + 1e-6:.6f}")


def test_c5_upload_ratio(verdict):
    bundle = tpa_setup(1, FULL, PASTA4, seed=5, rotations=False)
    q = np.random.default_rng(5).integers(-127, 128, 8000)
    hhe = measure_upload(make_update(bundle, 0, q, 10, "hhe"))
    bfv_update = make_update(bundle, 0, q, 10, "bfv")
    bfv = measure_upload(bfv_update)
    del bfv_update
    w_ratio = bfv.weights / hhe.weights
    t_ratio = bfv.total / hhe.total
    verdict(
        5,
        w_ratio >= 1000 and t_ratio >= 20,
        f"P=8000 at N=16384: weights {bfv.weights} / {hhe.weights} B = {w_ratio:.0f}x; totals {bfv.total} / {hhe.total} B = {t_ratio:.1f}x",
    )


def test_c6_hesd_time_is_linear(verdict):
    table = bench_hesd(PASTA4, [1000, 2000, 4000, 8000], FULL, seed=6, lanes=32)
    rows = ", ".join(f"P={r.params}: {r.total_s:.1f} s" for r in table.rows)
    verdict(
        6,
        table.r2 >= 0.99 and table.chunk_cov < 0.10,
        f"PASTA-4 at N=16384, 32 chunks per ciphertext: R^2 = {table.r2:.4f}, per-chunk CoV = {table.chunk_cov:.2%} ({rows})",
    )


def test_c7_hhe_learns_like_plaintext(full_bundle, verdict):
    base = dict(
        clients=4, train_clients=4, eval_clients=4, rounds=3, epochs=10, batch_size=16, learning_rate=0.05,
        samples=2000, features=64, pasta="pasta-4", bfv="bfv-16384", seed=7,
    )
    plain = run_experiment(ExperimentConfig(mode="plain", **base), bundle=full_bundle)
    hhe = run_experiment(ExperimentConfig(mode="hhe", **base), bundle=full_bundle)
    gap = abs(hhe.final.accuracy - plain.final.accuracy) * 100
    verdict(
        7,
        gap <= 3.0,
        f"4 clients x 3 rounds, synthetic 2000 x 64: hhe {hhe.final.accuracy:.4f} vs plain {plain.final.accuracy:.4f} ({gap:.2f} points)",
    )


def test_c8_crypto_property_suites(small_params, small_keys, verdict):
    rng = np.random.default_rng(8)
    checks = [
        test_bfv.test_roundtrip_and_randomized_encryption,
        test_bfv.test_add_sub_negate_oracle,
        test_bfv.test_plain_add_and_plain_mul_oracle,
        test_bfv.test_mul_relin_oracle,
        test_bfv.test_rotate_oracle,
    ]
    for check in checks:
        check(small_params, small_keys, rng)
    for variant in test_pasta.SMALL:
        test_pasta.test_keystream_matches_naive_evaluator(variant)
        test_pasta.test_sym_roundtrip_1000_chunks(variant)
    for n in (2, 4, 8, 16, 32):
        test_field_ring.test_ring_mul_matches_schoolbook_1000_pairs(n)
    verdict(8, True, "BFV oracles (5 x 1000 cases), PASTA at t in {2, 4} vs naive, NTT vs schoolbook at N <= 32: all exact")


# ---------------------------------------------------------------------------
# key visibility


def _reachable(root):
    """Every object reachable from root through attributes and containers."""
    seen, stack, out = set(), [root], []
    while stack:
        obj = stack.pop()
        if id(obj) in seen or isinstance(obj, (type, types.ModuleType, types.FunctionType, types.BuiltinFunctionType, str, int, float)):
            continue
        seen.add(id(obj))
        out.append(obj)
        if isinstance(obj, dict):
            stack += list(obj.keys()) + list(obj.values())
        elif isinstance(obj, (list, tuple, set, frozenset)):
            stack += list(obj)
        elif isinstance(obj, np.ndarray):
            continue
        else:
            if dataclasses.is_dataclass(obj):
                stack += [getattr(obj, f.name) for f in dataclasses.fields(obj)]
            stack += list(getattr(obj, "__dict__", {}).values())
            stack += [getattr(obj, s) for s in getattr(type(obj), "__slots__", ()) if hasattr(obj, s)]
    return out


def _secret_arrays(bundle):
    sk = bundle.clients[0].secret
    return [sk.ntt, sk.small] + [c.pasta_key.values for c in bundle.clients]


def _leaks_in_state(server, bundle) -> list[str]:
    found = []
    secrets = _secret_arrays(bundle)
    for obj in _reachable(server):
        if isinstance(obj, (SecretKey, PastaKey, ClientKeyShare)):
            found.append(type(obj).__name__)
        elif isinstance(obj, np.ndarray) and any(obj.shape == s.shape and np.array_equal(obj, s) for s in secrets):
            found.append(f"array {obj.shape}")
    return found


def _secret_patterns(bundle):
    sk = bundle.clients[0].secret
    pats = [sk.small.astype(np.int8).tobytes(), secret_key_to_bytes(sk)[-256:]]
    for c in bundle.clients:
        pats += [c.pasta_key.values.astype("<u8").tobytes(), c.pasta_key.values.astype("<u4").tobytes()]
    return pats


def test_c9_server_never_holds_secret_keys(monkeypatch, verdict):
    cfg = ExperimentConfig(
        mode="hhe", clients=3, train_clients=3, eval_clients=3, rounds=2, epochs=1, batch_size=16,
        samples=600, features=16, pasta="pasta-4", bfv="toy-1024x14", seed=9,
    )
    bundle = tpa_setup(3, TOY, PASTA4, seed=9)
    state_leaks, steps = [], []
    original = Server.aggregate

    def audited(self, updates, length):
        state_leaks.extend(_leaks_in_state(self, bundle))
        out = original(self, updates, length)
        state_leaks.extend(_leaks_in_state(self, bundle))
        steps.append(len(updates))
        return out

    monkeypatch.setattr(Server, "aggregate", audited)
    patterns = _secret_patterns(bundle)
    messages, wire_leaks = [], []

    def audit(msg):
        messages.append(msg.type.name)
        data = msg.to_bytes()
        wire_leaks.extend(msg.type.name for p in patterns if p in data)

    run_experiment(cfg, bundle=bundle, audit=audit)
    public_only = isinstance(bundle.server.public, PublicKey) and not _leaks_in_state(bundle.server, bundle)
    ok = not state_leaks and not wire_leaks and public_only and steps == [3, 3]
    verdict(
        9,
        ok,
        f"server state walked at {2 * len(steps)} protocol steps ({len(state_leaks)} secrets found); "
        f"{len(messages)} server-bound messages audited ({len(wire_leaks)} containing key material)",
    )


def test_c10_gradient_check(verdict):
    ds = synthetic(10, 784, seed=10)
    weights = init_model("paper-size", seed=10)
    weights = [w + np.random.default_rng(10).normal(0, 0.05, w.shape) for w in weights]
    err = max_relative_error(weights, ds.images, ds.labels)
    verdict(10, err < 1e-4, f"paper-size model (7850 parameters), 10 samples: max relative error {err:.2e}")
