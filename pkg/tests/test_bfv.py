import numpy as np
import pytest

from hhefl.bfv.params import PRESETS, SECURITY_BOUND_BITS, BfvParams
from hhefl.bfv.scheme import (
    Plaintext,
    decrypt,
    encrypt,
    he_add,
    he_mul_relin,
    he_negate,
    he_plain_add,
    he_plain_mul,
    he_rotate,
    he_rotate_many,
    he_square,
    he_sub,
    keygen,
    noise_budget,
    require_budget,
)
from hhefl.bfv.serialize import (
    MAGIC,
    ciphertext_from_bytes,
    ciphertext_size,
    ciphertext_to_bytes,
    eval_keys_from_bytes,
    eval_keys_to_bytes,
    public_key_from_bytes,
    public_key_to_bytes,
    secret_key_from_bytes,
    secret_key_to_bytes,
)
from hhefl.errors import DecryptionIntegrityError, FormatError, MissingKeyError, NoiseBudgetExhausted, ParameterError
from hhefl.field import P
from hhefl.ring.batch import SlotVector

CASES = 1000


def rotate_rows(v, step):
    return SlotVector(v).rotate(step).values


def test_preset_table_respects_security_bounds():
    for name, (n, _) in PRESETS.items():
        params = BfvParams.preset(name)
        assert params.context.q.bit_length <= SECURITY_BOUND_BITS[n]
        assert (params.plain_modulus - 1) % (2 * n) == 0
        assert not params.insecure
    assert BfvParams.preset("toy-64x6").insecure


def test_unknown_preset_is_rejected():
    with pytest.raises(ParameterError):
        BfvParams.preset("bfv-2048")


def test_keygen_is_deterministic_under_seed(small_params):
    a = keygen(small_params, rotation_steps=(1,), seed=3)
    b = keygen(small_params, rotation_steps=(1,), seed=3)
    assert public_key_to_bytes(a.public) == public_key_to_bytes(b.public)
    assert eval_keys_to_bytes(a.evaluation_keys()) == eval_keys_to_bytes(b.evaluation_keys())
    c = keygen(small_params, seed=4)
    assert public_key_to_bytes(a.public) != public_key_to_bytes(c.public)


def test_rotation_keys_exist_for_exactly_the_declared_steps(small_keys):
    # steps are kept in the centered range modulo the row length, so 17 is -15
    assert small_keys.rotation_steps == frozenset({1, 2, 3, 5, -15, -1})
    assert small_keys.evaluation_keys().has_step(17) and small_keys.evaluation_keys().has_step(31)


def test_roundtrip_and_randomized_encryption(small_params, small_keys, rng):
    for _ in range(CASES):
        v = rng.integers(0, P, small_params.n)
        assert np.array_equal(decrypt(encrypt(v, small_keys.public, rng), small_keys.secret).values, v)
    v = rng.integers(0, P, small_params.n)
    a, b = encrypt(v, small_keys.public, rng), encrypt(v, small_keys.public, rng)
    assert ciphertext_to_bytes(a) != ciphertext_to_bytes(b)


def test_short_vectors_are_zero_padded(small_params, small_keys, rng):
    out = decrypt(encrypt([5, 6, 7], small_keys.public, rng), small_keys.secret).values
    assert out[:3].tolist() == [5, 6, 7] and not out[3:].any()


def test_add_sub_negate_oracle(small_params, small_keys, rng):
    pk, sk = small_keys.public, small_keys.secret
    for _ in range(CASES):
        u, v = rng.integers(0, P, small_params.n), rng.integers(0, P, small_params.n)
        eu, ev = encrypt(u, pk, rng), encrypt(v, pk, rng)
        assert np.array_equal(decrypt(he_add(eu, ev), sk).values, (u + v) % P)
        assert np.array_equal(decrypt(he_sub(eu, ev), sk).values, (u - v) % P)
        assert np.array_equal(decrypt(he_negate(eu), sk).values, (-u) % P)


def test_plain_add_and_plain_mul_oracle(small_params, small_keys, rng):
    pk, sk = small_keys.public, small_keys.secret
    for _ in range(CASES):
        u, w = rng.integers(0, P, small_params.n), rng.integers(0, P, small_params.n)
        eu = encrypt(u, pk, rng)
        assert np.array_equal(decrypt(he_plain_add(eu, w), sk).values, (u + w) % P)
        assert np.array_equal(decrypt(he_plain_mul(eu, w), sk).values, u * w % P)


def test_plain_mul_by_ones_and_by_scalar(small_params, small_keys, rng):
    pk, sk = small_keys.public, small_keys.secret
    u = rng.integers(0, P, small_params.n)
    eu = encrypt(u, pk, rng)
    assert np.array_equal(decrypt(he_plain_mul(eu, np.ones(small_params.n, dtype=np.int64)), sk).values, u)
    for n_k in (0, 1, 63, 252, P - 1):
        assert np.array_equal(decrypt(he_plain_mul(eu, n_k), sk).values, u * n_k % P)


def test_mul_relin_oracle(small_params, small_keys, rng):
    pk, sk = small_keys.public, small_keys.secret
    for _ in range(CASES):
        u, v = rng.integers(0, P, small_params.n), rng.integers(0, P, small_params.n)
        out = he_mul_relin(encrypt(u, pk, rng), encrypt(v, pk, rng), small_keys.relin)
        assert out.size == 2
        assert np.array_equal(decrypt(out, sk).values, u * v % P)


def test_mul_by_encrypted_ones_is_identity(small_params, small_keys, rng):
    u = rng.integers(0, P, small_params.n)
    ones = encrypt(np.ones(small_params.n, dtype=np.int64), small_keys.public, rng)
    out = he_mul_relin(encrypt(u, small_keys.public, rng), ones, small_keys.relin)
    assert np.array_equal(decrypt(out, small_keys.secret).values, u)


def test_mul_without_relin_key(small_params, small_keys, rng):
    u = encrypt([1], small_keys.public, rng)
    with pytest.raises(MissingKeyError):
        he_mul_relin(u, u, None)


def test_rotate_oracle(small_params, small_keys, rng):
    keys = small_keys.evaluation_keys()
    pk, sk = small_keys.public, small_keys.secret
    steps = [0, 1, 2, 3, -1, 5, 17]
    for i in range(CASES):
        u = rng.integers(0, P, small_params.n)
        s = steps[i % len(steps)]
        assert np.array_equal(decrypt(he_rotate(encrypt(u, pk, rng), s, keys), sk).values, rotate_rows(u, s))


def test_rotate_examples(small_params, small_keys, rng):
    keys = small_keys.evaluation_keys()
    row = small_params.row_size
    v = np.zeros(small_params.n, dtype=np.int64)
    v[:3] = [7, 8, 9]
    out = decrypt(he_rotate(encrypt(v, small_keys.public, rng), 1, keys), small_keys.secret).values
    assert out[:2].tolist() == [8, 9] and out[row - 1] == 7 and not out[2 : row - 1].any()
    u = rng.integers(0, P, small_params.n)
    back = he_rotate(he_rotate(encrypt(u, small_keys.public, rng), 1, keys), -1, keys)
    assert np.array_equal(decrypt(back, small_keys.secret).values, u)


def test_hoisted_rotations_match_single_rotations(small_params, small_keys, rng):
    keys = small_keys.evaluation_keys()
    u = rng.integers(0, P, small_params.n)
    ct = encrypt(u, small_keys.public, rng)
    for s, out in zip([1, 2, 17], he_rotate_many(ct, [1, 2, 17], keys)):
        assert np.array_equal(decrypt(out, small_keys.secret).values, rotate_rows(u, s))


def test_undeclared_rotation_is_a_missing_key(small_params, small_keys, rng):
    ct = encrypt([1, 2, 3], small_keys.public, rng)
    with pytest.raises(MissingKeyError):
        he_rotate(ct, 4, small_keys.evaluation_keys())


def test_decrypt_without_secret(small_keys, rng):
    ct = encrypt([1], small_keys.public, rng)
    with pytest.raises(MissingKeyError):
        decrypt(ct, small_keys.without_secret().secret)


def test_parameter_mismatch(small_keys, rng):
    other = keygen(BfvParams.preset("toy-64x5"), seed=1)
    with pytest.raises(ParameterError):
        he_add(encrypt([1], small_keys.public, rng), encrypt([1], other.public, rng))


def test_fresh_budget_is_positive_at_every_preset():
    for name in ("bfv-4096", "bfv-8192", "toy-1024x14"):
        params = BfvParams.preset(name)
        keys = keygen(params, seed=0, relin=False)
        ct = encrypt(np.arange(16), keys.public, 1)
        assert noise_budget(ct, keys.secret) > 0 and ct.budget_estimate > 0


def test_budget_is_monotone_and_add_is_cheap(small_params, small_keys, rng):
    pk, sk, keys = small_keys.public, small_keys.secret, small_keys.evaluation_keys()
    a = encrypt(rng.integers(0, P, small_params.n), pk, rng)
    b = encrypt(rng.integers(0, P, small_params.n), pk, rng)
    fresh = noise_budget(a, sk)
    assert fresh - noise_budget(he_add(a, b), sk) <= 2
    path = [a]
    for op in (
        lambda c: he_add(c, b),
        lambda c: he_plain_mul(c, 63),
        lambda c: he_rotate(c, 1, keys),
        lambda c: he_mul_relin(c, b, small_keys.relin),
        lambda c: he_plain_add(c, np.arange(small_params.n)),
        lambda c: he_square(c, small_keys.relin),
    ):
        path.append(op(path[-1]))
    measured = [noise_budget(c, sk) for c in path]
    estimated = [c.budget_estimate for c in path]
    assert all(x >= y for x, y in zip(measured, measured[1:]))
    assert all(x >= y for x, y in zip(estimated, estimated[1:]))
    assert measured[0] > noise_budget(he_mul_relin(a, b, small_keys.relin), sk)


def test_depth_probe_estimate_is_safe(small_params, small_keys, rng):
    """While the running estimate has headroom, decryption is exact; once the
    measured budget is 0, decryption no longer matches."""
    pk, sk = small_keys.public, small_keys.secret
    v = rng.integers(0, P, small_params.n)
    ct, ref = encrypt(v, pk, rng), v.copy()
    safe_depth = None
    for depth in range(12):
        if ct.budget_estimate > 0:
            assert np.array_equal(decrypt(ct, sk).values, ref)
            require_budget(ct, f"square {depth}")
        else:
            safe_depth = safe_depth if safe_depth is not None else depth - 1
            with pytest.raises(NoiseBudgetExhausted) as info:
                require_budget(ct, f"square {depth}")
            assert info.value.layer == f"square {depth}"
        if noise_budget(ct, sk) == 0:
            assert not np.array_equal(decrypt(ct, sk, check=False).values, ref)
            with pytest.raises(DecryptionIntegrityError):
                decrypt(ct, sk)
            break
        ct, ref = he_square(ct, small_keys.relin), ref * ref % P
    else:
        pytest.fail("budget never ran out")
    assert safe_depth is not None and safe_depth >= 4


def test_ciphertext_and_key_serialization(small_params, small_keys, rng):
    ct = encrypt(rng.integers(0, P, small_params.n), small_keys.public, rng)
    blob = ciphertext_to_bytes(ct)
    assert blob[:4] == MAGIC and len(blob) == ciphertext_size(small_params)
    assert ciphertext_to_bytes(ciphertext_from_bytes(blob, small_params)) == blob
    pk = public_key_to_bytes(small_keys.public)
    assert public_key_to_bytes(public_key_from_bytes(pk, small_params)) == pk
    sk = secret_key_to_bytes(small_keys.secret)
    back = secret_key_from_bytes(sk, small_params)
    assert secret_key_to_bytes(back) == sk
    assert np.array_equal(decrypt(ct, back).values, decrypt(ct, small_keys.secret).values)
    ek = eval_keys_to_bytes(small_keys.evaluation_keys())
    parsed = eval_keys_from_bytes(ek, small_params)
    assert eval_keys_to_bytes(parsed) == ek
    v = rng.integers(0, P, small_params.n)
    rot = he_rotate(encrypt(v, small_keys.public, rng), 3, parsed)
    assert np.array_equal(decrypt(rot, small_keys.secret).values, rotate_rows(v, 3))


def test_malformed_objects_are_rejected(small_params, small_keys, rng):
    blob = ciphertext_to_bytes(encrypt([1], small_keys.public, rng))
    with pytest.raises(FormatError):
        ciphertext_from_bytes(b"XXXX" + blob[4:], small_params)
    with pytest.raises(FormatError):
        ciphertext_from_bytes(blob[:-3], small_params)
    with pytest.raises(FormatError):
        ciphertext_from_bytes(blob + b"\0", small_params)
    with pytest.raises(FormatError):
        public_key_from_bytes(blob, small_params)
    with pytest.raises(FormatError):
        ciphertext_from_bytes(blob, BfvParams.preset("toy-64x5"))


def test_plaintext_slots_roundtrip(small_params):
    pt = Plaintext(np.arange(10), small_params)
    assert pt.slots().values[:10].tolist() == list(range(10))
