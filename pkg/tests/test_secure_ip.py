"""Fixed-point codec and discrete-log inner-product encryption."""

import random
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtse.secure_ip import (
    DEFAULT_GROUP,
    BoundExceeded,
    FixedPointCodec,
    GroupParams,
    GuestSession,
    SecureIpError,
    ciphertext_from_wire,
    ciphertext_to_wire,
    decrypt,
    encrypt,
    ipe_error_bound,
    is_probable_prime,
    keygen,
    secure_inner_products,
    setup,
)

G = DEFAULT_GROUP


def roundtrip(u, a, seed=0, bound=None):
    keys = setup(len(u), seed)
    ct = encrypt(keys.public, u, random.Random(seed + 1))
    bound = bound if bound is not None else sum(abs(x) for x in u) * max(1, max(abs(y) for y in a))
    return decrypt(ct, keygen(keys, a), a, max(bound, 1))


class TestGroup:
    def test_default_group_is_valid(self):
        G.validate()
        assert G.p.bit_length() <= 128

    def test_primality(self):
        assert is_probable_prime(2**61 - 1)
        assert not is_probable_prime(2**61 + 1)
        assert not is_probable_prime(1)

    def test_bad_generator_rejected(self):
        with pytest.raises(SecureIpError):
            GroupParams(g=G.p - 1).validate()

    def test_not_safe_prime_rejected(self):
        with pytest.raises(SecureIpError):
            GroupParams(p=23, q=10, g=4).validate()


class TestCodec:
    def test_dyadic_exact(self):
        c = FixedPointCodec(scale=2**10, bound=4.0)
        assert c.quantize(np.array([1.5])) == [1536]
        assert c.dequantize(1536) == 1.5

    def test_zero(self):
        c = FixedPointCodec(dim=3)
        assert c.quantize(np.zeros(3)) == [0, 0, 0]

    def test_clipping_logged(self, caplog):
        c = FixedPointCodec(scale=2, bound=1.0)
        assert c.quantize(np.array([5.0, -5.0])) == [2, -2]
        assert "clipped 2" in caplog.text

    def test_published_bound(self):
        c = FixedPointCodec(scale=2**12, bound=4.0, dim=16)
        assert c.error_bound == pytest.approx(16 * 5.0 / 2**12)
        assert c.fits()

    @pytest.mark.parametrize("kw", [{"scale": 3}, {"scale": 0}, {"bound": 0.0}, {"dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FixedPointCodec(**kw)

    @settings(max_examples=200)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_product_within_bound(self, seed):
        rng = np.random.default_rng(seed)
        c = FixedPointCodec(scale=2**12, bound=4.0, dim=16)
        x, y = rng.uniform(-4, 4, 16), rng.uniform(-4, 4, 16)
        got = c.dequantize_product(int(np.dot(c.quantize(x), c.quantize(y))))
        assert abs(got - x @ y) <= c.product_error_bound(x, y)


class TestIpe:
    def test_same_seed_same_keys(self):
        assert setup(4, 7).public == setup(4, 7).public
        assert setup(4, 7).secret != setup(4, 8).secret

    def test_degenerate_dimension(self):
        keys = setup(1, 0)
        assert keys.dim == 1 and len(keys.secret) == 1
        with pytest.raises(ValueError):
            setup(0)

    def test_public_key_in_subgroup(self):
        assert all(G.in_subgroup(h) for h in setup(8, 3).public)

    def test_fresh_ciphertexts(self):
        keys = setup(3, 0)
        rng = random.Random(0)
        cts = [encrypt(keys.public, [1, 2, 3], rng) for _ in range(50)]
        assert len({ct.c0 for ct in cts}) == 50
        assert all(len(ct) == 4 for ct in cts)

    def test_unit_query_recovers_entry(self):
        u = [7, -3, 11]
        for i in range(3):
            a = [0, 0, 0]
            a[i] = 1
            assert roundtrip(u, a) == u[i]

    def test_zero_vector(self):
        assert roundtrip([0, 0, 0, 0], [5, -9, 2, 1], bound=100) == 0

    def test_oracle(self):
        assert roundtrip([5, 0], [3, 0]) == 15

    def test_keygen_zero_and_linear(self):
        keys = setup(4, 2)
        assert keygen(keys, [0, 0, 0, 0]) == 0
        a, b = [1, -2, 3, 4], [5, 6, -7, 8]
        s = [x + y for x, y in zip(a, b)]
        assert keygen(keys, s) == (keygen(keys, a) + keygen(keys, b)) % G.q

    def test_keygen_dimension_mismatch(self):
        with pytest.raises(ValueError):
            keygen(setup(3), [1, 2])

    def test_out_of_range_entry(self):
        keys = setup(2, 0)
        with pytest.raises(ValueError):
            encrypt(keys.public, [10, 0], random.Random(0), max_abs=5)

    def test_bound_exceeded(self):
        with pytest.raises(BoundExceeded):
            roundtrip([100, 100], [1, 1], bound=50)

    def test_exact_on_many_random_pairs(self):
        rng = random.Random(5)
        keys = setup(4, 5)
        for _ in range(1000):
            u = [rng.randint(-300, 300) for _ in range(4)]
            a = [rng.randint(-300, 300) for _ in range(4)]
            ct = encrypt(keys.public, u, rng)
            assert decrypt(ct, keygen(keys, a), a, 4 * 300 * 300) == sum(x * y for x, y in zip(u, a))

    def test_random_d16(self):
        rng = random.Random(1)
        u = [rng.randint(-4096, 4096) for _ in range(16)]
        a = [rng.randint(-4096, 4096) for _ in range(16)]
        assert roundtrip(u, a, bound=16 * 4096 * 4096) == sum(x * y for x, y in zip(u, a))

    def test_bsgs_latency(self):
        keys = setup(2, 0)
        ct = encrypt(keys.public, [2**23 - 5, 0], random.Random(0))
        start = time.perf_counter()
        assert decrypt(ct, keygen(keys, [1, 0]), [1, 0], 2**24) == 2**23 - 5
        assert time.perf_counter() - start < 2.0  # includes one-off table build

    def test_wire_round_trip(self):
        keys = setup(3, 0)
        ct = encrypt(keys.public, [1, 2, 3], random.Random(4))
        assert ciphertext_from_wire(ciphertext_to_wire(ct)) == ct


class TestSessions:
    def test_plaintext_backend_exact(self):
        rng = np.random.default_rng(0)
        q, u = rng.normal(size=(5, 6)), rng.normal(size=6)
        np.testing.assert_array_equal(secure_inner_products(q, u), q @ u)

    def test_ipe_agrees_with_plaintext(self):
        rng = np.random.default_rng(1)
        q, u = rng.normal(size=(8, 6)) * 30.0, rng.uniform(-3, 3, 6)
        codec = FixedPointCodec(dim=6)
        got = secure_inner_products(q, u, codec, backend="ipe")
        assert np.all(np.abs(got - q @ u) <= ipe_error_bound(q, u, codec))

    def test_zero_query_row(self):
        q = np.zeros((2, 3))
        q[1] = [1.0, 0.0, 0.0]
        got = secure_inner_products(q, np.array([0.5, 1.0, 2.0]), backend="ipe")
        np.testing.assert_allclose(got, [0.0, 0.5])

    def test_d64_32_queries_fast(self):
        rng = np.random.default_rng(2)
        q, u = rng.normal(size=(32, 64)), rng.uniform(-4, 4, 64)
        start = time.perf_counter()
        secure_inner_products(q, u, FixedPointCodec(dim=64), backend="ipe")
        assert time.perf_counter() - start < 10.0

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            secure_inner_products(np.ones((1, 2)), np.ones(2), backend="paillier")

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            secure_inner_products(np.ones((1, 2)), np.ones(3))

    def test_secret_not_in_repr(self):
        s = GuestSession(3, FixedPointCodec(dim=3), seed=0)
        text = repr(s.keys)
        assert all(str(v) not in text for v in s.keys.secret)
