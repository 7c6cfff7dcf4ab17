"""Two-party secure inner products: fixed-point codec plus DDH inner-product encryption.

The guest owns a private real vector ``u`` and acts as key authority.  It
publishes ``h_i = g^{s_i}`` for a master secret ``s`` and sends one
ciphertext ``(g^r, h_i^r g^{x_i})`` of the quantized vector ``x``.  For every
query ``a`` the host asks for, the guest releases ``sk_a = <s, a> mod q``;
the host then forms ``prod ct_i^{a_i} / ct_0^{sk_a} = g^{<x, a>}`` and
recovers the exponent with baby-step giant-step over a bounded range.

The group is the order-q subgroup of quadratic residues modulo a 127-bit
safe prime ``p = 2q + 1``.  This is large enough to exercise the protocol
and far too small for real deployments.
"""

from __future__ import annotations

import base64
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SAFE_PRIME = 164450338744538537621996579214604046399
SUBGROUP_ORDER = (SAFE_PRIME - 1) // 2
GENERATOR = 4
ELEMENT_BYTES = 16


class SecureIpError(RuntimeError):
    pass


class BoundExceeded(SecureIpError):
    """The discrete log was not found in the configured range."""


def is_probable_prime(n: int, rounds: int = 32, seed: int = 0) -> bool:
    if n < 2:
        return False
    for sp in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % sp == 0:
            return n == sp
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    rng = random.Random(seed)
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class GroupParams:
    p: int = SAFE_PRIME
    q: int = SUBGROUP_ORDER
    g: int = GENERATOR

    def validate(self) -> None:
        if self.p != 2 * self.q + 1:
            raise SecureIpError("p is not of the form 2q + 1")
        if not (is_probable_prime(self.p) and is_probable_prime(self.q)):
            raise SecureIpError("p or q is not prime")
        if self.g in (0, 1) or pow(self.g, self.q, self.p) != 1:
            raise SecureIpError("g does not generate the order-q subgroup")

    def in_subgroup(self, h: int) -> bool:
        return 0 < h < self.p and pow(h, self.q, self.p) == 1

    def gexp(self, x: int) -> int:
        return pow(self.g, x % self.q, self.p)


DEFAULT_GROUP = GroupParams()


# -- fixed-point codec ------------------------------------------------------


@dataclass(frozen=True)
class FixedPointCodec:
    """Rounds reals to integers ``round(x * scale)`` after clipping to ``[-bound, bound]``."""

    scale: int = 2**12
    bound: float = 4.0
    dim: int = 1

    def __post_init__(self):
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ValueError("scale must be a positive power of two")
        if self.bound <= 0 or self.dim < 1:
            raise ValueError("bound and dim must be positive")

    @property
    def max_abs_int(self) -> int:
        return int(math.floor(self.scale * self.bound + 0.5))

    @property
    def error_bound(self) -> float:
        """Published epsilon_q = d (B + 1) / s."""
        return self.dim * (self.bound + 1.0) / self.scale

    def product_error_bound(self, x: np.ndarray, y: np.ndarray) -> float:
        """Bound on |<dq(x), dq(y)> - <x, y>| for in-range x and y."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.error_bound * (np.max(np.abs(x), initial=0.0) + np.max(np.abs(y), initial=0.0) + 1.0 / self.scale)

    def fits(self, group: GroupParams = DEFAULT_GROUP) -> bool:
        """No wraparound of the integer inner product inside the group exponent."""
        return 2 * self.dim * self.max_abs_int**2 < group.q

    def quantize(self, x: np.ndarray) -> list[int]:
        x = np.asarray(x, dtype=float).ravel()
        clipped = np.clip(x, -self.bound, self.bound)
        n_clip = int(np.sum(clipped != x))
        if n_clip:
            log.warning("clipped %d of %d entries to the codec bound %g", n_clip, x.size, self.bound)
        return [int(v) for v in np.rint(clipped * self.scale)]

    def dequantize(self, n: int | np.ndarray) -> float | np.ndarray:
        return n / self.scale

    def dequantize_product(self, n: int | np.ndarray) -> float | np.ndarray:
        return n / float(self.scale) ** 2


def quantize(x: np.ndarray, codec: FixedPointCodec) -> list[int]:
    return codec.quantize(x)


def dequantize(n: int, codec: FixedPointCodec) -> float:
    return codec.dequantize(n)


# -- IPE primitives ---------------------------------------------------------


@dataclass
class IpeKeys:
    secret: list[int] = field(repr=False)
    public: list[int]
    group: GroupParams = DEFAULT_GROUP

    @property
    def dim(self) -> int:
        return len(self.public)


@dataclass(frozen=True)
class Ciphertext:
    c0: int
    cs: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.cs) + 1


def setup(d: int, seed: int | random.Random = 0, group: GroupParams = DEFAULT_GROUP) -> IpeKeys:
    if d < 1:
        raise ValueError("dimension must be at least 1")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    secret = [rng.randrange(group.q) for _ in range(d)]
    return IpeKeys(secret, [group.gexp(s) for s in secret], group)


def encrypt(
    public: Sequence[int],
    x: Sequence[int],
    rng: random.Random,
    max_abs: int | None = None,
    group: GroupParams = DEFAULT_GROUP,
) -> Ciphertext:
    if len(x) != len(public):
        raise ValueError(f"vector has dimension {len(x)}, key has {len(public)}")
    if max_abs is not None and any(abs(int(v)) > max_abs for v in x):
        raise ValueError(f"plaintext entry outside [-{max_abs}, {max_abs}]")
    r = rng.randrange(1, group.q)
    p = group.p
    return Ciphertext(group.gexp(r), tuple(pow(h, r, p) * group.gexp(int(v)) % p for h, v in zip(public, x)))


def keygen(keys: IpeKeys, a: Sequence[int]) -> int:
    if len(a) != keys.dim:
        raise ValueError(f"query has dimension {len(a)}, key has {keys.dim}")
    return sum(s * int(ai) for s, ai in zip(keys.secret, a)) % keys.group.q


class BabySteps:
    """Table of g^j for j < m, reused across decryptions with bounds up to m^2 / 2."""

    def __init__(self, m: int, group: GroupParams = DEFAULT_GROUP):
        self.m = m
        self.group = group
        table = {}
        e = 1
        for j in range(m):
            table.setdefault(e, j)
            e = e * group.g % group.p
        self.table = table
        self.giant = pow(group.g, -m, group.p)

    def solve(self, y: int, bound: int) -> int:
        """x in [-bound, bound] with g^x = y."""
        p = self.group.p
        gamma = y * pow(self.group.g, bound, p) % p
        span = 2 * bound + 1
        table = self.table
        for i in range(span // self.m + 1):
            j = table.get(gamma)
            if j is not None:
                x = i * self.m + j - bound
                if x <= bound:
                    return x
                break
            gamma = gamma * self.giant % p
        raise BoundExceeded(f"discrete log not found within +-{bound}")


_TABLES: dict[tuple[int, int], BabySteps] = {}


def baby_steps(bound: int, group: GroupParams = DEFAULT_GROUP) -> BabySteps:
    m = max(1, math.isqrt(2 * bound + 1) + 1)
    key = (group.p, group.g)
    table = _TABLES.get(key)
    if table is None or table.m < m:
        table = BabySteps(m, group)
        _TABLES[key] = table
    return table


def decrypt(ct: Ciphertext, sk: int, a: Sequence[int], bound: int, group: GroupParams = DEFAULT_GROUP) -> int:
    if len(a) != len(ct.cs):
        raise ValueError(f"query has dimension {len(a)}, ciphertext has {len(ct.cs)}")
    p = group.p
    acc = 1
    for c, ai in zip(ct.cs, a):
        ai = int(ai)
        if ai:
            acc = acc * pow(c, ai, p) % p
    acc = acc * pow(ct.c0, group.q - sk, p) % p
    return baby_steps(bound, group).solve(acc, bound)


# -- wire encoding ----------------------------------------------------------


def int_to_b64(n: int) -> str:
    return base64.b64encode(n.to_bytes(ELEMENT_BYTES, "big")).decode("ascii")


def b64_to_int(s: str) -> int:
    return int.from_bytes(base64.b64decode(s), "big")


def ciphertext_to_wire(ct: Ciphertext) -> list[str]:
    return [int_to_b64(ct.c0)] + [int_to_b64(c) for c in ct.cs]


def ciphertext_from_wire(items: Sequence[str]) -> Ciphertext:
    vals = [b64_to_int(s) for s in items]
    return Ciphertext(vals[0], tuple(vals[1:]))


# -- sessions ---------------------------------------------------------------


def query_bound(a_int: Sequence[int], codec: FixedPointCodec) -> int:
    """Largest possible |<x, a>| for a quantized x within the codec bound."""
    return codec.max_abs_int * sum(abs(int(v)) for v in a_int)


@dataclass
class QuantizedQueries:
    """Host-side query matrix normalized column by column before quantization."""

    ints: list[list[int]]
    norms: np.ndarray  # divide-back factors, one per query

    @classmethod
    def from_matrix(cls, queries: np.ndarray, codec: FixedPointCodec) -> "QuantizedQueries":
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        norms = np.max(np.abs(queries), axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        ints = [codec.quantize(row / n) for row, n in zip(queries, safe)]
        return cls(ints, np.where(norms > 0, norms, 0.0))


class GuestSession:
    """Key authority side: holds the master secret and the private vector."""

    def __init__(self, dim: int, codec: FixedPointCodec, seed: int = 0, group: GroupParams = DEFAULT_GROUP):
        self.codec = codec
        self.group = group
        self.rng = random.Random(seed)
        self.keys = setup(dim, self.rng, group)

    def encrypt(self, u: np.ndarray) -> Ciphertext:
        return encrypt(self.keys.public, self.codec.quantize(u), self.rng, self.codec.max_abs_int, self.group)

    def functional_keys(self, queries: Sequence[Sequence[int]]) -> list[int]:
        return [keygen(self.keys, a) for a in queries]


class HostSession:
    """Decryptor side: sees ciphertexts, its own queries and the returned keys."""

    def __init__(self, codec: FixedPointCodec, group: GroupParams = DEFAULT_GROUP):
        self.codec = codec
        self.group = group

    def inner_products(self, ct: Ciphertext, queries: QuantizedQueries, keys: Sequence[int]) -> np.ndarray:
        if len(keys) != len(queries.ints):
            raise SecureIpError(f"got {len(keys)} keys for {len(queries.ints)} queries")
        out = np.empty(len(keys))
        for i, (a, sk) in enumerate(zip(queries.ints, keys)):
            n = decrypt(ct, sk, a, query_bound(a, self.codec), self.group)
            out[i] = self.codec.dequantize_product(n) * queries.norms[i]
        return out


def secure_inner_products(
    queries: np.ndarray,
    u: np.ndarray,
    codec: FixedPointCodec | None = None,
    backend: str = "plaintext",
    seed: int = 0,
) -> np.ndarray:
    """Values <u, a> for every row a of ``queries``, through the chosen backend.

    The ``ipe`` path runs both roles locally; the protocol module splits the
    same calls across parties.  ``u`` must lie within the codec bound.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    u = np.asarray(u, dtype=float).ravel()
    if queries.shape[1] != u.size:
        raise ValueError(f"queries have dimension {queries.shape[1]}, vector has {u.size}")
    if backend == "plaintext":
        return queries @ u
    if backend != "ipe":
        raise ValueError(f"unknown secure inner-product backend {backend!r}")
    codec = codec or FixedPointCodec(dim=u.size)
    guest = GuestSession(u.size, codec, seed)
    host = HostSession(codec)
    ct = guest.encrypt(u)
    qq = QuantizedQueries.from_matrix(queries, codec)
    return host.inner_products(ct, qq, guest.functional_keys(qq.ints))


def ipe_error_bound(queries: np.ndarray, u: np.ndarray, codec: FixedPointCodec) -> np.ndarray:
    """Per-query bound on |ipe - plaintext| given column normalization of the queries."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    norms = np.max(np.abs(queries), axis=1)
    ub = np.max(np.abs(u), initial=0.0)
    return norms * codec.error_bound * (ub + 1.0 + 1.0 / codec.scale)
