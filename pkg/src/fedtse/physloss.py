"""Physics-informed training loss over the CTM state-space model.

Given host estimates ``y_hat`` for pairs of consecutive steps ``(t, t+1)``
the loss is

    1/2 sum_t [ r_t' W r_t + sum_k e_kt' V_k e_kt ],
    r_t = y_hat_{t+1} - g(y_hat_t),   e_kt = mask * (u_kt - h_k(y_hat_t)),

with ``W`` and ``V_k`` the inverse process and measurement covariances.
Everything downstream is linear in a cotangent on ``y_hat``, so the
gradient w.r.t. the host parameters and the guest outputs is one
vector-Jacobian product of the host model.  The gradient splits into three
pieces: the model-consistency piece, a piece linear in the private guest
measurements ``u`` (computed by secure inner products), and a piece in
``h(y_hat)`` that the host forms on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ctm
from .ctm import Network

HOST_FLOW = "host-flow"
GUEST_SPEED = "guest-speed"
GUEST_DENSITY = "guest-density"
KINDS = (HOST_FLOW, GUEST_SPEED, GUEST_DENSITY)


class PhysicsLossError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementModel:
    """Selects or transforms entries of a state vector (densities then flows)."""

    kind: str
    cells: tuple[int, ...]
    sigma: tuple[float, ...]  # standard deviation per measured entry
    n_cells: int
    floor: float = 1e-6  # veh/km, density floor inside the speed ratio
    weight: float = 1.0  # multiplies the inverse variance; 0 switches the term off

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PhysicsLossError(f"unknown measurement kind {self.kind!r}")
        if len(self.sigma) != len(self.cells):
            raise PhysicsLossError("need one noise level per measured cell")
        if any(s <= 0 for s in self.sigma):
            raise PhysicsLossError("measurement noise levels must be positive")
        if any(c < 0 or c >= self.n_cells for c in self.cells):
            raise PhysicsLossError("measured cells must be network cells")
        if not self.weight >= 0:
            raise PhysicsLossError("term weight must be non-negative")

    @classmethod
    def build(cls, kind: str, cells: Sequence[int], sigma: float | Sequence[float], n_cells: int, floor: float = 1e-6, weight: float = 1.0):
        cells = tuple(int(c) for c in cells)
        sig = (float(sigma),) * len(cells) if np.isscalar(sigma) else tuple(float(s) for s in sigma)
        return cls(kind, cells, sig, n_cells, floor, weight)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def inv_var(self) -> np.ndarray:
        return self.weight / np.square(np.array(self.sigma))

    def measure(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        idx = list(self.cells)
        k = y[..., : self.n_cells][..., idx]
        q = y[..., self.n_cells :][..., idx]
        if self.kind == HOST_FLOW:
            return q
        if self.kind == GUEST_DENSITY:
            return k
        return q / np.maximum(k, self.floor)

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        """d h / d y with shape (..., dim, 2N)."""
        y = np.asarray(y, dtype=float)
        n, idx = self.n_cells, np.array(self.cells, dtype=int)
        out = np.zeros(y.shape[:-1] + (self.dim, 2 * n))
        rows = np.arange(self.dim)
        if self.kind == HOST_FLOW:
            out[..., rows, n + idx] = 1.0
        elif self.kind == GUEST_DENSITY:
            out[..., rows, idx] = 1.0
        else:
            k = y[..., idx]
            q = y[..., n + idx]
            above = k > self.floor
            kk = np.maximum(k, self.floor)
            out[..., rows, n + idx] = 1.0 / kk
            out[..., rows, idx] = np.where(above, -q / (kk * kk), 0.0)
        return out


def measure(model: MeasurementModel, y: np.ndarray) -> np.ndarray:
    return model.measure(y)


def measurement_jacobian(model: MeasurementModel, y: np.ndarray) -> np.ndarray:
    return model.jacobian(y)


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal process noise over the state (densities then flows)."""

    sigma: tuple[float, ...]

    def __post_init__(self):
        if any(s <= 0 for s in self.sigma):
            raise PhysicsLossError("process noise levels must be positive")

    @classmethod
    def build(cls, n_cells: int, density_sigma: float, flow_sigma: float) -> "NoiseSpec":
        return cls((float(density_sigma),) * n_cells + (float(flow_sigma),) * n_cells)

    @property
    def inv_var(self) -> np.ndarray:
        return 1.0 / np.square(np.array(self.sigma))


@dataclass
class MeasurementTerm:
    """One party's measurements of one kind over the batch steps."""

    model: MeasurementModel
    u: np.ndarray  # (B, dim)
    mask: np.ndarray  # (B, dim) bool

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.u.shape != self.mask.shape or self.u.shape[-1] != self.model.dim:
            raise PhysicsLossError("measurement values and mask do not match the model dimension")


@dataclass
class PairBatch:
    """Index structure of a physics batch.

    ``points`` are the absolute steps for which the host produces estimates;
    ``first`` and ``second`` index into them for every pair (t, t+1).
    ``attempt`` holds the source inflow offered at each point.
    """

    points: np.ndarray
    first: np.ndarray
    second: np.ndarray
    attempt: np.ndarray

    @classmethod
    def from_steps(cls, steps: Sequence[int], attempt_of: Callable[[np.ndarray], np.ndarray]) -> "PairBatch":
        steps = np.asarray(sorted(set(int(t) for t in steps)), dtype=int)
        points = np.union1d(steps, steps + 1)
        pos = {int(t): i for i, t in enumerate(points)}
        first = np.array([pos[int(t)] for t in steps], dtype=int)
        second = np.array([pos[int(t) + 1] for t in steps], dtype=int)
        return cls(points, first, second, np.asarray(attempt_of(points), dtype=float))

    def validate(self, n_points: int) -> None:
        if len(self.points) != n_points:
            raise PhysicsLossError(f"estimate has {n_points} rows, batch has {len(self.points)} points")
        if np.any(self.points[self.second] != self.points[self.first] + 1):
            raise PhysicsLossError("batch pairs are not consecutive steps")

    @property
    def steps(self) -> np.ndarray:
        return self.points[self.first]


def model_residual(net: Network, y_hat: np.ndarray, batch: PairBatch, jacobian: bool = False):
    y_t = y_hat[batch.first]
    n = net.n_cells
    g, jac = ctm.model_step(
        net,
        y_t[:, :n],
        batch.points[batch.first],
        batch.attempt[batch.first],
        batch.attempt[batch.second],
        jacobian=jacobian,
    )
    return y_hat[batch.second] - g, jac


def physics_loss(
    net: Network,
    y_hat: np.ndarray,
    batch: PairBatch,
    terms: Sequence[MeasurementTerm],
    noise: NoiseSpec,
) -> float:
    """Half the sum over pairs of the process and measurement quadratic forms."""
    y_hat = np.asarray(y_hat, dtype=float)
    batch.validate(len(y_hat))
    r, _ = model_residual(net, y_hat, batch)
    total = float(np.sum(r * r * noise.inv_var))
    y_t = y_hat[batch.first]
    for term in terms:
        if term.u.shape[0] != len(batch.first):
            raise PhysicsLossError("measurements are not aligned with the batch steps")
        e = np.where(term.mask, term.u - term.model.measure(y_t), 0.0)
        total += float(np.sum(e * e * term.model.inv_var))
    return 0.5 * total


def _scatter(n_points: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros((n_points, values.shape[-1]))
    np.add.at(out, rows, values)
    return out


def model_cotangent(net: Network, y_hat: np.ndarray, batch: PairBatch, noise: NoiseSpec) -> np.ndarray:
    """dL/dy_hat of the process term."""
    r, jac = model_residual(net, y_hat, batch, jacobian=True)
    a = r * noise.inv_var
    cot = _scatter(len(y_hat), batch.second, a)
    cot -= _scatter(len(y_hat), batch.first, np.einsum("bi,bij->bj", a, jac))
    return cot


def measurement_cotangents(y_hat: np.ndarray, batch: PairBatch, term: MeasurementTerm) -> tuple[np.ndarray, np.ndarray]:
    """(private, public) parts of dL/dy_hat for one measurement term.

    The private part is -H' V (mask * u), linear in the measurements; the
    public part is H' V (mask * h(y_hat)).
    """
    y_t = y_hat[batch.first]
    hj = term.model.jacobian(y_t)
    w = term.model.inv_var * term.mask
    priv = -np.einsum("bi,bij->bj", w * term.u, hj)
    pub = np.einsum("bi,bij->bj", w * term.model.measure(y_t), hj)
    return _scatter(len(y_hat), batch.first, priv), _scatter(len(y_hat), batch.first, pub)


def loss_cotangent(net: Network, y_hat: np.ndarray, batch: PairBatch, terms: Sequence[MeasurementTerm], noise: NoiseSpec) -> np.ndarray:
    cot = model_cotangent(net, y_hat, batch, noise)
    for term in terms:
        priv, pub = measurement_cotangents(y_hat, batch, term)
        cot += priv + pub
    return cot


# -- query sets for the private term -----------------------------------------

Vjp = Callable[[np.ndarray], tuple[np.ndarray, list[np.ndarray]]]
JacobianFn = Callable[[], tuple[np.ndarray, list[np.ndarray]]]


@dataclass
class QuerySet:
    """Coefficients of the measurement-linear gradient piece for one guest.

    The guest's stacked vector ``U`` lists, for every batch step in order,
    the entries of each measurement term where the mask is true.  The piece
    equals ``C' U`` for a coefficient matrix ``C`` with one row per entry of
    ``U`` and one column per host parameter (the theta block) or per guest
    output coordinate at that step (the z blocks).  The columns are the
    secure inner-product queries.
    """

    y_hat: np.ndarray
    batch: PairBatch
    models: list[MeasurementModel]
    masks: list[np.ndarray]
    vjp: Vjp
    jacobians: JacobianFn | None = None
    def __post_init__(self):
        # U lists, step by step and term by term, the entries where the mask is true
        stacked = np.concatenate([np.asarray(m, dtype=bool) for m in self.masks], axis=1)
        widths = [m.shape[1] for m in self.masks]
        offs = np.concatenate([[0], np.cumsum(widths)])
        b, col = np.nonzero(stacked)
        term = np.searchsorted(offs, col, side="right") - 1
        self.layout_step = b
        self.layout_term = term
        self.layout_entry = col - offs[term]
        self._cols = col
        self._widths = widths

    @property
    def dim(self) -> int:
        return len(self.layout_step)

    def block_dims(self) -> list[int]:
        return np.bincount(self.layout_step, minlength=len(self.batch.first)).tolist()

    def pack(self, u: Sequence[np.ndarray]) -> np.ndarray:
        """Stack per-term measurement arrays (B, dim_j) into the vector U."""
        return np.concatenate([np.asarray(x, dtype=float) for x in u], axis=1)[self.layout_step, self._cols]

    def unpack(self, vec: np.ndarray) -> list[np.ndarray]:
        full = np.zeros((len(self.batch.first), sum(self._widths)))
        full[self.layout_step, self._cols] = vec
        offs = np.concatenate([[0], np.cumsum(self._widths)])
        return [full[:, offs[j] : offs[j + 1]] for j in range(len(self._widths))]

    def cotangent(self, vec: np.ndarray) -> np.ndarray:
        y_t = self.y_hat[self.batch.first]
        cot = np.zeros_like(y_t)
        for model, u in zip(self.models, self.unpack(vec)):
            cot -= np.einsum("bi,bij->bj", model.inv_var * u, model.jacobian(y_t))
        return _scatter(len(self.y_hat), self.batch.first, cot)

    def rmatvec(self, vec: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """C' U computed without forming C: one backward pass of the host model."""
        return self.vjp(self.cotangent(vec))

    def coefficient_rows(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Materialize C: (dim, P) for theta and (dim, d_k) per guest output (step-local)."""
        if self.jacobians is None:
            raise PhysicsLossError("materializing queries needs per-sample Jacobians")
        jp, jz = self.jacobians()
        y_t = self.y_hat[self.batch.first]
        hjs = [m.jacobian(y_t) for m in self.models]
        rows_p = np.zeros((self.dim, jp.shape[-1]))
        rows_z = [np.zeros((self.dim, j.shape[-1])) for j in jz]
        for r, (b, j, i) in enumerate(zip(self.layout_step, self.layout_term, self.layout_entry)):
            coeff = -self.models[j].inv_var[i] * hjs[j][b, i]  # (2N,)
            pt = self.batch.first[b]
            rows_p[r] = coeff @ jp[pt]
            for k, jzk in enumerate(jz):
                rows_z[k][r] = coeff @ jzk[pt]
        return rows_p, rows_z

    def queries(self) -> tuple[np.ndarray, list[list[tuple[int, np.ndarray]]]]:
        """Theta queries (P, dim) over all of U, and per-guest z queries grouped by batch step.

        Each z query is supported on one step's slice of U; it is returned as
        (step position, output coordinate, full-length vector).
        """
        rows_p, rows_z = self.coefficient_rows()
        owners = self.layout_step
        zq = []
        for rz in rows_z:
            per = []
            for b in range(len(self.batch.first)):
                sel = owners == b
                if not sel.any():
                    continue
                for col in range(rz.shape[1]):
                    a = np.zeros(self.dim)
                    a[sel] = rz[sel, col]
                    per.append((b, col, a))
            zq.append(per)
        return rows_p.T, zq


def assemble_z_gradient(n_points: int, batch: PairBatch, values: Sequence[tuple[int, int, float]], dz: int) -> np.ndarray:
    """Place step-local inner products (step position, coordinate, value) into a (P, dz) array."""
    out = np.zeros((n_points, dz))
    for b, c, v in values:
        out[batch.first[b], c] += v
    return out


# -- rank condition ----------------------------------------------------------


@dataclass(frozen=True)
class RankDecision:
    ok: bool
    dimension: int
    rank_bound: int
    reason: str = ""


def rank_guard(dimension: int, rank: int) -> RankDecision:
    """Proceed only if the measurement dimension strictly exceeds the query rank."""
    if dimension > rank:
        return RankDecision(True, dimension, rank)
    return RankDecision(False, dimension, rank, f"measurement dimension {dimension} does not exceed query rank bound {rank}")


def theta_rank_bound(block_dims: Sequence[int], n_queries: int, n_state: int) -> int:
    """Upper bound on the rank of the stacked theta coefficients.

    Every step contributes at most ``min(m_t, 2N)`` independent rows because
    its rows factor through the 2N-dimensional state Jacobian.
    """
    return min(n_queries, sum(min(m, n_state) for m in block_dims))


def z_rank_bound(block_dims: Sequence[int], queries_per_block: Sequence[int]) -> int:
    """Upper bound for step-local queries: block-diagonal structure."""
    return sum(min(m, q) for m, q in zip(block_dims, queries_per_block))


def guard_queries(block_dims: Sequence[int], n_theta: int, z_per_block: Sequence[int], n_state: int) -> RankDecision:
    """Apply the rank condition separately to the theta and z coefficient matrices."""
    dim = int(sum(block_dims))
    if dim == 0:
        return RankDecision(False, 0, 0, "no measurements in batch")
    if n_theta:
        d = rank_guard(dim, theta_rank_bound(block_dims, n_theta, n_state))
        if not d.ok:
            return RankDecision(False, dim, d.rank_bound, "theta queries: " + d.reason)
    zb = z_rank_bound(block_dims, z_per_block)
    d = rank_guard(dim, zb)
    if not d.ok:
        return RankDecision(False, dim, zb, "z queries: " + d.reason)
    return RankDecision(True, dim, max(zb, theta_rank_bound(block_dims, n_theta, n_state) if n_theta else 0))


# -- full gradient -----------------------------------------------------------


@dataclass
class GradientTerms:
    theta: list[np.ndarray]  # [model, private, public]
    z: list[list[np.ndarray]]  # per term, per guest

    def total(self) -> tuple[np.ndarray, list[np.ndarray]]:
        theta = self.theta[0] + self.theta[1] + self.theta[2]
        z = [a + b + c for a, b, c in zip(*self.z)]
        return theta, z


def physics_gradients(
    net: Network,
    y_hat: np.ndarray,
    batch: PairBatch,
    host_terms: Sequence[MeasurementTerm],
    guest_terms: Sequence[Sequence[MeasurementTerm]],
    noise: NoiseSpec,
    vjp: Vjp,
    inner_products: Callable[[int, QuerySet], tuple[np.ndarray, list[np.ndarray]] | None] | None = None,
    jacobians: JacobianFn | None = None,
) -> GradientTerms:
    """Gradient of ``physics_loss`` w.r.t. host parameters and guest outputs, by pieces.

    ``inner_products(k, queries)`` returns guest k's private piece or None
    when the guest refused; the default evaluates it in the clear from the
    measurement arrays.  A refusal drops every measurement term of that
    guest for the batch.
    """
    y_hat = np.asarray(y_hat, dtype=float)
    batch.validate(len(y_hat))
    t_model = vjp(model_cotangent(net, y_hat, batch, noise))

    pub = np.zeros_like(y_hat)
    priv_theta = np.zeros_like(t_model[0])
    priv_z = [np.zeros_like(z) for z in t_model[1]]
    for term in host_terms:
        p, q = measurement_cotangents(y_hat, batch, term)
        pub += q
        g_t, g_z = vjp(p)
        priv_theta += g_t
        priv_z = [a + b for a, b in zip(priv_z, g_z)]
    for k, terms in enumerate(guest_terms):
        if not terms:
            continue
        qs = QuerySet(y_hat, batch, [t.model for t in terms], [t.mask for t in terms], vjp, jacobians)
        if inner_products is None:
            got = qs.rmatvec(qs.pack([t.u for t in terms]))
        else:
            got = inner_products(k, qs)
        if got is None:
            continue
        priv_theta += got[0]
        priv_z = [a + b for a, b in zip(priv_z, got[1])]
        for term in terms:
            pub += measurement_cotangents(y_hat, batch, term)[1]
    t_pub = vjp(pub)
    return GradientTerms([t_model[0], priv_theta, t_pub[0]], [t_model[1], priv_z, t_pub[1]])
