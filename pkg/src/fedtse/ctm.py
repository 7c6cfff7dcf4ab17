"""Cell Transmission Model (CTM) on a directed network of cells.

Units used throughout: density in veh/km, flow in veh/h, cell length in km,
time step in seconds.

One transition of the model, for every cell ``n`` and edge ``(m, n)``::

    S_mn = g_mn(t) * p_mn * min(q_c[m], v_f[m] * k[m])        sending
    R_n  = min(w[n] * (k_jam[n] - k[n]), q_c[n])               receiving
    Q_n  = min(sum_m S_mn + d_n, R_n)                          inflow
    q_mn = Q_n * S_mn / (sum_m S_mn + d_n)                     transfer
    k'_n = k_n + dt / dx_n * (sum_in q - sum_out q)            conservation

``g_mn(t)`` is a fixed-time green indicator (1 on unsignalized edges) and
``d_n`` the external demand offered to a source cell (its own demand plus the
virtual queue of vehicles that could not enter earlier).  Sink cells discharge
their sending capability ``min(q_c, v_f k)`` out of the network unimpeded.

Every ``min`` is differentiated along its active branch.  Ties select the
first argument as written above, which for the inflow is the sending side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SECONDS_PER_HOUR = 3600.0


class NetworkError(ValueError):
    """Raised when a network description violates a model invariant."""


@dataclass(frozen=True)
class FundamentalDiagram:
    free_flow_speed: float  # km/h
    jam_density: float  # veh/km
    capacity: float  # veh/h
    backward_wave_speed: float  # km/h

    def __post_init__(self) -> None:
        for name in ("free_flow_speed", "jam_density", "capacity", "backward_wave_speed"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise NetworkError(f"fundamental diagram: {name} must be strictly positive, got {value}")
        if self.backward_wave_speed > self.free_flow_speed:
            raise NetworkError(
                "fundamental diagram: backward_wave_speed must not exceed free_flow_speed "
                f"({self.backward_wave_speed} > {self.free_flow_speed})"
            )
        if self.capacity > self.free_flow_speed * self.jam_density:
            raise NetworkError(
                "fundamental diagram: capacity must not exceed free_flow_speed * jam_density "
                f"({self.capacity} > {self.free_flow_speed * self.jam_density})"
            )


@dataclass(frozen=True)
class SignalPhase:
    cycle_s: float
    green_start_s: float
    green_end_s: float

    def __post_init__(self) -> None:
        if not (0 <= self.green_start_s < self.green_end_s <= self.cycle_s):
            raise NetworkError(
                "signal phase: need 0 <= green_start_s < green_end_s <= cycle_s, got "
                f"({self.green_start_s}, {self.green_end_s}, {self.cycle_s})"
            )

    def is_green(self, time_s: float) -> bool:
        phase = math.fmod(time_s, self.cycle_s)
        return self.green_start_s <= phase < self.green_end_s


@dataclass(frozen=True)
class Cell:
    id: str
    length: float  # km
    fd: FundamentalDiagram
    is_source: bool = False
    is_sink: bool = False


@dataclass(frozen=True)
class Edge:
    upstream: str
    downstream: str
    turning_ratio: float = 1.0
    signal: SignalPhase | None = None


class Network:
    """Validated cell network compiled into flat numpy arrays.

    Cells are addressed by position ``0..n_cells-1`` internally; ``index``
    maps a cell id to that position.
    """

    def __init__(self, cells: Sequence[Cell], edges: Sequence[Edge], dt_s: float):
        if not cells:
            raise NetworkError("network: at least one cell is required")
        if not dt_s > 0:
            raise NetworkError(f"network: dt_s must be positive, got {dt_s}")
        self.cells = tuple(cells)
        self.edges = tuple(edges)
        self.dt_s = float(dt_s)
        self.index: dict[str, int] = {}
        for i, cell in enumerate(self.cells):
            if cell.id in self.index:
                raise NetworkError(f"network: duplicate cell id {cell.id!r}")
            self.index[cell.id] = i
        self._validate()
        self._compile()

    def _validate(self) -> None:
        dt_h = self.dt_s / SECONDS_PER_HOUR
        for cell in self.cells:
            if not cell.length > cell.fd.free_flow_speed * dt_h:
                raise NetworkError(
                    f"cell {cell.id!r}: CFL condition violated, length {cell.length} km must exceed "
                    f"free_flow_speed * dt = {cell.fd.free_flow_speed * dt_h:.6f} km"
                )
        seen = set()
        out_ratio: dict[str, float] = {c.id: 0.0 for c in self.cells}
        for edge in self.edges:
            for end in (edge.upstream, edge.downstream):
                if end not in self.index:
                    raise NetworkError(f"edge {edge.upstream!r}->{edge.downstream!r}: unknown cell {end!r}")
            if edge.upstream == edge.downstream:
                raise NetworkError(f"edge {edge.upstream!r}->{edge.downstream!r}: self-loops are not allowed")
            key = (edge.upstream, edge.downstream)
            if key in seen:
                raise NetworkError(f"edge {edge.upstream!r}->{edge.downstream!r}: duplicate edge")
            seen.add(key)
            if not 0.0 <= edge.turning_ratio <= 1.0:
                raise NetworkError(
                    f"edge {edge.upstream!r}->{edge.downstream!r}: turning ratio must lie in [0, 1], "
                    f"got {edge.turning_ratio}"
                )
            out_ratio[edge.upstream] += edge.turning_ratio
        for cell in self.cells:
            total = out_ratio[cell.id]
            if cell.is_sink:
                if total != 0.0 or any(e.upstream == cell.id for e in self.edges):
                    raise NetworkError(f"cell {cell.id!r}: sink cells must not have outgoing edges")
            elif abs(total - 1.0) > 1e-9:
                raise NetworkError(
                    f"cell {cell.id!r}: turning ratios of outgoing edges must sum to 1, got {total}"
                )

    def _compile(self) -> None:
        n, e = len(self.cells), len(self.edges)
        self.vf = np.array([c.fd.free_flow_speed for c in self.cells])
        self.kjam = np.array([c.fd.jam_density for c in self.cells])
        self.qc = np.array([c.fd.capacity for c in self.cells])
        self.w = np.array([c.fd.backward_wave_speed for c in self.cells])
        self.dx = np.array([c.length for c in self.cells])
        self.is_source = np.array([c.is_source for c in self.cells])
        self.is_sink = np.array([c.is_sink for c in self.cells])
        self.src = np.array([self.index[x.upstream] for x in self.edges], dtype=int)
        self.dst = np.array([self.index[x.downstream] for x in self.edges], dtype=int)
        self.p = np.array([x.turning_ratio for x in self.edges])
        # one-hot incidence, shape (E, N)
        self.a_src = np.zeros((e, n))
        self.a_dst = np.zeros((e, n))
        self.a_src[np.arange(e), self.src] = 1.0
        self.a_dst[np.arange(e), self.dst] = 1.0
        # density change per unit net flow: (dt in hours) / dx
        self.coef = (self.dt_s / SECONDS_PER_HOUR) / self.dx

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def cell_ids(self) -> list[str]:
        return [c.id for c in self.cells]

    def cell_index(self, cell_id: str) -> int:
        try:
            return self.index[cell_id]
        except KeyError:
            raise KeyError(f"unknown cell id {cell_id!r}") from None

    def green(self, t: int) -> np.ndarray:
        """0/1 green indicator per edge for time step ``t``."""
        return self.green_batch([t])[0]

    def green_batch(self, ts: Iterable[int]) -> np.ndarray:
        time_s = np.array([int(t) for t in ts], dtype=float) * self.dt_s
        out = np.ones((len(time_s), len(self.edges)))
        for e, x in enumerate(self.edges):
            if x.signal is not None:
                phase = np.fmod(time_s, x.signal.cycle_s)
                out[:, e] = (x.signal.green_start_s <= phase) & (phase < x.signal.green_end_s)
        return out

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        cells = []
        for c in self.cells:
            cells.append({
                "id": c.id,
                "length": c.length,
                "fd": {
                    "free_flow_speed": c.fd.free_flow_speed,
                    "jam_density": c.fd.jam_density,
                    "capacity": c.fd.capacity,
                    "backward_wave_speed": c.fd.backward_wave_speed,
                },
                "is_source": c.is_source,
                "is_sink": c.is_sink,
            })
        edges = []
        for x in self.edges:
            item: dict[str, Any] = {"from": x.upstream, "to": x.downstream, "turning_ratio": x.turning_ratio}
            if x.signal is not None:
                item["signal"] = {
                    "cycle_s": x.signal.cycle_s,
                    "green_start_s": x.signal.green_start_s,
                    "green_end_s": x.signal.green_end_s,
                }
            edges.append(item)
        return {"dt_s": self.dt_s, "cells": cells, "edges": edges}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Network":
        for key in ("cells", "edges", "dt_s"):
            if key not in data:
                raise NetworkError(f"network description: missing key {key!r}")
        try:
            cells = [
                Cell(
                    id=str(c["id"]),
                    length=float(c["length"]),
                    fd=FundamentalDiagram(**{k: float(v) for k, v in c["fd"].items()}),
                    is_source=bool(c.get("is_source", False)),
                    is_sink=bool(c.get("is_sink", False)),
                )
                for c in data["cells"]
            ]
            edges = [
                Edge(
                    upstream=str(x["from"]),
                    downstream=str(x["to"]),
                    turning_ratio=float(x.get("turning_ratio", 1.0)),
                    signal=SignalPhase(**x["signal"]) if x.get("signal") else None,
                )
                for x in data["edges"]
            ]
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"network description: malformed entry ({exc})") from exc
        return cls(cells, edges, float(data["dt_s"]))

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class TrafficState:
    """Snapshot at the start of a time step.

    ``density`` is k_t.  The flow fields describe the interval [t, t+1) that
    starts from this snapshot; they are ``None`` until evaluated.
    """

    density: np.ndarray
    queue: np.ndarray
    transfer_flow: np.ndarray | None = None
    boundary_inflow: np.ndarray | None = None
    boundary_outflow: np.ndarray | None = None
    cell_flow: np.ndarray | None = None

    @classmethod
    def empty(cls, net: Network) -> "TrafficState":
        return cls(density=np.zeros(net.n_cells), queue=np.zeros(net.n_cells))


@dataclass(frozen=True)
class DemandProfile:
    """External demand (veh/h) offered to each source cell.

    Rates are piecewise constant, given as ``(start_step, rate)`` breakpoints,
    with an optional sinusoidal peak added on top.
    """

    segments: Mapping[str, Sequence[tuple[int, float]]] = field(default_factory=dict)
    peak_amplitude: Mapping[str, float] = field(default_factory=dict)
    peak_period_steps: float = 0.0
    peak_phase_steps: float = 0.0

    def rates(self, net: Network, t: int) -> np.ndarray:
        out = np.zeros(net.n_cells)
        for cell_id, segs in self.segments.items():
            i = net.cell_index(cell_id)
            rate = 0.0
            for start, value in sorted(segs):
                if t >= start:
                    rate = value
            out[i] = rate
        if self.peak_period_steps > 0:
            wave = 0.5 * (1.0 - math.cos(2 * math.pi * (t - self.peak_phase_steps) / self.peak_period_steps))
            for cell_id, amp in self.peak_amplitude.items():
                out[net.cell_index(cell_id)] += amp * wave
        out[~net.is_source] = 0.0
        return np.maximum(out, 0.0)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DemandProfile":
        return cls(
            segments={k: [tuple(s) for s in v] for k, v in data.get("segments", {}).items()},
            peak_amplitude=dict(data.get("peak_amplitude", {})),
            peak_period_steps=float(data.get("peak_period_steps", 0.0)),
            peak_phase_steps=float(data.get("peak_phase_steps", 0.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "segments": {k: [list(s) for s in v] for k, v in self.segments.items()},
            "peak_amplitude": dict(self.peak_amplitude),
            "peak_period_steps": self.peak_period_steps,
            "peak_phase_steps": self.peak_phase_steps,
        }


# -- batched core ------------------------------------------------------


@dataclass
class Flows:
    """All intermediate CTM quantities for a batch, arrays shaped (B, E) or (B, N)."""

    sending: np.ndarray
    send_capability: np.ndarray
    receiving: np.ndarray
    offered: np.ndarray  # sum of sending flows plus external demand
    inflow: np.ndarray
    transfer: np.ndarray
    admitted: np.ndarray
    sink_outflow: np.ndarray
    outflow: np.ndarray
    next_density: np.ndarray
    # branch indicators
    free_branch: np.ndarray  # v_f k < q_c
    wave_branch: np.ndarray  # w (k_jam - k) <= q_c
    send_branch: np.ndarray  # offered <= receiving


def evaluate_flows(net: Network, k: np.ndarray, attempt: np.ndarray, green: np.ndarray) -> Flows:
    """Evaluate one transition for a batch of densities ``k`` of shape (B, N)."""
    k = np.atleast_2d(k)
    vk = net.vf * k
    free = vk < net.qc
    cap = np.where(free, vk, net.qc)
    sending = green * net.p * cap[:, net.src]
    wave = net.w * (net.kjam - k)
    wave_branch = wave <= net.qc
    receiving = np.where(wave_branch, wave, net.qc)
    offered = sending @ net.a_dst + attempt
    send_branch = offered <= receiving
    inflow = np.where(send_branch, offered, receiving)
    ratio = np.where(send_branch, 1.0, np.divide(receiving, offered, out=np.zeros_like(offered), where=offered > 0))
    transfer = sending * ratio[:, net.dst]
    admitted = attempt * ratio
    sink_outflow = cap * net.is_sink
    outflow = transfer @ net.a_src + sink_outflow
    next_density = k + net.coef * (transfer @ net.a_dst + admitted - outflow)
    return Flows(
        sending=sending,
        send_capability=cap,
        receiving=receiving,
        offered=offered,
        inflow=inflow,
        transfer=transfer,
        admitted=admitted,
        sink_outflow=sink_outflow,
        outflow=outflow,
        next_density=next_density,
        free_branch=free,
        wave_branch=wave_branch,
        send_branch=send_branch,
    )


def flow_tangents(net: Network, fl: Flows, green: np.ndarray, attempt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of next density and of cell outflow with respect to k.

    Returns two arrays of shape (B, N, N): ``d next_density / d k`` and
    ``d outflow / d k`` along the active branch of every ``min``.
    """
    b, n = fl.next_density.shape
    eye = np.eye(n)
    dcap = np.where(fl.free_branch, net.vf, 0.0)  # (B, N)
    # dS_e / dk_j = green * p * dcap[src] * [j == src]
    dsend = (green * net.p * dcap[:, net.src])[:, :, None] * net.a_src[None, :, :]  # (B, E, N)
    drecv = np.where(fl.wave_branch, -net.w, 0.0)[:, :, None] * eye[None]  # (B, N, N)
    doffered = np.einsum("en,bej->bnj", net.a_dst, dsend)
    safe = np.where(fl.offered > 0, fl.offered, 1.0)
    recv_active = ~fl.send_branch & (fl.offered > 0)
    # ratio = R / offered on the receiving branch, 1 on the sending branch
    dratio = np.where(
        recv_active[:, :, None],
        drecv / safe[:, :, None] - (fl.receiving / safe**2)[:, :, None] * doffered,
        0.0,
    )
    ratio = np.where(fl.send_branch, 1.0, np.where(fl.offered > 0, fl.receiving / safe, 0.0))
    dtransfer = dsend * ratio[:, net.dst][:, :, None] + fl.sending[:, :, None] * dratio[:, net.dst, :]
    dadmitted = attempt[:, :, None] * dratio
    dsink = (dcap * net.is_sink)[:, :, None] * eye[None]
    doutflow = np.einsum("en,bej->bnj", net.a_src, dtransfer) + dsink
    dinflow = np.einsum("en,bej->bnj", net.a_dst, dtransfer) + dadmitted
    dnext = eye[None] + net.coef[None, :, None] * (dinflow - doutflow)
    return dnext, doutflow


def model_step(
    net: Network,
    density: np.ndarray,
    ts: Sequence[int],
    attempt_t: np.ndarray,
    attempt_next: np.ndarray,
    jacobian: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """The state-space map g for a batch: densities at t to (k_{t+1}, flow_{t+1}).

    ``density`` is (B, N); the result is (B, 2N) laid out as densities then
    cell flows.  With ``jacobian`` the derivative with respect to the (B, 2N)
    input state is also returned, shape (B, 2N, 2N); the input flow block has
    no influence on g, so its columns are zero.
    """
    density = np.atleast_2d(density)
    ts = np.asarray(ts, dtype=int)
    g_now = net.green_batch(ts)
    g_next = net.green_batch(ts + 1)
    a_now = np.atleast_2d(attempt_t)
    a_next = np.atleast_2d(attempt_next)
    now = evaluate_flows(net, density, a_now, g_now)
    nxt = evaluate_flows(net, now.next_density, a_next, g_next)
    out = np.concatenate([now.next_density, nxt.outflow], axis=1)
    if not jacobian:
        return out, None
    b, n = density.shape
    dk, _ = flow_tangents(net, now, g_now, a_now)
    _, dq = flow_tangents(net, nxt, g_next, a_next)
    jac = np.zeros((b, 2 * n, 2 * n))
    jac[:, :n, :n] = dk
    jac[:, n:, :n] = dq @ dk
    return out, jac


def kink_margin(net: Network, density: np.ndarray, attempt: np.ndarray, t: int) -> float:
    """Smallest relative distance of any ``min`` in one transition from its tie."""
    fl = evaluate_flows(net, density, attempt, net.green_batch([t]))
    k = np.atleast_2d(density)
    gaps = [
        np.abs(net.vf * k - net.qc) / net.qc,
        np.abs(net.w * (net.kjam - k) - net.qc) / net.qc,
        np.abs(fl.offered - fl.receiving) / net.qc,
    ]
    return float(min(g.min() for g in gaps))


# -- single-state operations -------------------------------------------


def _attempt(net: Network, state: TrafficState, demand: np.ndarray | None) -> np.ndarray:
    base = np.zeros(net.n_cells) if demand is None else np.asarray(demand, dtype=float)
    return (base + state.queue * SECONDS_PER_HOUR / net.dt_s) * net.is_source


def sending(net: Network, cell_id: str, state: TrafficState, t: int) -> dict[str, float]:
    """Sending flow S_mn,t of cell ``cell_id`` towards each downstream cell."""
    m = net.cell_index(cell_id)
    cap = min(net.qc[m], net.vf[m] * state.density[m])
    green = net.green(t)
    return {
        x.downstream: float(green[e] * net.p[e] * cap)
        for e, x in enumerate(net.edges)
        if net.src[e] == m
    }


def receiving(net: Network, cell_id: str, state: TrafficState) -> float:
    n = net.cell_index(cell_id)
    return float(min(net.w[n] * (net.kjam[n] - state.density[n]), net.qc[n]))


def inflow(net: Network, cell_id: str, state: TrafficState, t: int, demand: np.ndarray | None = None) -> float:
    n = net.cell_index(cell_id)
    fl = evaluate_flows(net, state.density, _attempt(net, state, demand)[None], net.green(t)[None])
    return float(fl.inflow[0, n])


def transfer_flows(
    net: Network, cell_id: str, state: TrafficState, t: int, demand: np.ndarray | None = None
) -> dict[str, float]:
    """Transfer flows q_mn,t into ``cell_id`` keyed by upstream cell id."""
    n = net.cell_index(cell_id)
    fl = evaluate_flows(net, state.density, _attempt(net, state, demand)[None], net.green(t)[None])
    return {x.upstream: float(fl.transfer[0, e]) for e, x in enumerate(net.edges) if net.dst[e] == n}


def with_flows(net: Network, state: TrafficState, demand_t: np.ndarray | None, t: int) -> TrafficState:
    """Return ``state`` with the flow fields of interval [t, t+1) filled in."""
    fl = evaluate_flows(net, state.density, _attempt(net, state, demand_t)[None], net.green(t)[None])
    return replace(
        state,
        transfer_flow=fl.transfer[0],
        boundary_inflow=fl.admitted[0],
        boundary_outflow=fl.sink_outflow[0],
        cell_flow=fl.outflow[0],
    )


def step(net: Network, state: TrafficState, demand_t: np.ndarray | None, t: int) -> TrafficState:
    """Advance one time step; the returned snapshot has unevaluated flows."""
    demand = np.zeros(net.n_cells) if demand_t is None else np.asarray(demand_t, dtype=float) * net.is_source
    attempt = _attempt(net, state, demand)
    fl = evaluate_flows(net, state.density, attempt[None], net.green(t)[None])
    unserved = (attempt - fl.admitted[0]) * net.dt_s / SECONDS_PER_HOUR
    return TrafficState(density=fl.next_density[0], queue=np.maximum(unserved, 0.0))


def simulate(
    net: Network,
    demand: DemandProfile,
    horizon: int,
    process_noise: float = 0.0,
    seed: int = 0,
    initial: TrafficState | None = None,
) -> list[TrafficState]:
    """Run the CTM for ``horizon`` steps; returns snapshots k_0 .. k_{T-1} with flows.

    Gaussian noise of standard deviation ``process_noise`` (veh/km) perturbs
    the densities after every transition and the result is clamped to
    [0, k_jam]; flows are always recomputed from the perturbed densities.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if process_noise < 0:
        raise ValueError("process_noise must be non-negative")
    rng = np.random.default_rng(seed)
    state = initial if initial is not None else TrafficState.empty(net)
    out = []
    for t in range(horizon):
        d = demand.rates(net, t)
        state = with_flows(net, state, d, t)
        out.append(state)
        state = step(net, state, d, t)
        if process_noise > 0:
            noisy = state.density + process_noise * rng.standard_normal(net.n_cells)
            state = replace(state, density=np.clip(noisy, 0.0, net.kjam))
    return out


def attempted_inflow(net: Network, state: TrafficState, demand_t: np.ndarray) -> np.ndarray:
    """External flow offered to sources at this snapshot (demand plus queue)."""
    return _attempt(net, state, demand_t)


def step_jacobian(
    net: Network,
    state: TrafficState,
    t: int,
    demand_t: np.ndarray | None = None,
    demand_next: np.ndarray | None = None,
) -> np.ndarray:
    """Jacobian of g at ``state`` with respect to y_t = (densities, cell flows).

    ``demand_t`` and ``demand_next`` are the external inflows offered to the
    sources at t and t+1; both are held fixed.
    """
    n = net.n_cells
    a_t = np.zeros(n) if demand_t is None else np.asarray(demand_t, dtype=float) * net.is_source
    a_n = np.zeros(n) if demand_next is None else np.asarray(demand_next, dtype=float) * net.is_source
    _, jac = model_step(net, state.density[None], [t], a_t[None], a_n[None], jacobian=True)
    return jac[0]


def total_vehicles(net: Network, density: np.ndarray) -> float:
    return float(np.dot(density, net.dx))
