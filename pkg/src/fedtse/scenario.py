"""Synthetic vertically partitioned traffic datasets generated from the CTM.

The municipal authority (host, party 0) holds loop-detector counts on a few
cells and the ground-truth states.  Each mobility provider (guest, party k)
observes a thinned sample of the vehicle population: per cell and step it
knows the total travel time and total travel distance of its own vehicles,
from which it also forms speed and density measurements.

Fleet sampling is mesoscopic.  A cell holding ``N = k * dx`` vehicle
equivalents is split into ``ceil(N)`` equal shares; each share belongs to the
fleet independently with probability ``p``.  At ``p = 1`` the fleet sees the
whole population exactly, and the sampled vehicle count is unbiased for
``p * N`` at any penetration.  The uniforms behind the thinning come from a
stream that does not depend on ``p``, so fleets at a higher penetration are
supersets of fleets at a lower one for the same seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import ctm
from .ctm import SECONDS_PER_HOUR, DemandProfile, Network

SPEED_FLOOR_DENSITY = 1e-6  # veh/km


class ScenarioError(ValueError):
    pass


def default_network_path() -> Path:
    return Path(str(resources.files("fedtse") / "data" / "corridor.json"))


def default_demand() -> dict[str, Any]:
    return {
        "segments": {"c0": [[0, 350.0]], "s_in": [[0, 120.0]]},
        "peak_amplitude": {"c0": 500.0, "s_in": 100.0},
        "peak_period_steps": 540.0,
        "peak_phase_steps": 0.0,
    }


@dataclass
class ScenarioConfig:
    network: str = ""  # path to a network JSON file; empty selects the bundled corridor
    horizon: int = 3000  # simulated steps after warm-up
    dt_s: float = 10.0
    detector_cells: list[str] = field(default_factory=lambda: ["c1", "c7"])
    penetration: list[float] = field(default_factory=lambda: [0.2])  # one entry per guest
    history: int = 9
    warmup: int = 60
    loop_noise: float = 0.3  # counts per step
    speed_noise: float = 0.05  # relative
    density_noise: float = 0.05  # relative
    process_noise: float = 1.0  # veh/km
    demand: dict[str, Any] = field(default_factory=default_demand)
    seed: int = 0

    def load_network(self) -> Network:
        path = self.network or default_network_path()
        try:
            net = Network.load(path)
        except FileNotFoundError:
            raise ScenarioError(f"network file not found: {path}") from None
        if abs(net.dt_s - self.dt_s) > 1e-12:
            raise ScenarioError(f"dt_s mismatch: config has {self.dt_s}, network has {net.dt_s}")
        return net

    def validate(self, net: Network | None = None) -> Network:
        net = net or self.load_network()
        unknown = [c for c in self.detector_cells if c not in net.index]
        if unknown:
            raise ScenarioError(f"detector cells not in network: {unknown}")
        if not self.detector_cells:
            raise ScenarioError("at least one detector cell is required")
        for p in self.penetration:
            if not 0.0 < p <= 1.0:
                raise ScenarioError(f"penetration must lie in (0, 1], got {p}")
        if self.history < 1:
            raise ScenarioError("history window must be at least 1")
        if self.horizon <= self.history:
            raise ScenarioError(f"horizon ({self.horizon}) must exceed the history window ({self.history})")
        for name in ("loop_noise", "speed_noise", "density_noise", "process_noise"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be non-negative")
        return net

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ScenarioError(f"unknown scenario config keys: {sorted(extra)}")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Dataset:
    """Aligned per-step records for the host and every guest.

    Row ``i`` corresponds to absolute simulation step ``t[i]``.  State vectors
    are laid out as densities (veh/km) for every cell followed by cell
    outflows (veh/h).  Guest measurements are laid out as speeds (km/h)
    followed by densities (veh/km).  ``guest_mask`` is the per-cell coverage:
    true where the fleet sampled at least one vehicle equivalent, which is
    where a speed measurement exists.  The density estimate is defined
    everywhere (zero when nothing was sampled).
    """

    t: np.ndarray
    x_host: np.ndarray
    x_guest: list[np.ndarray]
    labels: np.ndarray
    u_host: np.ndarray
    u_guest: list[np.ndarray]
    guest_mask: list[np.ndarray]
    demand: np.ndarray  # external inflow offered to sources at t (veh/h)
    detector_index: np.ndarray
    penetration: list[float]
    history: int

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_guests(self) -> int:
        return len(self.x_guest)

    @property
    def n_cells(self) -> int:
        return self.labels.shape[1] // 2

    def subset(self, idx: Sequence[int] | slice) -> "Dataset":
        return Dataset(
            t=self.t[idx],
            x_host=self.x_host[idx],
            x_guest=[x[idx] for x in self.x_guest],
            labels=self.labels[idx],
            u_host=self.u_host[idx],
            u_guest=[u[idx] for u in self.u_guest],
            guest_mask=[m[idx] for m in self.guest_mask],
            demand=self.demand[idx],
            detector_index=self.detector_index,
            penetration=list(self.penetration),
            history=self.history,
        )

    def speed_features(self, k: int) -> np.ndarray:
        """h-step fleet speeds of guest ``k`` (zero where unobserved), one row per step."""
        n = self.n_cells
        tt = self.x_guest[k].reshape(len(self), self.history, 2, n)
        time, dist = tt[:, :, 0, :], tt[:, :, 1, :]
        speed = np.divide(dist, time, out=np.zeros_like(dist), where=time > 0)
        return speed.reshape(len(self), -1)

    # -- JSON-lines -------------------------------------------------------

    def records(self):
        for i in range(len(self)):
            rec: dict[str, Any] = {
                "t": int(self.t[i]),
                "x_host": self.x_host[i].tolist(),
                "labels": self.labels[i].tolist(),
                "u_host": self.u_host[i].tolist(),
                "demand": self.demand[i].tolist(),
            }
            for k in range(self.n_guests):
                rec[f"x_guest_{k + 1}"] = self.x_guest[k][i].tolist()
                rec[f"u_guest_{k + 1}"] = self.u_guest[k][i].tolist()
                rec[f"mask_{k + 1}"] = self.guest_mask[k][i].astype(int).tolist()
            yield rec

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")

    def meta(self) -> dict[str, Any]:
        return {
            "detector_index": self.detector_index.tolist(),
            "penetration": list(self.penetration),
            "history": self.history,
        }

    @classmethod
    def load_jsonl(cls, path: str | Path, meta: dict[str, Any]) -> "Dataset":
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        if not rows:
            raise ScenarioError(f"empty dataset file: {path}")
        k_guests = len(meta["penetration"])
        return cls(
            t=np.array([r["t"] for r in rows], dtype=int),
            x_host=np.array([r["x_host"] for r in rows], dtype=float),
            x_guest=[np.array([r[f"x_guest_{k + 1}"] for r in rows], dtype=float) for k in range(k_guests)],
            labels=np.array([r["labels"] for r in rows], dtype=float),
            u_host=np.array([r["u_host"] for r in rows], dtype=float),
            u_guest=[np.array([r[f"u_guest_{k + 1}"] for r in rows], dtype=float) for k in range(k_guests)],
            guest_mask=[np.array([r[f"mask_{k + 1}"] for r in rows], dtype=bool) for k in range(k_guests)],
            demand=np.array([r["demand"] for r in rows], dtype=float),
            detector_index=np.array(meta["detector_index"], dtype=int),
            penetration=list(meta["penetration"]),
            history=int(meta["history"]),
        )


@dataclass
class FleetSample:
    travel_time: np.ndarray  # veh-h per cell and step
    travel_distance: np.ndarray  # veh-km per cell and step
    sampled: np.ndarray  # number of sampled vehicle shares
    speed: np.ndarray  # km/h, NaN where nothing sampled
    density: np.ndarray  # veh/km estimate


def sample_fleet(
    density: np.ndarray,
    flow: np.ndarray,
    dx: np.ndarray,
    dt_s: float,
    penetration: float,
    rng: np.random.Generator,
    speed_noise: float = 0.0,
    density_noise: float = 0.0,
) -> FleetSample:
    """Thin the population in every (step, cell) down to one fleet's share.

    ``density`` and ``flow`` have shape (T, N).  Travel time of the sampled
    vehicles is ``m * dt`` and travel distance ``m * v * dt`` with ``m`` the
    sampled vehicle equivalents and ``v = q / max(k, eps)``; relative Gaussian
    noise then perturbs the two totals independently.
    """
    density = np.asarray(density, dtype=float)
    flow = np.asarray(flow, dtype=float)
    population = np.maximum(density, 0.0) * dx
    shares = np.ceil(population - 1e-12).astype(int)
    shares[population <= 0] = 0
    nmax = max(int(shares.max()), 1)
    draws = rng.random(density.shape + (nmax,))
    noise_t = rng.standard_normal(density.shape)
    noise_d = rng.standard_normal(density.shape)
    present = np.arange(nmax) < shares[..., None]
    sampled = np.sum((draws < penetration) & present, axis=-1)
    m = np.divide(sampled * population, shares, out=np.zeros_like(population), where=shares > 0)
    hours = dt_s / SECONDS_PER_HOUR
    speed_true = flow / np.maximum(density, SPEED_FLOOR_DENSITY)
    travel_time = np.maximum(m * hours * (1.0 + density_noise * noise_t), 0.0)
    travel_distance = np.maximum(m * speed_true * hours * (1.0 + speed_noise * noise_d), 0.0)
    has = (sampled > 0) & (travel_time > 0)
    speed = np.full(density.shape, np.nan)
    speed[has] = travel_distance[has] / travel_time[has]
    dens = travel_time / (penetration * dx * hours)
    return FleetSample(travel_time, travel_distance, sampled, speed, dens)


def _window(series: np.ndarray, h: int) -> np.ndarray:
    """Stack rows t-h+1..t for every t >= h-1; result (T-h+1, h * width)."""
    t_len = series.shape[0]
    idx = np.arange(h - 1, t_len)[:, None] - np.arange(h - 1, -1, -1)[None, :]
    return series[idx].reshape(len(idx), -1)


def generate(config: ScenarioConfig, net: Network | None = None) -> Dataset:
    net = config.validate(net)
    demand = DemandProfile.from_dict(config.demand)
    total = config.horizon + config.warmup
    states = ctm.simulate(net, demand, total, config.process_noise, seed=config.seed)[config.warmup :]
    density = np.stack([s.density for s in states])
    flow = np.stack([s.cell_flow for s in states])
    offered = np.stack([
        ctm.attempted_inflow(net, s, demand.rates(net, t + config.warmup)) for t, s in enumerate(states)
    ])
    hours = net.dt_s / SECONDS_PER_HOUR
    h = config.history

    det = np.array([net.cell_index(c) for c in config.detector_cells], dtype=int)
    host_rng = np.random.default_rng([config.seed, 1])
    counts = flow[:, det] * hours + config.loop_noise * host_rng.standard_normal((len(states), len(det)))
    counts = np.maximum(counts, 0.0)

    x_guest, u_guest, masks = [], [], []
    for k, p in enumerate(config.penetration):
        rng = np.random.default_rng([config.seed, 100 + k])
        fleet = sample_fleet(density, flow, net.dx, net.dt_s, p, rng, config.speed_noise, config.density_noise)
        per_step = np.concatenate([fleet.travel_time, fleet.travel_distance], axis=1)
        x_guest.append(_window(per_step, h))
        speed_ok = ~np.isnan(fleet.speed)
        u = np.concatenate([np.nan_to_num(fleet.speed), fleet.density], axis=1)[h - 1 :]
        mask = speed_ok[h - 1 :]
        u_guest.append(u)
        masks.append(mask)

    return Dataset(
        t=np.arange(h - 1, len(states)) + config.warmup,
        x_host=_window(counts, h),
        x_guest=x_guest,
        labels=np.concatenate([density, flow], axis=1)[h - 1 :],
        u_host=(counts / hours)[h - 1 :],
        u_guest=u_guest,
        guest_mask=masks,
        demand=offered[h - 1 :],
        detector_index=det,
        penetration=list(config.penetration),
        history=h,
    )


MIN_SPLIT_LENGTH = 40


def split_sizes(n: int) -> tuple[int, int, int]:
    if n < MIN_SPLIT_LENGTH:
        raise ScenarioError(f"dataset too short: {n} records, need at least {MIN_SPLIT_LENGTH}")
    n_test = int(round(0.2 * n))
    n_val = int(round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_train, n_val, _ = split_sizes(n)
    idx = np.arange(n)
    return idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :]


def split(dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous chronological 70/10/20 split into train, validation and test."""
    tr, va, te = split_indices(len(dataset))
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)
