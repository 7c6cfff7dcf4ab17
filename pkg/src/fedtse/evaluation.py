"""Metrics, baseline runners and experiment sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import fedtse as ft
from .ctm import Network
from .scenario import Dataset, ScenarioConfig, generate, split_indices

log = logging.getLogger(__name__)

METHODS = ("tse_n", "tse_p", "oracle", "fedtse", "fedtse_pi", "fedtse_pi_v", "fedtse_pi_k")
PROTOCOL_METHODS = ("fedtse", "fedtse_pi", "fedtse_pi_v", "fedtse_pi_k")
# Compact architecture and step sizes tuned on the default corridor.
SUPERVISED_TRAIN: dict[str, Any] = {
    "lr": 5e-5,
    "max_rounds": 6000,
    "host_hidden": [16],
    "top_hidden": [32],
    "guest_out": 8,
}
PHYSICS_TRAIN: dict[str, Any] = {
    **SUPERVISED_TRAIN,
    "lr": 1e-3,
    "batch_size": 256,
    "max_rounds": 4000,
    "eval_every": 100,
    "process_sigma_density": 8.0,
    "process_sigma_flow": 240.0,
    "clip_norm": 100.0,
    "speed_warmup": 1500,
    "speed_sigma": 6.0,
}


def recommended_train(method: str) -> dict[str, Any]:
    """Training settings used by the CLI and sweeps unless overridden."""
    return copy.deepcopy(PHYSICS_TRAIN if method in ft.PI_METHODS else SUPERVISED_TRAIN)


CSV_COLUMNS = ["method", "penetration", "q", "seed", "density_rmse", "density_mae", "flow_rmse", "flow_mae", "rounds_to_threshold"]


def rmse(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred, dtype=float), np.asarray(labels, dtype=float)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    return float(np.sqrt(np.mean((pred - labels) ** 2)))


def mae(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred, dtype=float), np.asarray(labels, dtype=float)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    return float(np.mean(np.abs(pred - labels)))


@dataclass
class MetricReport:
    method: str
    penetration: float
    q: int
    seed: int
    density_rmse: float  # veh/km
    density_mae: float
    flow_rmse: float  # veh/min
    flow_mae: float
    rounds_to_threshold: int | None = None

    def __post_init__(self):
        for a, b in (("density_rmse", "density_mae"), ("flow_rmse", "flow_mae")):
            if not getattr(self, a) >= getattr(self, b) - 1e-12 >= -1e-12:
                raise ValueError(f"{a} must be >= {b} >= 0")

    def row(self) -> dict[str, Any]:
        d = asdict(self)
        d["rounds_to_threshold"] = "" if self.rounds_to_threshold is None else self.rounds_to_threshold
        return d


def report(method: str, pred: np.ndarray, labels: np.ndarray, penetration: float, q: int, seed: int, rounds: int | None = None) -> MetricReport:
    n = labels.shape[1] // 2
    return MetricReport(
        method,
        penetration,
        q,
        seed,
        rmse(pred[:, :n], labels[:, :n]),
        mae(pred[:, :n], labels[:, :n]),
        rmse(pred[:, n:] / 60.0, labels[:, n:] / 60.0),
        mae(pred[:, n:] / 60.0, labels[:, n:] / 60.0),
        rounds,
    )


# -- running one method ---------------------------------------------------


def host_data(ds: Dataset, labelled: bool = True) -> ft.HostData:
    tr, va, te = split_indices(len(ds))
    return ft.HostData(
        features=ds.x_host,
        t=ds.t,
        train_rows=tr,
        val_rows=va,
        test_rows=te,
        labels=ds.labels if labelled else None,
        eval_labels=ds.labels,
        u_host=ds.u_host,
        detector_index=ds.detector_index,
        demand=ds.demand,
    )


def guest_data(ds: Dataset, k: int) -> ft.GuestData:
    tr, _, _ = split_indices(len(ds))
    n = ds.n_cells
    return ft.GuestData(
        features=ds.x_guest[k],
        train_rows=tr,
        speed=ds.u_guest[k][:, :n],
        density=ds.u_guest[k][:, n:],
        coverage=ds.guest_mask[k],
    )


def run_hash(scenario: ScenarioConfig, cfg: ft.TrainConfig, method: str, backend: str) -> str:
    return ft.config_hash(scenario.to_dict(), cfg.to_dict(), method, backend)


def make_parties(
    ds: Dataset,
    net: Network,
    scenario: ScenarioConfig,
    cfg: ft.TrainConfig,
    method: str,
    backend: str = "plaintext",
    keep_payloads: bool = False,
) -> tuple[ft.HostParty, list[ft.GuestParty]]:
    n_out = cfg.guest_out or net.n_cells
    h = run_hash(scenario, cfg, method, backend)
    guests = [ft.GuestParty(k + 1, guest_data(ds, k), n_out, cfg, h, method, backend) for k in range(ds.n_guests)]
    host = ft.HostParty(
        host_data(ds, labelled=method == ft.SUPERVISED),
        net,
        [g.id for g in guests],
        [n_out] * len(guests),
        cfg,
        h,
        method,
        backend,
        penetration=ds.penetration,
        loop_noise=scenario.loop_noise,
        keep_payloads=keep_payloads,
    )
    return host, guests


def run_method(
    method: str,
    ds: Dataset,
    net: Network,
    scenario: ScenarioConfig,
    cfg: ft.TrainConfig,
    backend: str = "plaintext",
    keep_payloads: bool = False,
) -> tuple[MetricReport, ft.RunResult]:
    """Train one method on ``ds`` and score it on the test split."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    hd = host_data(ds)
    n_out = cfg.guest_out or net.n_cells
    if method == "tse_n":
        res = ft.train_centralized(hd, net, [], [], cfg)
    elif method == "tse_p":
        res = ft.train_centralized(hd, net, [ds.speed_features(k) for k in range(ds.n_guests)], [n_out] * ds.n_guests, cfg)
    elif method == "oracle":
        res = ft.train_centralized(hd, net, ds.x_guest, [n_out] * ds.n_guests, cfg)
    else:
        host, guests = make_parties(ds, net, scenario, cfg, method, backend, keep_payloads)
        res = ft.run_inproc(host, guests)
    pen = float(ds.penetration[0]) if ds.penetration else 0.0
    rounds = res.rounds_to_target if method in PROTOCOL_METHODS else None
    rep = report(method, res.test_pred, ds.labels[hd.test_rows], pen, cfg.q, cfg.seed, rounds)
    return rep, res


def run_baseline(kind: str, ds: Dataset, net: Network, scenario: ScenarioConfig, cfg: ft.TrainConfig) -> MetricReport:
    return run_method(kind, ds, net, scenario, cfg)[0]


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepGrid:
    methods: list[str]
    penetrations: list[float]
    qs: list[int]
    seeds: list[int]
    scenario: dict[str, Any]
    train: dict[str, Any]
    method_train: dict[str, dict[str, Any]] | None = None  # per-method overrides

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SweepGrid":
        try:
            grid = cls(
                methods=list(data["methods"]),
                penetrations=[float(p) for p in data["penetrations"]],
                qs=[int(q) for q in data.get("qs", [1])],
                seeds=[int(s) for s in data["seeds"]],
                scenario=dict(data.get("scenario", {})),
                train=dict(data.get("train", {})),
                method_train=dict(data.get("method_train", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed sweep grid: {exc}") from None
        grid.validate()
        return grid

    def validate(self) -> None:
        if not (self.methods and self.penetrations and self.qs and self.seeds):
            raise ValueError("sweep grid is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods in grid: {bad}")

    def cells(self) -> Iterable[tuple[str, float, int, int]]:
        for m in self.methods:
            for p in self.penetrations:
                for q in self.qs:
                    for s in self.seeds:
                        yield m, p, q, s


def aggregate(rows: Sequence[MetricReport]) -> list[dict[str, Any]]:
    groups: dict[tuple[str, float, int], list[MetricReport]] = {}
    for r in rows:
        groups.setdefault((r.method, r.penetration, r.q), []).append(r)
    out = []
    for (m, p, q), rs in groups.items():
        rounds = [r.rounds_to_threshold for r in rs if r.rounds_to_threshold is not None]
        out.append(
            {
                "method": m,
                "penetration": p,
                "q": q,
                "n_seeds": len(rs),
                "density_rmse": float(np.mean([r.density_rmse for r in rs])),
                "density_mae": float(np.mean([r.density_mae for r in rs])),
                "flow_rmse": float(np.mean([r.flow_rmse for r in rs])),
                "flow_mae": float(np.mean([r.flow_mae for r in rs])),
                "rounds_to_threshold": float(np.median(rounds)) if rounds else "",
            }
        )
    return out


def read_rows(path: Path) -> list[MetricReport]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["method"].startswith("#") or rec["method"] == "mean":
                break
            rows.append(
                MetricReport(
                    rec["method"],
                    float(rec["penetration"]),
                    int(rec["q"]),
                    int(rec["seed"]),
                    float(rec["density_rmse"]),
                    float(rec["density_mae"]),
                    float(rec["flow_rmse"]),
                    float(rec["flow_mae"]),
                    int(rec["rounds_to_threshold"]) if rec["rounds_to_threshold"] else None,
                )
            )
    return rows


def write_results(rows: Sequence[MetricReport], csv_path: Path) -> None:
    agg = aggregate(rows)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
        fh.write("# aggregate over seeds\n")
        aw = csv.writer(fh)
        aw.writerow(["method", "penetration", "q", "n_seeds", "density_rmse", "density_mae", "flow_rmse", "flow_mae", "rounds_to_threshold"])
        for a in agg:
            aw.writerow(list(a.values()))
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps({"rows": [r.row() for r in rows], "aggregate": agg}, indent=2))


def sweep(grid: SweepGrid, out_csv: Path | None = None, resume: bool = False) -> list[MetricReport]:
    """Run every (method, penetration, Q, seed) cell; optionally skip cells already in ``out_csv``."""
    grid.validate()
    done: dict[tuple[str, float, int, int], MetricReport] = {}
    if resume and out_csv is not None and out_csv.exists():
        for r in read_rows(out_csv):
            done[(r.method, r.penetration, r.q, r.seed)] = r
    rows: list[MetricReport] = []
    datasets: dict[tuple[float, int], tuple[Dataset, Network, ScenarioConfig]] = {}
    for m, p, q, s in grid.cells():
        if (m, p, q, s) in done:
            rows.append(done[(m, p, q, s)])
            continue
        if (p, s) not in datasets:
            sc = ScenarioConfig.from_dict({**grid.scenario, "penetration": [p], "seed": s})
            net = sc.validate()
            datasets[(p, s)] = (generate(sc, net), net, sc)
        ds, net, sc = datasets[(p, s)]
        train = {**recommended_train(m), **grid.train, **(grid.method_train or {}).get(m, {}), "q": q, "seed": s}
        cfg = ft.TrainConfig.from_dict(train)
        rep, _ = run_method(m, ds, net, sc, cfg)
        log.info("%s p=%.2f q=%d seed=%d density_rmse=%.3f", m, p, q, s, rep.density_rmse)
        rows.append(rep)
        if out_csv is not None:
            write_results(rows, out_csv)
    if out_csv is not None:
        write_results(rows, out_csv)
    return rows
