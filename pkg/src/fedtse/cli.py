"""Command-line entry point: ``fedtse {generate,train,host,guest,sweep}``.

A run is described by a JSON config with optional ``scenario``, ``train``,
``method``, ``backend`` and ``transport`` sections; command-line flags
override the file.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import evaluation as ev
from . import fedtse as ft
from .ctm import Network
from .messages import FEDTSE_PI_TYPES, FEDTSE_TYPES, ProtocolError
from .scenario import Dataset, ScenarioConfig, ScenarioError, generate
from .transport import FramingError, SocketLink, TransportError, listen, serve

log = logging.getLogger("fedtse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
BACKENDS = ("plaintext", "ipe")
TRANSPORTS = ("inproc", "tcp")


class UsageError(ValueError):
    """Bad flags, config files or references to missing inputs."""


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    train: ft.TrainConfig
    method: str = ft.SUPERVISED
    backend: str = "plaintext"
    transport: str = "inproc"
    out: Path = Path("out")
    data: Path | None = None  # directory written by ``generate``
    extra: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> Network:
        if self.method not in ev.METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(ev.METHODS)}")
        if self.backend not in BACKENDS:
            raise UsageError(f"unknown backend {self.backend!r}")
        if self.transport not in TRANSPORTS:
            raise UsageError(f"unknown transport {self.transport!r}")
        if self.data is not None and not (self.data / "dataset.jsonl").exists():
            raise UsageError(f"no dataset in {self.data}; run `fedtse generate` first")
        return self.scenario.validate()

    def run_hash(self) -> str:
        return ev.run_hash(self.scenario, self.train, self.method, self.backend)


def _read_json(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path} must hold a JSON object")
    return data


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(raw) - {"scenario", "train", "method", "backend", "transport", "out", "data"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    sc = dict(raw.get("scenario", {}))
    method = getattr(args, "method", None) or raw.get("method", ft.SUPERVISED)
    train = {**ev.recommended_train(method), **raw.get("train", {})}
    if getattr(args, "penetration", None) is not None:
        sc["penetration"] = list(args.penetration)
    if getattr(args, "seed", None) is not None:
        sc["seed"] = args.seed
        train["seed"] = args.seed
    if getattr(args, "q", None) is not None:
        train["q"] = args.q
    try:
        scenario = ScenarioConfig.from_dict(sc)
        cfg = ft.TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = getattr(args, "out", None) or raw.get("out", "out")
    data = getattr(args, "data", None) or raw.get("data")
    return RunConfig(
        scenario=scenario,
        train=cfg,
        method=method,
        backend=getattr(args, "backend", None) or raw.get("backend", "plaintext"),
        transport=getattr(args, "transport", None) or raw.get("transport", "inproc"),
        out=Path(out),
        data=Path(data) if data else None,
    )


# -- datasets ------------------------------------------------------------------


def manifest(scenario: ScenarioConfig, ds: Dataset) -> dict[str, Any]:
    return {"config_hash": scenario.digest(), "scenario": scenario.to_dict(), "rows": len(ds), **ds.meta()}


def load_dataset(rc: RunConfig, net: Network) -> Dataset:
    """Read the dataset written by ``generate``, or build it from the scenario."""
    if rc.data is None:
        return generate(rc.scenario, net)
    meta = _read_json(rc.data / "manifest.json")
    if meta.get("config_hash") != rc.scenario.digest():
        raise UsageError(f"dataset in {rc.data} was generated from a different scenario config")
    return Dataset.load_jsonl(rc.data / "dataset.jsonl", meta)


def cmd_generate(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    net = rc.scenario.validate()
    ds = generate(rc.scenario, net)
    rc.out.mkdir(parents=True, exist_ok=True)
    ds.save_jsonl(rc.out / "dataset.jsonl")
    _write_json(rc.out / "manifest.json", manifest(rc.scenario, ds))
    print(f"wrote {len(ds)} records to {rc.out / 'dataset.jsonl'} (config {rc.scenario.digest()[:12]})")
    return EXIT_OK


# -- training ------------------------------------------------------------------


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run(out: Path, rc: RunConfig, rep: ev.MetricReport, res: ft.RunResult, guests: Sequence[ft.GuestParty] = ()) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", {"config_hash": rc.run_hash(), **rep.row(), "rounds": res.rounds, "refusals": res.refusals})
    _write_json(out / "history.json", res.history)
    _write_json(out / "host_model.json", res.host.to_dict())
    for g in guests:
        _write_json(out / f"{g.id}_model.json", g.model.to_dict())
    (out / "transcript.jsonl").write_text(res.transcript.to_jsonl())


def cmd_train(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    net = rc.validate()
    if rc.transport == "tcp":
        raise UsageError("tcp runs are separate processes: start `fedtse guest` for every guest, then `fedtse host`")
    if rc.backend == "ipe" and rc.method not in ft.PI_METHODS:
        raise UsageError("the ipe backend only applies to physics-informed methods")
    ds = load_dataset(rc, net)
    guests: list[ft.GuestParty] = []
    if rc.method in ev.PROTOCOL_METHODS:
        host, guests = ev.make_parties(ds, net, rc.scenario, rc.train, rc.method, rc.backend)
        res = ft.run_inproc(host, guests)
        rep = ev.report(rc.method, res.test_pred, ds.labels[ev.host_data(ds).test_rows], _pen(ds), rc.train.q, rc.train.seed, res.rounds_to_target)
    else:
        rep, res = ev.run_method(rc.method, ds, net, rc.scenario, rc.train)
    write_run(rc.out, rc, rep, res, guests)
    if guests and not check_audit(rc, res, guests):
        return EXIT_RUNTIME
    print(f"{rc.method}: test density RMSE {rep.density_rmse:.3f} veh/km, flow RMSE {rep.flow_rmse:.3f} veh/min")
    return EXIT_OK


def _pen(ds: Dataset) -> float:
    return float(ds.penetration[0]) if ds.penetration else 0.0


def check_audit(rc: RunConfig, res: ft.RunResult, guests: Sequence[ft.GuestParty]) -> bool:
    """Audit the host transcript; the plaintext physics backend is reported but tolerated."""
    allowed = FEDTSE_PI_TYPES if rc.method in ft.PI_METHODS else FEDTSE_TYPES
    if rc.backend == "plaintext" and rc.method in ft.PI_METHODS:
        allowed = allowed | {"PlainMeasurement"}
    audit = ft.audit_transcript(
        res.transcript, {g.id: g.feature_dim for g in guests}, {g.id: g.model.sizes[-1] for g in guests}, frozenset(allowed)
    )
    _write_json(rc.out / "audit.json", {"clean": audit.clean, "messages": audit.messages, "violations": audit.violations})
    if audit.clean:
        return True
    if rc.backend == "plaintext" and all("in the clear" in v for v in audit.violations):
        log.warning("plaintext backend: guest measurements were sent in the clear (%d messages)", len(audit.violations))
        return True
    log.error("transcript audit failed: %s", "; ".join(audit.violations[:5]))
    return False


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"address must look like HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def guest_session(rc: RunConfig, ds: Dataset, party: int) -> ft.GuestParty:
    n_out = rc.train.guest_out or ds.n_cells
    return ft.GuestParty(party, ev.guest_data(ds, party - 1), n_out, rc.train, rc.run_hash(), rc.method, rc.backend)


def host_session(rc: RunConfig, ds: Dataset, net: Network) -> ft.HostParty:
    host, _ = ev.make_parties(ds, net, rc.scenario, rc.train, rc.method, rc.backend)
    return host


def serve_guest(guest: ft.GuestParty, srv: socket.socket) -> None:
    """Accept one host connection on ``srv`` and answer it until shutdown."""
    conn, _ = srv.accept()
    link = SocketLink(conn)
    try:
        serve(link, guest.handle)
    finally:
        link.close()


def run_tcp(host: ft.HostParty, guests: Sequence[ft.GuestParty], address: str = "127.0.0.1") -> ft.RunResult:
    """Run the protocol over loopback TCP, one listener thread per guest."""
    servers = [listen(address, 0) for _ in guests]
    errors: list[BaseException] = []

    def target(g, srv):
        try:
            serve_guest(g, srv)
        except BaseException as exc:  # reported after join
            errors.append(exc)

    threads = [threading.Thread(target=target, args=(g, s), daemon=True) for g, s in zip(guests, servers)]
    for t in threads:
        t.start()
    try:
        links = {g.id: SocketLink.connect(address, s.getsockname()[1]) for g, s in zip(guests, servers)}
        try:
            host.connect(links)
            res = host.train()
        finally:
            for link in links.values():
                link.close()
    finally:
        for t in threads:
            t.join(timeout=30)
        for s in servers:
            s.close()
    if errors:
        raise TransportError(f"guest failed: {errors[0]}")
    return res


def cmd_guest(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    net = rc.validate()
    ds = load_dataset(rc, net)
    if not 1 <= args.party <= ds.n_guests:
        raise UsageError(f"party must be between 1 and {ds.n_guests}")
    guest = guest_session(rc, ds, args.party)
    host, port = _address(args.listen)
    srv = listen(host, port)
    print(f"{guest.id} listening on {host}:{srv.getsockname()[1]}", flush=True)
    try:
        serve_guest(guest, srv)
    finally:
        srv.close()
    if not guest.connected:
        log.error("%s rejected the host: configuration hash mismatch", guest.id)
        return EXIT_RUNTIME
    rc.out.mkdir(parents=True, exist_ok=True)
    _write_json(rc.out / f"{guest.id}_model.json", guest.model.to_dict())
    return EXIT_OK


def cmd_host(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    net = rc.validate()
    if rc.method not in ev.PROTOCOL_METHODS:
        raise UsageError(f"{rc.method} is not a federated method")
    ds = load_dataset(rc, net)
    addresses = [_address(a) for a in args.guests]
    if len(addresses) != ds.n_guests:
        raise UsageError(f"scenario has {ds.n_guests} guests but {len(addresses)} addresses were given")
    host = host_session(rc, ds, net)
    links = {gid: SocketLink.connect(h, p) for gid, (h, p) in zip(host.guest_ids, addresses)}
    try:
        host.connect(links)
        res = host.train()
    finally:
        for link in links.values():
            link.close()
    rep = ev.report(rc.method, res.test_pred, ds.labels[ev.host_data(ds).test_rows], _pen(ds), rc.train.q, rc.train.seed, res.rounds_to_target)
    write_run(rc.out, rc, rep, res)
    print(f"{rc.method}: test density RMSE {rep.density_rmse:.3f} veh/km, flow RMSE {rep.flow_rmse:.3f} veh/min")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    raw = _read_json(args.grid)
    try:
        grid = ev.SweepGrid.from_dict(raw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ev.sweep(grid, out, resume=args.resume)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    if method:
        p.add_argument("--method", help=f"one of {', '.join(ev.METHODS)}")
        p.add_argument("--q", type=int, help="local updates per round")
        p.add_argument("--backend", help="plaintext or ipe")
        p.add_argument("--transport", help="inproc or tcp")
    p.add_argument("--penetration", type=float, nargs="+", help="fleet share of every guest")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=Path, help="dataset directory written by `generate`")
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtse", description="Federated traffic state estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", help="simulate a scenario and write its dataset")
    _run_flags(p, method=False)
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("train", help="train one method in process and score it")
    _run_flags(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("guest", help="run one guest party over TCP")
    _run_flags(p)
    p.add_argument("--party", type=int, default=1)
    p.add_argument("--listen", default="127.0.0.1:7001")
    p.set_defaults(func=cmd_guest)
    p = sub.add_parser("host", help="run the host party against TCP guests")
    _run_flags(p)
    p.add_argument("--guests", nargs="+", required=True, metavar="HOST:PORT")
    p.set_defaults(func=cmd_host)
    p = sub.add_parser("sweep", help="run a grid of methods, penetrations, Q values and seeds")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("results.csv"))
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FEDTSE_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, TransportError, FramingError, ft.HandshakeError, ft.TrainingDiverged) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
