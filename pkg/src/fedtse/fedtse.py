"""Vertical federated training between one host and K guests.

The host holds loop-detector features, labels (supervised mode) and the
global model; every guest holds its fleet features and a sub-model whose
output it sends to the host.  One communication round is

    host -> guests  BatchSync(indices)
    guests -> host  SubOutput(z)            (plus measurement messages in PI mode)
    host            forward, loss, dL/dz, host update
    host -> guests  OutputGrad(dL/dz)
    guests          Q local steps reusing dL/dz, recomputing dz/dtheta

The per-round arithmetic lives in :func:`host_step` and :func:`guest_step`,
which the centralized trainer also calls, so a federated run with Q=1 and a
centralized run on the composed network perform the same floating-point
operations in the same order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import nn, physloss as pl, secure_ip as sip
from .ctm import Network
from .messages import (
    FEDTSE_PI_TYPES,
    FEDTSE_TYPES,
    HOST,
    Message,
    ProtocolError,
    make,
)
from .transport import InProcLink, Link

log = logging.getLogger(__name__)

SUPERVISED = "fedtse"
PI_METHODS = {"fedtse_pi": ("speed", "density"), "fedtse_pi_v": ("speed",), "fedtse_pi_k": ("density",)}
SPEED_SCALE = 60.0  # km/h, public normalization of speeds before encryption
DENSITY_SCALE = 150.0  # veh/km


class HandshakeError(ProtocolError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    guest_lr: float | None = None  # defaults to lr
    batch_size: int = 128
    q: int = 1  # guest local updates per round
    host_q: int = 1
    lam: float = 1e-4
    alpha: float = 1e-3  # flow-loss weight, flows in veh/h
    max_rounds: int = 2000
    eval_every: int = 10
    patience: int = 20  # evaluations without improvement
    target_rmse: float | None = None
    stop_at_target: bool = False
    host_embed: int = 8  # bottom output size; 0 feeds raw host features to the top network
    host_hidden: list[int] = field(default_factory=lambda: [32])
    top_hidden: list[int] = field(default_factory=lambda: [64])
    guest_hidden: list[int] = field(default_factory=lambda: [64])
    guest_out: int | None = None  # defaults to the number of cells
    seed: int = 0
    # physics-informed mode
    process_sigma_density: float = 2.0
    process_sigma_flow: float = 60.0
    speed_sigma: float = 3.0
    density_ref: float = 20.0  # veh/km, sets the sampled-density noise level
    host_flow_sigma: float | None = None  # defaults from the loop noise
    speed_floor: float = 1.0  # veh/km, keeps q / k finite near an empty cell
    speed_warmup: int = 0  # rounds before the speed term enters the loss
    clip_norm: float | None = None  # physics-informed rounds rescale larger joint gradients to this norm
    prior_init: bool = True  # start the output at a free-flow state set from detector flows
    codec_scale: int = 2**12
    codec_bound: float = 4.0

    def __post_init__(self):
        if self.q < 1 or self.host_q < 1:
            raise ValueError("local update counts must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr <= 0 or (self.guest_lr is not None and self.guest_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")
        if self.max_rounds < 0 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("max_rounds >= 0, eval_every >= 1 and patience >= 1 are required")

    @property
    def glr(self) -> float:
        return self.lr if self.guest_lr is None else self.guest_lr

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown training config keys: {sorted(extra)}")
        return cls(**data)


def config_hash(*parts: Any) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


# -- losses ----------------------------------------------------------------


def supervised_loss(pred: np.ndarray, labels: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Per-sample (1/N)|k - k_hat|^2 + alpha (1/N)|q - q_hat|^2, averaged over the batch.

    Returns the loss and its cotangent with respect to ``pred``.
    """
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    n = pred.shape[-1] // 2
    w = np.concatenate([np.ones(n), np.full(n, alpha)]) / n
    err = pred - labels
    batch = err.shape[0] if err.ndim == 2 else 1
    loss = float(np.sum(w * err * err)) / batch
    return loss, (2.0 / batch) * w * err


def objective(host: nn.HostModel, guests: Sequence[nn.DenseNet], x0: np.ndarray, xg: Sequence[np.ndarray], labels: np.ndarray, lam: float, alpha: float) -> float:
    zs = [g.forward(x) for g, x in zip(guests, xg)]
    data, _ = supervised_loss(host.forward(x0, zs), labels, alpha)
    return data + lam * (host.sq_norm() + sum(g.sq_norm() for g in guests))


# -- shared step arithmetic -------------------------------------------------


def host_step(host: nn.HostModel, x0: np.ndarray, zs: list[np.ndarray], labels: np.ndarray, cfg: TrainConfig):
    """One host update on fixed guest outputs; dL/dz is taken before the update."""
    pred, cache = host.forward_cache(x0, zs)
    loss, cot = supervised_loss(pred, labels, cfg.alpha)
    grads = host.backward(cache, cot)
    dz = grads.z
    host = host.sgd(grads, cfg.lr, cfg.lam)
    for _ in range(cfg.host_q - 1):
        pred, cache = host.forward_cache(x0, zs)
        _, cot = supervised_loss(pred, labels, cfg.alpha)
        host = host.sgd(host.backward(cache, cot), cfg.lr, cfg.lam)
    return host, dz, loss


def guest_step(model: nn.DenseNet, x: np.ndarray, dz: np.ndarray, cfg: TrainConfig) -> nn.DenseNet:
    """Q local updates with a stale output gradient."""
    for _ in range(cfg.q):
        grads = nn.add_l2(model, model.backward(x, dz), cfg.lam)
        model = nn.sgd_update(model, grads, cfg.glr)
    return model


def standardizer(x: np.ndarray, train_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x[train_rows].mean(axis=0)
    sd = x[train_rows].std(axis=0)
    return mu, np.where(sd > 1e-12, sd, 1.0)


def build_host_model(n_host: int, guest_dims: list[int], net: Network, cfg: TrainConfig) -> nn.HostModel:
    rng = np.random.default_rng([cfg.seed, 0])
    n = net.n_cells
    bottom = None
    head = n_host
    if cfg.host_embed:
        bottom = nn.init([n_host] + cfg.host_hidden + [cfg.host_embed], rng)
        head = cfg.host_embed
    top = nn.init([head + sum(guest_dims)] + cfg.top_hidden + [2 * n], rng)
    scale = np.concatenate([net.kjam / 4.0, net.qc / 2.0])
    return nn.HostModel(bottom, top, scale, list(guest_dims))


def free_flow_prior(net: Network, detector_flows: np.ndarray) -> np.ndarray:
    """State with every cell carrying the mean detector flow on the free-flow branch."""
    q = np.minimum(float(np.mean(detector_flows)), net.qc)
    return np.concatenate([q / net.vf, q])


def with_output_prior(model: nn.HostModel, state: np.ndarray) -> nn.HostModel:
    """Zero the output layer and set its bias so that the untrained model predicts ``state``."""
    out = model.copy()
    out.top.weights[-1][:] = 0.0
    out.top.biases[-1][:] = state / out.scale
    return out


def build_guest_model(n_in: int, n_out: int, party: int, cfg: TrainConfig) -> nn.DenseNet:
    return nn.init([n_in] + cfg.guest_hidden + [n_out], np.random.default_rng([cfg.seed, party]))


class BatchSampler:
    """Shuffled passes over a fixed candidate set, reshuffled every epoch."""

    def __init__(self, candidates: np.ndarray, batch_size: int, seed: int):
        self.candidates = np.asarray(candidates, dtype=int)
        if len(self.candidates) == 0:
            raise ValueError("no candidate rows to sample")
        self.batch_size = min(batch_size, len(self.candidates))
        self.rng = np.random.default_rng([seed, 7])
        self.order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self.order) < self.batch_size:
            self.order = self.candidates[self.rng.permutation(len(self.candidates))]
        batch, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return np.sort(batch)


def density_rmse(pred: np.ndarray, labels: np.ndarray) -> float:
    n = labels.shape[1] // 2
    return float(np.sqrt(np.mean((pred[:, :n] - labels[:, :n]) ** 2)))


# -- transcript ------------------------------------------------------------


@dataclass
class TranscriptEntry:
    direction: str  # "out" from host, "in" to host
    peer: str
    type: str
    round: int
    sender: str
    digest: str
    shapes: dict[str, list[int]]
    payload: dict[str, Any] | None = None


def _shape(v: Any) -> list[int] | None:
    if isinstance(v, list):
        if v and isinstance(v[0], list):
            return [len(v), len(v[0])]
        return [len(v)]
    return None


@dataclass
class Transcript:
    keep_payloads: bool = False
    entries: list[TranscriptEntry] = field(default_factory=list)

    def record(self, direction: str, peer: str, msg: Message) -> None:
        shapes = {k: s for k, v in msg.payload.items() if (s := _shape(v)) is not None}
        if msg.type == "BatchSync":
            shapes["indices_digest"] = [int(hashlib.sha256(json.dumps(msg.payload["indices"]).encode()).hexdigest()[:12], 16)]
            shapes["eval_phase"] = [int(msg.payload["phase"] == "eval")]
        self.entries.append(
            TranscriptEntry(direction, peer, msg.type, msg.round, msg.sender, msg.digest(), shapes, dict(msg.payload) if self.keep_payloads else None)
        )

    def __len__(self) -> int:
        return len(self.entries)

    def types(self) -> set[str]:
        return {e.type for e in self.entries}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)


class RecordingLink:
    """Wraps a link and logs every message on the host side."""

    def __init__(self, link: Link, peer: str, transcript: Transcript):
        self.link, self.peer, self.transcript = link, peer, transcript

    def send(self, msg: Message) -> None:
        self.transcript.record("out", self.peer, msg)
        self.link.send(msg)

    def recv(self) -> Message:
        msg = self.link.recv()
        self.transcript.record("in", self.peer, msg)
        return msg

    def close(self) -> None:
        self.link.close()


@dataclass
class AuditReport:
    violations: list[str]
    messages: int

    @property
    def clean(self) -> bool:
        return not self.violations


def audit_transcript(
    transcript: Transcript,
    feature_dims: dict[str, int],
    output_dims: dict[str, int],
    allowed: frozenset[str] = FEDTSE_TYPES,
) -> AuditReport:
    """Structural privacy checks on a host-side transcript.

    Only whitelisted message types may appear; every guest-originated vector
    payload must have the registered sub-model output width, strictly below
    the guest's feature width; every guest receives the same batch indices
    in a round.
    """
    v: list[str] = []
    syncs: dict[tuple[int, int], dict[str, list[int]]] = {}
    for i, e in enumerate(transcript.entries):
        if e.type not in allowed:
            v.append(f"#{i}: message type {e.type} not allowed")
        if e.direction == "in" and e.sender != HOST:
            feat = feature_dims.get(e.sender)
            out = output_dims.get(e.sender)
            for name, shp in e.shapes.items():
                width = shp[-1] if len(shp) == 2 else None
                if e.type in ("SubOutput", "OutputGrad") and width != out:
                    v.append(f"#{i}: {e.type}.{name} from {e.sender} has width {width}, registered {out}")
                if feat is not None and width is not None and width >= feat and e.type not in ("IpQuery",):
                    v.append(f"#{i}: {e.type}.{name} from {e.sender} has width {width} >= feature width {feat}")
                if feat is not None and len(shp) == 1 and shp[0] == feat and e.type not in ("IpCiphertext", "IpFunctionalKey"):
                    v.append(f"#{i}: {e.type}.{name} from {e.sender} is a vector of feature width {feat}")
            if e.type == "PlainMeasurement":
                v.append(f"#{i}: measurements from {e.sender} sent in the clear")
        if e.type == "BatchSync" and e.direction == "out":
            key = (e.round, e.shapes["eval_phase"][0])
            syncs.setdefault(key, {}).setdefault(e.peer, []).append(e.shapes["indices_digest"][0])
    for (rnd, _), per_peer in syncs.items():
        if len({tuple(d) for d in per_peer.values()}) > 1:
            v.append(f"round {rnd}: guests received different batch indices")
    return AuditReport(v, len(transcript))


# -- guest -----------------------------------------------------------------


@dataclass
class GuestData:
    """Everything a guest owns: features and, for physics mode, measurements."""

    features: np.ndarray  # (T, d) raw
    train_rows: np.ndarray
    speed: np.ndarray | None = None  # (T, N)
    density: np.ndarray | None = None  # (T, N)
    coverage: np.ndarray | None = None  # (T, N) bool


class GuestParty:
    """Guest state machine: reacts to host messages with replies."""

    def __init__(self, party: int, data: GuestData, n_out: int, cfg: TrainConfig, cfg_hash: str, method: str = SUPERVISED, backend: str = "plaintext"):
        self.id = f"guest{party}"
        self.party = party
        self.cfg = cfg
        self.hash = cfg_hash
        self.method = method
        self.backend = backend
        self.data = data
        self.mu, self.sd = standardizer(data.features, data.train_rows)
        self.x = (data.features - self.mu) / self.sd
        self.model = build_guest_model(self.x.shape[1], n_out, party, cfg)
        self.last_round = 0
        self.pending: np.ndarray | None = None
        self.candidate: nn.DenseNet | None = None
        self.best: nn.DenseNet | None = None
        self.connected = False
        self.stopped = False
        self.ip_session: sip.GuestSession | None = None
        self.measure_rows: np.ndarray | None = None

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def _reply(self, type_: str, round_: int, **payload: Any) -> Message:
        return make(type_, round_, self.id, **payload)

    def handle(self, msg: Message) -> list[Message]:
        if self.stopped:
            raise ProtocolError(f"{self.id} received {msg.type} after shutdown")
        if msg.type == "Hello":
            if msg.payload["config_hash"] != self.hash:
                self.stopped = True
                return [self._reply("Reject", 0, reason="config hash mismatch")]
            self.connected = True
            return [self._reply("HelloAck", 0, config_hash=self.hash)]
        if not self.connected:
            raise ProtocolError(f"{self.id} received {msg.type} before the handshake")
        handler = getattr(self, "_on_" + msg.type, None)
        if handler is None:
            raise ProtocolError(f"{self.id} cannot handle {msg.type}")
        return handler(msg)

    def _on_BatchSync(self, msg: Message) -> list[Message]:
        rows = np.asarray(msg.payload["indices"], dtype=int)
        if msg.payload["phase"] == "eval":
            if msg.round < self.last_round:
                raise ProtocolError(f"{self.id}: evaluation for stale round {msg.round}")
            self.candidate = self.model.copy()
            return [self._reply("SubOutput", msg.round, z=self.model.forward(self.x[rows]).tolist())]
        if msg.round <= self.last_round:
            raise ProtocolError(f"{self.id}: round {msg.round} replayed after round {self.last_round}")
        if self.pending is not None:
            raise ProtocolError(f"{self.id}: new round before gradients for round {self.last_round}")
        self.last_round = msg.round
        self.pending = rows
        out = [self._reply("SubOutput", msg.round, z=self.model.forward(self.x[rows]).tolist())]
        measure = np.asarray(msg.payload["measure_indices"], dtype=int)
        if len(measure):
            out.append(self._measurements(msg.round, measure))
        return out

    def _terms(self) -> tuple[str, ...]:
        return PI_METHODS[self.method]

    def _measurement_arrays(self, rows: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        us, masks = [], []
        for kind in self._terms():
            if kind == "speed":
                us.append(self.data.speed[rows])
                masks.append(self.data.coverage[rows])
            else:
                us.append(self.data.density[rows])
                masks.append(np.ones_like(self.data.coverage[rows]))
        return us, masks

    def _stacked(self, rows: np.ndarray, normalized: bool) -> tuple[np.ndarray, list[int]]:
        us, masks = self._measurement_arrays(rows)
        vals, dims = [], []
        scales = [SPEED_SCALE if k == "speed" else DENSITY_SCALE for k in self._terms()]
        for b in range(len(rows)):
            count = 0
            for u, m, s in zip(us, masks, scales):
                sel = np.flatnonzero(m[b])
                vals.extend((u[b, sel] / s if normalized else u[b, sel]).tolist())
                count += len(sel)
            dims.append(count)
        return np.array(vals, dtype=float), dims

    def _measurements(self, round_: int, rows: np.ndarray) -> Message:
        self.measure_rows = rows
        us, masks = self._measurement_arrays(rows)
        mask_payload = [m.astype(int).tolist() for m in masks]
        if self.backend == "plaintext":
            return self._reply("PlainMeasurement", round_, u=[u.tolist() for u in us], mask=mask_payload)
        vec, _ = self._stacked(rows, normalized=True)
        codec = sip.FixedPointCodec(self.cfg.codec_scale, self.cfg.codec_bound, max(len(vec), 1))
        self.ip_session = sip.GuestSession(max(len(vec), 1), codec, seed=hash_seed(self.cfg.seed, self.party, round_))
        ct = self.ip_session.encrypt(vec if len(vec) else np.zeros(1))
        return self._reply("IpCiphertext", round_, ct=sip.ciphertext_to_wire(ct), mask=mask_payload)

    def _on_IpQuery(self, msg: Message) -> list[Message]:
        if self.ip_session is None or msg.round != self.last_round:
            raise ProtocolError(f"{self.id}: query without a ciphertext for round {msg.round}")
        _, dims = self._stacked(self.measure_rows, normalized=True)
        offsets = np.concatenate([[0], np.cumsum(dims)])
        theta = msg.payload["theta"]
        per_block = [0] * len(dims)
        for b, _, _, a in msg.payload["z"]:
            lo, hi = offsets[b], offsets[b + 1]
            if any(v for i, v in enumerate(a) if not lo <= i < hi):
                return [self._reply("IpRefusal", msg.round, reason="step-local query leaves its step")]
            per_block[b] += 1
        n_state = 2 * (self.data.coverage.shape[1])
        decision = pl.guard_queries(dims, len(theta), per_block, n_state)
        if not decision.ok:
            return [self._reply("IpRefusal", msg.round, reason=decision.reason)]
        tk = self.ip_session.functional_keys(theta)
        zk = self.ip_session.functional_keys([a for _, _, _, a in msg.payload["z"]])
        return [
            self._reply(
                "IpFunctionalKey",
                msg.round,
                theta=[sip.int_to_b64(k) for k in tk],
                z=[sip.int_to_b64(k) for k in zk],
            )
        ]

    def _on_OutputGrad(self, msg: Message) -> list[Message]:
        if self.pending is None or msg.round != self.last_round:
            raise ProtocolError(f"{self.id}: gradient for round {msg.round} does not match pending round {self.last_round}")
        dz = np.asarray(msg.payload["grad"], dtype=float)
        rows, self.pending = self.pending, None
        if dz.shape != (len(rows), self.model.n_out):
            raise ProtocolError(f"{self.id}: gradient shape {dz.shape} does not match the batch")
        self.model = guest_step(self.model, self.x[rows], dz, self.cfg)
        self.ip_session = None
        return []

    def _on_Commit(self, msg: Message) -> list[Message]:
        if self.candidate is not None:
            self.best = self.candidate
        return []

    def _on_Finalize(self, msg: Message) -> list[Message]:
        if self.best is not None:
            self.model = self.best.copy()
        return []

    def _on_Shutdown(self, msg: Message) -> list[Message]:
        self.stopped = True
        return []


def hash_seed(*parts: int) -> int:
    return int(hashlib.sha256(json.dumps(parts).encode()).hexdigest()[:16], 16)


# -- host ------------------------------------------------------------------


@dataclass
class HostData:
    features: np.ndarray  # (T, d0)
    t: np.ndarray  # absolute step per row
    train_rows: np.ndarray
    val_rows: np.ndarray
    test_rows: np.ndarray
    labels: np.ndarray | None  # None in label-free mode
    eval_labels: np.ndarray  # used only for reporting and supervised model selection
    u_host: np.ndarray | None = None  # detector flows
    detector_index: np.ndarray | None = None
    demand: np.ndarray | None = None  # offered source inflow per row


@dataclass
class RunResult:
    host: nn.HostModel
    history: list[dict[str, float]]
    rounds: int
    rounds_to_target: int | None
    best_round: int | None
    test_pred: np.ndarray
    val_pred: np.ndarray
    transcript: Transcript
    refusals: int = 0


class HostParty:
    def __init__(
        self,
        data: HostData,
        net: Network,
        guest_ids: list[str],
        guest_dims: list[int],
        cfg: TrainConfig,
        cfg_hash: str,
        method: str = SUPERVISED,
        backend: str = "plaintext",
        penetration: Sequence[float] = (),
        loop_noise: float = 0.3,
        keep_payloads: bool = False,
    ):
        self.data = data
        self.net = net
        self.cfg = cfg
        self.hash = cfg_hash
        self.method = method
        self.backend = backend
        self.guest_ids = list(guest_ids)
        self.mu, self.sd = standardizer(data.features, data.train_rows)
        self.x = (data.features - self.mu) / self.sd
        self.model = build_host_model(self.x.shape[1], list(guest_dims), net, cfg)
        if method in PI_METHODS and cfg.prior_init:
            self.model = with_output_prior(self.model, free_flow_prior(net, data.u_host[data.train_rows]))
        self.transcript = Transcript(keep_payloads)
        self.links: dict[str, RecordingLink] = {}
        self.round = 0
        self.refusals = 0
        self.last_loss = float("nan")
        self.last_grad_norm = float("nan")
        self.penetration = list(penetration)
        self.loop_noise = loop_noise
        if method != SUPERVISED and method not in PI_METHODS:
            raise ValueError(f"unknown training method {method!r}")
        if method == SUPERVISED and data.labels is None:
            raise ValueError("supervised training needs labels")

    # -- plumbing

    def connect(self, links: dict[str, Link]) -> None:
        for gid in self.guest_ids:
            self.links[gid] = RecordingLink(links[gid], gid, self.transcript)
        for gid, link in self.links.items():
            link.send(make("Hello", 0, HOST, config_hash=self.hash, role="host"))
            reply = link.recv()
            if reply.type != "HelloAck":
                raise HandshakeError(f"{gid} rejected the session: {reply.payload.get('reason', reply.type)}")

    def _expect(self, gid: str, type_: str, round_: int) -> Message:
        msg = self.links[gid].recv()
        if msg.type != type_ or msg.round != round_ or msg.sender != gid:
            raise ProtocolError(f"expected {type_} for round {round_} from {gid}, got {msg.type} round {msg.round} from {msg.sender}")
        return msg

    def _broadcast(self, type_: str, **payload: Any) -> None:
        for link in self.links.values():
            link.send(make(type_, self.round, HOST, **payload))

    def collect_outputs(self, rows: np.ndarray, phase: str, measure: np.ndarray | None = None) -> tuple[list[np.ndarray], list[Message]]:
        zs, extra = [], []
        payload = {"indices": rows.tolist(), "measure_indices": [] if measure is None else measure.tolist(), "phase": phase}
        for gid, link in self.links.items():
            link.send(make("BatchSync", self.round, HOST, **payload))
            zs.append(np.asarray(self._expect(gid, "SubOutput", self.round).payload["z"], dtype=float).reshape(len(rows), -1))
            if measure is not None and len(measure):
                msg = link.recv()
                if msg.type not in ("PlainMeasurement", "IpCiphertext") or msg.round != self.round:
                    raise ProtocolError(f"expected measurements from {gid}, got {msg.type}")
                extra.append(msg)
        return zs, extra

    def send_grads(self, dz: list[np.ndarray]) -> None:
        for (gid, link), g in zip(self.links.items(), dz):
            link.send(make("OutputGrad", self.round, HOST, grad=g.tolist()))

    def predict(self, rows: np.ndarray) -> np.ndarray:
        zs, _ = self.collect_outputs(rows, "eval")
        return self.model.forward(self.x[rows], zs)

    # -- supervised round

    def host_round(self, rows: np.ndarray, zs: list[np.ndarray]) -> list[np.ndarray]:
        self.model, dz, self.last_loss = host_step(self.model, self.x[rows], zs, self.data.labels[rows], self.cfg)
        return dz

    def supervised_round(self, rows: np.ndarray) -> None:
        zs, _ = self.collect_outputs(rows, "train")
        self.send_grads(self.host_round(rows, zs))

    # -- physics-informed round

    def measurement_models(self) -> tuple[pl.NoiseSpec, pl.MeasurementModel, list[list[pl.MeasurementModel]]]:
        cfg, net = self.cfg, self.net
        n = net.n_cells
        noise = pl.NoiseSpec.build(n, cfg.process_sigma_density, cfg.process_sigma_flow)
        flow_sigma = cfg.host_flow_sigma or max(self.loop_noise * 3600.0 / net.dt_s, 10.0)
        host_m = pl.MeasurementModel.build(pl.HOST_FLOW, self.data.detector_index, flow_sigma, n)
        guests = []
        for p in self.penetration:
            ms = []
            for kind in PI_METHODS[self.method]:
                if kind == "speed":
                    on = 1.0 if self.round > cfg.speed_warmup else 0.0
                    ms.append(pl.MeasurementModel.build(pl.GUEST_SPEED, range(n), cfg.speed_sigma, n, cfg.speed_floor, on))
                else:
                    var = cfg.density_ref * (1.0 - p) / (p * net.dx) + 1.0
                    ms.append(pl.MeasurementModel.build(pl.GUEST_DENSITY, range(n), np.sqrt(var), n))
            guests.append(ms)
        return noise, host_m, guests

    def physics_round(self, steps: np.ndarray) -> None:
        rows = np.union1d(steps, steps + 1)
        batch = pl.PairBatch.from_steps(self.data.t[steps], lambda pts: self.data.demand[np.searchsorted(self.data.t, pts)])
        zs, meas = self.collect_outputs(rows, "train", steps)
        pred, cache = self.model.forward_cache(self.x[rows], zs)

        def vjp(c):
            g = self.model.backward(cache, c)
            return g.flat(), g.z

        noise, host_m, guest_models = self.measurement_models()
        host_terms = [pl.MeasurementTerm(host_m, self.data.u_host[steps], np.ones((len(steps), host_m.dim), bool))]
        guest_terms = []
        for msg, models in zip(meas, guest_models):
            masks = [np.asarray(m, dtype=bool) for m in msg.payload["mask"]]
            if msg.type == "PlainMeasurement":
                us = [np.asarray(u, dtype=float) for u in msg.payload["u"]]
            else:
                us = [np.zeros(m.shape) for m in masks]
            guest_terms.append([pl.MeasurementTerm(m, u, k) for m, u, k in zip(models, us, masks)])

        def inner(k: int, qs: pl.QuerySet):
            msg = meas[k]
            if msg.type == "PlainMeasurement":
                dims = qs.block_dims()
                dz = sum(self.model.guest_dims)
                decision = pl.guard_queries(dims, self.model.n_params, [dz if d else 0 for d in dims], 2 * self.net.n_cells)
                if not decision.ok:
                    self.refusals += 1
                    return None
                return qs.rmatvec(qs.pack([t.u for t in guest_terms[k]]))
            return self._secure_inner(k, qs, msg)

        gt = pl.physics_gradients(
            self.net, pred, batch, host_terms, guest_terms, noise, vjp, inner,
            jacobians=lambda: self.model.param_jacobian(self.x[rows], zs),
        )
        g_theta, g_z = gt.total()
        b = float(len(steps))
        # the host can always evaluate the process and detector terms; guest terms stay private
        self.last_loss = pl.physics_loss(self.net, pred, batch, host_terms, noise) / b
        flat = g_theta / b
        g_z = [g / b for g in g_z]
        self.last_grad_norm = float(np.sqrt(flat @ flat + sum(float(np.sum(g * g)) for g in g_z)))
        if self.cfg.clip_norm is not None and self.last_grad_norm > self.cfg.clip_norm:
            shrink = self.cfg.clip_norm / self.last_grad_norm
            flat = flat * shrink
            g_z = [g * shrink for g in g_z]
        bottom = self.model.bottom
        nb = bottom.n_params if bottom is not None else 0
        host_grads = nn.HostGrads(
            _bundle(bottom, flat[:nb]) if bottom is not None else None,
            _bundle(self.model.top, flat[nb:]),
            [],
        )
        self.model = self.model.sgd(host_grads, self.cfg.lr, self.cfg.lam)
        self.send_grads(g_z)

    def _secure_inner(self, k: int, qs: pl.QuerySet, msg: Message):
        gid = self.guest_ids[k]
        ct = sip.ciphertext_from_wire(msg.payload["ct"])
        theta_q, zq = qs.queries()
        scale = self._entry_scales(qs)
        codec = sip.FixedPointCodec(self.cfg.codec_scale, self.cfg.codec_bound, max(qs.dim, 1))
        tq = sip.QuantizedQueries.from_matrix(theta_q * scale, codec)
        z_items = []
        for j, per in enumerate(zq):
            for b, c, a in per:
                z_items.append((b, j, c, a * scale))
        zmat = sip.QuantizedQueries.from_matrix(np.array([a for *_, a in z_items]) if z_items else np.zeros((0, qs.dim)), codec)
        link = self.links[gid]
        link.send(
            make(
                "IpQuery",
                self.round,
                HOST,
                theta=tq.ints,
                z=[[b, j, c, ints] for (b, j, c, _), ints in zip(z_items, zmat.ints)],
            )
        )
        reply = link.recv()
        if reply.type == "IpRefusal":
            self.refusals += 1
            log.info("round %d: %s refused: %s", self.round, gid, reply.payload["reason"])
            return None
        if reply.type != "IpFunctionalKey" or reply.round != self.round:
            raise ProtocolError(f"expected keys from {gid}, got {reply.type}")
        host = sip.HostSession(codec)
        theta_vals = host.inner_products(ct, tq, [sip.b64_to_int(s) for s in reply.payload["theta"]])
        z_vals = host.inner_products(ct, zmat, [sip.b64_to_int(s) for s in reply.payload["z"]]) if z_items else []
        n_points = len(qs.y_hat)
        g_z = [np.zeros((n_points, d)) for d in self.model.guest_dims]
        for (b, j, c, _), v in zip(z_items, z_vals):
            g_z[j][qs.batch.first[b], c] += v
        return theta_vals, g_z

    def _entry_scales(self, qs: pl.QuerySet) -> np.ndarray:
        kinds = [m.kind for m in qs.models]
        per_term = np.array([SPEED_SCALE if k == pl.GUEST_SPEED else DENSITY_SCALE for k in kinds])
        return per_term[qs.layout_term]

    # -- training loop

    def train(self) -> RunResult:
        cfg = self.cfg
        physics = self.method in PI_METHODS
        train_rows = self.data.train_rows
        if physics:
            sampler = BatchSampler(train_rows[:-1], cfg.batch_size, cfg.seed)
        else:
            sampler = BatchSampler(train_rows, cfg.batch_size, cfg.seed)
        history: list[dict[str, float]] = []
        best_rmse, best_model, best_round, bad = np.inf, None, None, 0
        rounds_to_target = None
        val = self.data.val_rows
        for r in range(1, cfg.max_rounds + 1):
            self.round = r
            rows = sampler.next()
            if physics:
                self.physics_round(rows)
            else:
                self.supervised_round(rows)
            if r % cfg.eval_every and r != cfg.max_rounds:
                continue
            rmse = density_rmse(self.predict(val), self.data.eval_labels[val])
            if not np.isfinite(rmse):
                raise TrainingDiverged(f"validation error is not finite at round {r}")
            entry = {"round": r, "val_density_rmse": rmse, "train_loss": self.last_loss}
            if physics:
                entry["grad_norm"] = self.last_grad_norm
            history.append(entry)
            if cfg.target_rmse is not None and rounds_to_target is None and rmse <= cfg.target_rmse:
                rounds_to_target = r
                if cfg.stop_at_target:
                    break
            if physics:
                continue
            if rmse < best_rmse:
                best_rmse, best_model, best_round, bad = rmse, self.model.copy(), r, 0
                self._broadcast("Commit")
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        if best_model is not None:
            self.model = best_model
            self._broadcast("Finalize")
        test_pred = self.predict(self.data.test_rows) if len(self.data.test_rows) else np.zeros((0, 2 * self.net.n_cells))
        val_pred = self.predict(val) if len(val) else np.zeros((0, 2 * self.net.n_cells))
        self._broadcast("Shutdown")
        return RunResult(self.model, history, self.round, rounds_to_target, best_round, test_pred, val_pred, self.transcript, self.refusals)


def _bundle(net: nn.DenseNet, flat: np.ndarray) -> nn.GradientBundle:
    g = net.with_flat(flat)
    return nn.GradientBundle(g.weights, g.biases, np.zeros(0))


# -- centralized training ----------------------------------------------------


def train_centralized(
    data: HostData,
    net: Network,
    guest_features: Sequence[np.ndarray],
    guest_out: Sequence[int],
    cfg: TrainConfig,
) -> RunResult:
    """Train the composed network in one place with the federated arithmetic.

    With Q = 1 this reproduces a federated run bit for bit; it is the Oracle
    baseline when given the guests' full features, TSE-p when given speed
    features, and TSE-n when given none.
    """
    mu, sd = standardizer(data.features, data.train_rows)
    x0 = (data.features - mu) / sd
    xs = []
    for f in guest_features:
        m, s = standardizer(f, data.train_rows)
        xs.append((f - m) / s)
    host = build_host_model(x0.shape[1], list(guest_out), net, cfg)
    guests = [build_guest_model(x.shape[1], d, k + 1, cfg) for k, (x, d) in enumerate(zip(xs, guest_out))]
    sampler = BatchSampler(data.train_rows, cfg.batch_size, cfg.seed)

    def predict(rows):
        return host.forward(x0[rows], [g.forward(x[rows]) for g, x in zip(guests, xs)])

    history: list[dict[str, float]] = []
    best_rmse, best, best_round, bad, rounds_to_target = np.inf, None, None, 0, None
    val = data.val_rows
    r = 0
    for r in range(1, cfg.max_rounds + 1):
        rows = sampler.next()
        zs = [g.forward(x[rows]) for g, x in zip(guests, xs)]
        host, dz, loss = host_step(host, x0[rows], zs, data.labels[rows], cfg)
        guests = [guest_step(g, x[rows], d, cfg) for g, x, d in zip(guests, xs, dz)]
        if r % cfg.eval_every and r != cfg.max_rounds:
            continue
        rmse = density_rmse(predict(val), data.eval_labels[val])
        if not np.isfinite(rmse):
            raise TrainingDiverged(f"validation error is not finite at round {r}")
        history.append({"round": r, "val_density_rmse": rmse, "train_loss": loss})
        if cfg.target_rmse is not None and rounds_to_target is None and rmse <= cfg.target_rmse:
            rounds_to_target = r
            if cfg.stop_at_target:
                break
        if rmse < best_rmse:
            best_rmse, best, best_round, bad = rmse, (host.copy(), [g.copy() for g in guests]), r, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best is not None:
        host, guests = best
    test_pred = predict(data.test_rows)
    return RunResult(host, history, r, rounds_to_target, best_round, test_pred, predict(val), Transcript())


def run_inproc(host: HostParty, guests: Sequence[GuestParty]) -> RunResult:
    host.connect({g.id: InProcLink(g.handle) for g in guests})
    return host.train()
