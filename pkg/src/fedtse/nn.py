"""Dense feedforward networks with hand-written reverse-mode gradients.

Weights are stored as (out, in) matrices and inputs as row batches of shape
(B, in), so a layer computes ``x @ W.T + b``.  Hidden layers use ReLU and the
output layer is linear.  Backward passes return gradients for every
parameter and for the input, which is what a vertically split model needs:
the host backpropagates into the sub-model outputs it received, and each
guest continues the chain inside its own network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in zip(self.weights, self.biases))

    # -- evaluation -------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"input has dimension {x.shape[-1]}, network expects {self.n_in}")
        return x

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Layer inputs a_0 = x, a_1, ..., followed by the network output."""
        a = self._check_input(x)
        acts = [a]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i < last:
                a = np.maximum(a, 0.0)
            acts.append(a)
        return acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.activations(x)[-1]

    def backward(self, x: np.ndarray, cotangent: np.ndarray, acts: list[np.ndarray] | None = None) -> GradientBundle:
        """Vector-Jacobian product of the output with ``cotangent``.

        For batched input the parameter gradients are summed over the batch
        and the input gradient keeps one row per sample.
        """
        acts = acts if acts is not None else self.activations(x)
        g = np.asarray(cotangent, dtype=float)
        if g.shape != acts[-1].shape:
            raise ShapeError(f"cotangent shape {g.shape} does not match output shape {acts[-1].shape}")
        n = len(self.weights)
        gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g = g * (acts[i + 1] > 0)
            a = acts[i]
            if g.ndim == 1:
                gw[i] = np.outer(g, a)
                gb[i] = g.copy()
            else:
                gw[i] = g.T @ a
                gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return GradientBundle(gw, gb, g)

    def param_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Full Jacobian of the output of one sample w.r.t. the flat parameters, (out, P)."""
        x = self._check_input(x)
        if x.ndim != 1:
            raise ShapeError("param_jacobian takes a single sample")
        acts = self.activations(x)
        eye = np.eye(self.n_out)
        return np.stack([self.backward(x, e, acts).flat() for e in eye])

    # -- parameters -------------------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, theta: np.ndarray) -> "DenseNet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"flat parameter vector has shape {theta.shape}, expected ({self.n_params},)")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(theta[pos : pos + b.size].copy())
            pos += b.size
        return DenseNet(ws, bs)

    def sq_norm(self) -> float:
        return float(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases)))

    # -- checkpoint -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        net = cls(
            [np.array(w, dtype=float).reshape(-1, s) for w, s in zip(data["weights"], data["sizes"][:-1])],
            [np.array(b, dtype=float) for b in data["biases"]],
        )
        if net.sizes != list(data["sizes"]):
            raise ShapeError(f"checkpoint header {data['sizes']} disagrees with stored arrays {net.sizes}")
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init(sizes: list[int], seed: int | np.random.Generator = 0) -> DenseNet:
    """He-uniform weights, limit sqrt(6 / fan_in), and zero biases."""
    if len(sizes) < 2:
        raise ShapeError("a network needs at least an input and an output size")
    if any(int(s) < 1 for s in sizes):
        raise ShapeError(f"layer sizes must be positive, got {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return DenseNet(ws, bs)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, x: np.ndarray, cotangent: np.ndarray) -> GradientBundle:
    return net.backward(x, cotangent)


def sgd_update(net: DenseNet, grads: GradientBundle, lr: float) -> DenseNet:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(grads.weights) != len(net.weights):
        raise ShapeError("gradient bundle has a different number of layers")
    ws, bs = [], []
    for w, b, gw, gb in zip(net.weights, net.biases, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient shapes {gw.shape}/{gb.shape} do not match {w.shape}/{b.shape}")
        ws.append(w - lr * gw)
        bs.append(b - lr * gb)
    return DenseNet(ws, bs)


def add_l2(net: DenseNet, grads: GradientBundle, lam: float) -> GradientBundle:
    """Add the gradient of lam * ||theta||^2."""
    if lam == 0:
        return grads
    return GradientBundle(
        [gw + 2.0 * lam * w for gw, w in zip(grads.weights, net.weights)],
        [gb + 2.0 * lam * b for gb, b in zip(grads.biases, net.biases)],
        grads.input,
    )


def scale_grads(grads: GradientBundle, c: float) -> GradientBundle:
    return GradientBundle([c * g for g in grads.weights], [c * g for g in grads.biases], c * grads.input)


@dataclass
class HostCache:
    x0: np.ndarray
    zs: list[np.ndarray]
    bottom_acts: list[np.ndarray] | None
    top_acts: list[np.ndarray]


@dataclass
class HostGrads:
    bottom: GradientBundle | None
    top: GradientBundle
    z: list[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = [self.bottom.flat()] if self.bottom is not None else []
        return np.concatenate(parts + [self.top.flat()])


@dataclass
class HostModel:
    """Global model: optional bottom network on the host's own features, then a top
    network over the concatenation of the host embedding and every guest output.

    The top network's raw output is multiplied by ``scale`` to give physical
    units (densities then flows).
    """

    bottom: DenseNet | None
    top: DenseNet
    scale: np.ndarray
    guest_dims: list[int]

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float)
        first = self.bottom.n_out if self.bottom is not None else None
        expect = (first or 0) + sum(self.guest_dims)
        if first is None and self.top.n_in < sum(self.guest_dims):
            raise ShapeError("top network is narrower than the guest outputs")
        if first is not None and self.top.n_in != expect:
            raise ShapeError(f"top network takes {self.top.n_in} inputs, bottom and guests give {expect}")
        if self.scale.shape != (self.top.n_out,):
            raise ShapeError("scale must match the top network output")

    @property
    def n_in(self) -> int:
        return self.bottom.n_in if self.bottom is not None else self.top.n_in - sum(self.guest_dims)

    @property
    def n_params(self) -> int:
        return self.top.n_params + (self.bottom.n_params if self.bottom is not None else 0)

    def copy(self) -> "HostModel":
        return HostModel(self.bottom.copy() if self.bottom is not None else None, self.top.copy(), self.scale.copy(), list(self.guest_dims))

    def _check(self, x0: np.ndarray, zs: list[np.ndarray]) -> None:
        if len(zs) != len(self.guest_dims):
            raise ShapeError(f"expected {len(self.guest_dims)} guest outputs, got {len(zs)}")
        for z, d in zip(zs, self.guest_dims):
            if z.shape[-1] != d:
                raise ShapeError(f"guest output has dimension {z.shape[-1]}, registered {d}")
            if z.shape[:-1] != x0.shape[:-1]:
                raise ShapeError("guest outputs and host features are not aligned")

    def forward_cache(self, x0: np.ndarray, zs: list[np.ndarray]) -> tuple[np.ndarray, HostCache]:
        x0 = np.asarray(x0, dtype=float)
        zs = [np.asarray(z, dtype=float) for z in zs]
        self._check(x0, zs)
        bacts = self.bottom.activations(x0) if self.bottom is not None else None
        head = bacts[-1] if bacts is not None else x0
        top_acts = self.top.activations(np.concatenate([head] + zs, axis=-1))
        return top_acts[-1] * self.scale, HostCache(x0, zs, bacts, top_acts)

    def forward(self, x0: np.ndarray, zs: list[np.ndarray]) -> np.ndarray:
        return self.forward_cache(x0, zs)[0]

    def backward(self, cache: HostCache, cotangent: np.ndarray) -> HostGrads:
        """Gradients w.r.t. the host parameters and each guest output, for a cotangent on the physical output."""
        gt = self.top.backward(None, cotangent * self.scale, cache.top_acts)
        n_head = cache.top_acts[0].shape[-1] - sum(self.guest_dims)
        gin = gt.input
        gz, pos = [], n_head
        for d in self.guest_dims:
            gz.append(gin[..., pos : pos + d])
            pos += d
        gb = None
        if self.bottom is not None:
            gb = self.bottom.backward(None, gin[..., :n_head], cache.bottom_acts)
        return HostGrads(gb, gt, gz)

    def flat(self) -> np.ndarray:
        parts = [self.bottom.flat()] if self.bottom is not None else []
        return np.concatenate(parts + [self.top.flat()])

    def with_flat(self, theta: np.ndarray) -> "HostModel":
        nb = self.bottom.n_params if self.bottom is not None else 0
        bottom = self.bottom.with_flat(theta[:nb]) if self.bottom is not None else None
        return HostModel(bottom, self.top.with_flat(theta[nb:]), self.scale.copy(), list(self.guest_dims))

    def sq_norm(self) -> float:
        return self.top.sq_norm() + (self.bottom.sq_norm() if self.bottom is not None else 0.0)

    def sgd(self, grads: HostGrads, lr: float, lam: float = 0.0) -> "HostModel":
        bottom = None
        if self.bottom is not None:
            bottom = sgd_update(self.bottom, add_l2(self.bottom, grads.bottom, lam), lr)
        top = sgd_update(self.top, add_l2(self.top, grads.top, lam), lr)
        return HostModel(bottom, top, self.scale.copy(), list(self.guest_dims))

    def param_jacobian(self, x0: np.ndarray, zs: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Per-sample Jacobians of the physical output: (B, out, P) for parameters and (B, out, d_k) per guest."""
        x0 = np.atleast_2d(x0)
        zs = [np.atleast_2d(z) for z in zs]
        n_out = self.top.n_out
        jp = np.empty((len(x0), n_out, self.n_params))
        jz = [np.empty((len(x0), n_out, d)) for d in self.guest_dims]
        for b in range(len(x0)):
            _, cache = self.forward_cache(x0[b], [z[b] for z in zs])
            for i in range(n_out):
                e = np.zeros(n_out)
                e[i] = 1.0
                g = self.backward(cache, e)
                jp[b, i] = g.flat()
                for k, gz in enumerate(g.z):
                    jz[k][b, i] = gz
        return jp, jz

    def to_dict(self) -> dict:
        return {
            "bottom": self.bottom.to_dict() if self.bottom is not None else None,
            "top": self.top.to_dict(),
            "scale": self.scale.tolist(),
            "guest_dims": list(self.guest_dims),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HostModel":
        bottom = DenseNet.from_dict(data["bottom"]) if data["bottom"] is not None else None
        return cls(bottom, DenseNet.from_dict(data["top"]), np.array(data["scale"], dtype=float), list(data["guest_dims"]))
