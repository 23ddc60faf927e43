"""Feed-forward Q-networks with hand-written gradients.

Two variants over a shared ReLU trunk: a plain head mapping straight to the
five action values, and a dueling split into a scalar state value V and
per-action advantages A, recombined as Q = V + A - mean(A). Float64
throughout so gradient checks are meaningful.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

PLAIN = "plain"
DUELING = "dueling"

_MAGIC = b"LMQ1"


class CheckpointError(ValueError):
    """Unreadable, truncated or corrupted model file."""


def _param_order(variant: str, n_trunk: int) -> list[str]:
    names = []
    for i in range(n_trunk):
        names += [f"W{i}", f"b{i}"]
    if variant == PLAIN:
        names += ["Wq", "bq"]
    else:
        names += ["Wv", "bv", "Wa", "ba"]
    return names


class QNetwork:
    """Monolithic MLP: trunk of ReLU layers, then one or two linear heads."""

    def __init__(self, variant: str, dims: tuple[int, ...], n_actions: int = 5,
                 rng: Optional[np.random.Generator] = None):
        if variant not in (PLAIN, DUELING):
            raise ValueError(f"unknown variant '{variant}'")
        if len(dims) < 2:
            raise ValueError("dims must be (input, hidden..., trunk_out)")
        self.variant = variant
        self.dims = tuple(int(d) for d in dims)
        self.n_actions = int(n_actions)
        self.params: dict[str, np.ndarray] = {}
        rng = rng or np.random.default_rng(0)
        for i, (fin, fout) in enumerate(zip(dims, dims[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fin),
                                              (fin, fout))
            self.params[f"b{i}"] = np.zeros(fout)
        top = dims[-1]
        if variant == PLAIN:
            self.params["Wq"] = rng.normal(0.0, np.sqrt(1.0 / top),
                                           (top, n_actions))
            self.params["bq"] = np.zeros(n_actions)
        else:
            self.params["Wv"] = rng.normal(0.0, np.sqrt(1.0 / top), (top, 1))
            self.params["bv"] = np.zeros(1)
            self.params["Wa"] = rng.normal(0.0, np.sqrt(1.0 / top),
                                           (top, n_actions))
            self.params["ba"] = np.zeros(n_actions)

    @property
    def n_trunk(self) -> int:
        return len(self.dims) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Batch forward pass; returns (Q of shape (B, n_actions), cache)."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cache: dict = {"acts": [h]}
        for i in range(self.n_trunk):
            h = np.maximum(0.0, h @ self.params[f"W{i}"] + self.params[f"b{i}"])
            cache["acts"].append(h)
        if self.variant == PLAIN:
            q = h @ self.params["Wq"] + self.params["bq"]
        else:
            v = h @ self.params["Wv"] + self.params["bv"]
            a = h @ self.params["Wa"] + self.params["ba"]
            q = v + a - a.mean(axis=1, keepdims=True)
        return q, cache

    def q_values(self, state: np.ndarray) -> np.ndarray:
        q, _ = self.forward(np.asarray(state, dtype=np.float64).reshape(1, -1))
        return q[0]

    def backward(self, cache: dict, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dL/dQ; mirrors forward()."""
        grads: dict[str, np.ndarray] = {}
        acts = cache["acts"]
        top = acts[-1]
        if self.variant == PLAIN:
            grads["Wq"] = top.T @ dq
            grads["bq"] = dq.sum(axis=0)
            dh = dq @ self.params["Wq"].T
        else:
            # Q = V + A - mean(A): dA picks up the mean-subtraction Jacobian
            dv = dq.sum(axis=1, keepdims=True)
            da = dq - dq.mean(axis=1, keepdims=True)
            grads["Wv"] = top.T @ dv
            grads["bv"] = dv.sum(axis=0)
            grads["Wa"] = top.T @ da
            grads["ba"] = da.sum(axis=0)
            dh = dv @ self.params["Wv"].T + da @ self.params["Wa"].T
        for i in range(self.n_trunk - 1, -1, -1):
            dh = dh * (acts[i + 1] > 0.0)
            grads[f"W{i}"] = acts[i].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.params[f"W{i}"].T
        return grads

    def copy_from(self, other: "QNetwork") -> None:
        for k, v in other.params.items():
            self.params[k] = v.copy()

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.variant, self.dims, self.n_actions)
        twin.copy_from(self)
        return twin


class MomentumSGD:
    """Plain SGD with classical momentum and global-norm gradient clipping."""

    def __init__(self, net: QNetwork, lr: float, momentum: float = 0.9,
                 clip_norm: float = 10.0):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.clip_norm > 0.0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            self.net.params[k] -= self.lr * v


# ------------------------------------------------------------- persistence

def save_checkpoint(path: str, net: QNetwork,
                    sidecar: Optional[dict] = None) -> None:
    """Versioned binary model file plus a JSON sidecar at ``path + '.json'``.

    Layout: magic, variant tag, trunk dims, action count, parameters as
    row-major little-endian float64 in canonical order, CRC32 trailer.
    """
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<B", 0 if net.variant == PLAIN else 1)
    body += struct.pack("<B", len(net.dims))
    body += struct.pack(f"<{len(net.dims)}I", *net.dims)
    body += struct.pack("<I", net.n_actions)
    for name in _param_order(net.variant, net.n_trunk):
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))
    if sidecar is not None:
        with open(path + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_checkpoint(path: str) -> tuple[QNetwork, Optional[dict]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 14 or blob[:4] != _MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if struct.unpack("<I", blob[-4:])[0] != zlib.crc32(blob[:-4]):
        raise CheckpointError("checkpoint is corrupted (CRC mismatch)")
    off = 4
    variant = PLAIN if blob[off] == 0 else DUELING
    off += 1
    n_dims = blob[off]
    off += 1
    dims = struct.unpack_from(f"<{n_dims}I", blob, off)
    off += 4 * n_dims
    n_actions = struct.unpack_from("<I", blob, off)[0]
    off += 4
    net = QNetwork(variant, dims, n_actions)
    for name in _param_order(variant, net.n_trunk):
        shape = net.params[name].shape
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(blob) - 4:
            raise CheckpointError("checkpoint is truncated")
        net.params[name] = np.frombuffer(blob[off:end],
                                         dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(blob) - 4:
        raise CheckpointError("checkpoint has trailing bytes")
    sidecar = None
    try:
        with open(path + ".json") as fh:
            sidecar = json.load(fh)
    except OSError:
        pass
    return net, sidecar
