"""Dense feed-forward networks and a byte-stable checkpoint container."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatchError

CHECKPOINT_MAGIC = b"ESC1"
CHECKPOINT_VERSION = 1

FINAL_AFFINE = "affine"
FINAL_COSINE = "cosine"


class DenseNetwork:
    """A stack of fully connected layers.

    Hidden layers compute ``act(x @ W + b)``. The final layer is either a
    plain affine map (regression heads, un-normalized representations) or a
    cosine-normalized layer ``act(cos(w_j, h))`` whose pre-activations are
    bounded in [-1, 1]; the cosine layer carries no bias.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        final_mode: str = FINAL_AFFINE,
        activation: str = "elu",
        rng: np.random.Generator | None = None,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(s <= 0 for s in layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
        if final_mode not in (FINAL_AFFINE, FINAL_COSINE):
            raise ValueError(f"unknown final layer mode {final_mode!r}")
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        self.final_mode = final_mode
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor | None] = []
        n_layers = len(self.layer_sizes) - 1
        for k in range(n_layers):
            fan_in, fan_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            is_final = k == n_layers - 1
            if is_final and final_mode == FINAL_COSINE:
                self.biases.append(None)
            else:
                self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        params = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            params.append((f"{prefix}layer{k}.W", w))
            if b is not None:
                params.append((f"{prefix}layer{k}.b", b))
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _check_input(self, n_cols: int) -> None:
        if n_cols != self.input_dim:
            raise DimensionMismatchError(
                f"input has {n_cols} columns, network expects {self.input_dim}"
            )

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        """Differentiable forward pass; one output row per input row."""
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        self._check_input(h.data.shape[1])
        act = ad.ACTIVATIONS[self.activation]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if k == last and self.final_mode == FINAL_COSINE:
                h = act(ad.cosine_similarity(h, w))
            elif k == last:
                h = ad.add(ad.matmul(h, w), b)
            else:
                h = act(ad.add(ad.matmul(h, w), b))
        return h

    def pre_activations(self, x: np.ndarray) -> np.ndarray:
        """Final-layer pre-activation values (cosine values in cosine mode)."""
        h = np.asarray(x, dtype=np.float64)
        self._check_input(h.shape[1])
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if k == last:
                if self.final_mode == FINAL_COSINE:
                    return _cosine_numpy(h, w.data)
                return h @ w.data + b.data
            h = _act_numpy(self.activation, h @ w.data + b.data)
        raise AssertionError("unreachable")

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no tape, no gradients)."""
        h = np.asarray(x, dtype=np.float64)
        self._check_input(h.shape[1])
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if k == last and self.final_mode == FINAL_COSINE:
                h = _act_numpy(self.activation, _cosine_numpy(h, w.data))
            elif k == last:
                h = h @ w.data + b.data
            else:
                h = _act_numpy(self.activation, h @ w.data + b.data)
        return h

    def copy(self) -> "DenseNetwork":
        dup = DenseNetwork.__new__(DenseNetwork)
        dup.layer_sizes = list(self.layer_sizes)
        dup.final_mode = self.final_mode
        dup.activation = self.activation
        dup.weights = [Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        dup.biases = [
            Tensor(b.data.copy(), requires_grad=True) if b is not None else None
            for b in self.biases
        ]
        return dup

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.data.shape:
                raise DimensionMismatchError(
                    f"checkpoint array {name} has shape {arrays[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arrays[name].astype(np.float64).copy()

    def to_metadata(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "final_mode": self.final_mode,
            "activation": self.activation,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "DenseNetwork":
        return cls(
            meta["layer_sizes"],
            final_mode=meta["final_mode"],
            activation=meta["activation"],
        )


def _act_numpy(name: str, x: np.ndarray) -> np.ndarray:
    if name == "elu":
        return np.where(x > 0, x, np.expm1(x))
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _cosine_numpy(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    hn = np.maximum(np.linalg.norm(h, axis=1), ad.NORM_EPS)
    wn = np.maximum(np.linalg.norm(w, axis=0), ad.NORM_EPS)
    cos = (h @ w) / (hn[:, None] * wn[None, :])
    dead = (hn <= ad.NORM_EPS)[:, None] | (wn <= ad.NORM_EPS)[None, :]
    if dead.any():
        cos = np.where(dead, 0.0, cos)
    return cos


def activation_range(name: str) -> tuple[float, float]:
    """Image of [-1, 1] under the activation (bounds for cosine-normalized outputs)."""
    lo, hi = -1.0, 1.0
    probe = np.array([lo, hi])
    out = _act_numpy(name, probe)
    return float(out[0]), float(out[1])


# ---------------------------------------------------------------------------
# checkpoint container: self-describing, deterministic bytes
# ---------------------------------------------------------------------------

def save_arrays(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write named float arrays plus JSON metadata; identical content -> identical bytes."""
    names = sorted(arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "arrays": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": "float64"}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported format version {header['format_version']}"
            )
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, header["metadata"]


def save_network(path, net: DenseNetwork, extra_metadata: dict | None = None) -> None:
    meta = {"network": net.to_metadata()}
    if extra_metadata:
        meta.update(extra_metadata)
    save_arrays(path, net.state_arrays(), meta)


def load_network(path) -> tuple[DenseNetwork, dict]:
    arrays, meta = load_arrays(path)
    net = DenseNetwork.from_metadata(meta["network"])
    net.load_state_arrays(arrays)
    return net, meta
