"""Hypergraph convolution with learnable hyperedge weights, gated attention and readout."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, ParameterError
from .hypergraph import Hypergraph

READOUT_KINDS = ("mlp", "mean", "max")
ALPHA_MODES = ("softmax", "none")

# softplus(ln(e - 1)) == 1
UNIT_RAW_WEIGHT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class HyperParams:
    k: int | None = None  # None: N // 10, at least 2
    n_layers: int = 1
    hidden_dims: tuple[int, ...] = (64,)
    att_hidden: int = 32
    readout_dim: int = 64
    readout_kind: str = "mlp"
    alpha_normalization: str = "softmax"
    gated_attention: bool = True
    learn_edges: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.n_layers < 1:
            raise ParameterError(f"n_layers must be >= 1, got {self.n_layers}")
        dims = [*self.hidden_dims, self.att_hidden, self.readout_dim]
        if not self.hidden_dims or min(dims) < 1:
            raise ParameterError("all dimensions must be >= 1")
        if len(self.hidden_dims) not in (1, self.n_layers):
            raise ParameterError(
                f"hidden_dims has {len(self.hidden_dims)} entries for {self.n_layers} layers"
            )
        if self.readout_kind not in READOUT_KINDS:
            raise ParameterError(f"unknown readout kind {self.readout_kind!r}")
        if self.alpha_normalization not in ALPHA_MODES:
            raise ParameterError(f"unknown alpha normalization {self.alpha_normalization!r}")
        if self.k is not None and self.k < 2:
            raise ParameterError(f"k must be >= 2, got {self.k}")

    def layer_dims(self) -> list[int]:
        if len(self.hidden_dims) == 1:
            return list(self.hidden_dims) * self.n_layers
        return list(self.hidden_dims)

    def resolve_k(self, n_nodes: int) -> int:
        k = self.k if self.k is not None else max(2, n_nodes // 10)
        if k > n_nodes:
            raise ParameterError(f"k={k} exceeds the number of nodes N={n_nodes}")
        return k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> HyperParams:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(hyper: HyperParams, n_nodes: int) -> dict[str, tuple[int, int]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    shapes: dict[str, tuple[int, int]] = {}
    fan_in = n_nodes
    for d, f_out in enumerate(hyper.layer_dims()):
        shapes[f"theta_{d}"] = (fan_in, f_out)
        fan_in = f_out
    feat, att = fan_in, hyper.att_hidden
    shapes["raw_edge_weights"] = (n_nodes, 1)
    shapes["gate_a_w"] = (feat, att)
    shapes["gate_a_b"] = (1, att)
    shapes["gate_b_w"] = (feat, att)
    shapes["gate_b_b"] = (1, att)
    shapes["gate_alpha_w"] = (att, 1)
    shapes["gate_alpha_b"] = (1, 1)
    readout_in = n_nodes * feat if hyper.readout_kind == "mlp" else feat
    shapes["readout_w"] = (readout_in, hyper.readout_dim)
    shapes["readout_b"] = (1, hyper.readout_dim)
    shapes["clf_w"] = (hyper.readout_dim, 1)
    shapes["clf_b"] = (1, 1)
    return shapes


@dataclass
class ModelParams:
    """Named parameter arrays in canonical order (see :func:`param_shapes`)."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def conv_thetas(self) -> list[np.ndarray]:
        return [v for k, v in self.arrays.items() if k.startswith("theta_")]

    @property
    def raw_edge_weights(self) -> np.ndarray:
        return self.arrays["raw_edge_weights"]

    def effective_edge_weights(self) -> np.ndarray:
        return np.logaddexp(0.0, self.raw_edge_weights).reshape(-1)

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, _validate=False) for k, v in self.arrays.items()}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(hyper: HyperParams, n_nodes: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(hyper, n_nodes).items():
        if name == "raw_edge_weights":
            arrays[name] = np.full(shape, UNIT_RAW_WEIGHT)
        elif shape[0] == 1 and name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = glorot_uniform(rng, *shape)
    return ModelParams(arrays)


def hypergraph_conv(x: Tensor, hg: Hypergraph, raw_w: Tensor, theta: Tensor) -> Tensor:
    """``relu(D^-1 H W B^-1 H^T X Theta)`` with ``W = diag(softplus(raw_w))``.

    ``D`` is recomputed from the current weights so the gradient reaches
    ``raw_w`` through the normalisation as well.
    """
    n = hg.n_nodes
    if x.shape[0] != n or raw_w.value.size != hg.n_hyperedges:
        raise DimensionError(
            f"hypergraph_conv: X {x.shape}, raw_w {raw_w.shape} vs hypergraph N={n}, K={hg.n_hyperedges}"
        )
    H = ad.constant(hg.incidence)
    w = ad.softplus(raw_w)
    if w.shape[1] != 1:
        w = ad.transpose(w)
    inv_b = ad.constant(1.0 / hg.hyperedge_degrees[:, None])
    edge_scale = ad.mul(w, inv_b)
    inv_d = ad.reciprocal(H @ w)
    edge_feats = ad.row_scale(H.T @ x, edge_scale)
    return ad.relu(ad.row_scale(H @ edge_feats, inv_d) @ theta)


def gated_attention(x: Tensor, p: Mapping[str, Tensor], alpha_normalization: str = "softmax"):
    """Return ``(Z, alpha)`` with ``alpha`` an ``N x 1`` per-node score."""
    a = ad.sigmoid(x @ p["gate_a_w"] + p["gate_a_b"])
    g = ad.tanh(x @ p["gate_b_w"] + p["gate_b_b"])
    scores = ad.mul(a, g) @ p["gate_alpha_w"] + p["gate_alpha_b"]
    if alpha_normalization == "softmax":
        alpha = ad.transpose(ad.softmax_rows(ad.transpose(scores)))
    elif alpha_normalization == "none":
        alpha = scores
    else:
        raise ParameterError(f"unknown alpha normalization {alpha_normalization!r}")
    return ad.row_scale(x, alpha), alpha


def uniform_attention(x: Tensor):
    n = x.shape[0]
    alpha = ad.constant(np.full((n, 1), 1.0 / n))
    return ad.row_scale(x, alpha), alpha


def readout(z: Tensor, p: Mapping[str, Tensor], kind: str) -> Tensor:
    if kind == "mlp":
        return ad.relu(ad.flatten(z) @ p["readout_w"] + p["readout_b"])
    if kind == "mean":
        return ad.col_mean(z) @ p["readout_w"] + p["readout_b"]
    if kind == "max":
        return ad.col_max(z) @ p["readout_w"] + p["readout_b"]
    raise ParameterError(f"unknown readout kind {kind!r}")


def forward_graph(p: Mapping[str, Tensor], hyper: HyperParams, hg: Hypergraph, x0) -> tuple[Tensor, Tensor]:
    """Build the graph for one subject; returns ``(probability, alpha)`` nodes."""
    x = x0 if isinstance(x0, Tensor) else ad.constant(x0)
    if x.shape[0] != hg.n_nodes or p["raw_edge_weights"].value.size != hg.n_nodes:
        raise ContractError(
            f"input has {x.shape[0]} ROIs, hypergraph {hg.n_nodes}, model {p['raw_edge_weights'].value.size}"
        )
    for d in range(len(hyper.layer_dims())):
        x = hypergraph_conv(x, hg, p["raw_edge_weights"], p[f"theta_{d}"])
    if hyper.gated_attention:
        z, alpha = gated_attention(x, p, hyper.alpha_normalization)
    else:
        z, alpha = uniform_attention(x)
    r = readout(z, p, hyper.readout_kind)
    prob = ad.sigmoid(r @ p["clf_w"] + p["clf_b"])
    return prob, alpha


def forward(params: ModelParams, hyper: HyperParams, hg: Hypergraph, x0) -> tuple[float, np.ndarray, np.ndarray]:
    """Numeric forward pass: ``(probability, alpha, effective_w)``."""
    prob, alpha = forward_graph(params.leaves(), hyper, hg, np.asarray(x0, dtype=np.float64))
    return float(prob.value[0, 0]), alpha.value.reshape(-1).copy(), params.effective_edge_weights()


# ---------------------------------------------------------------------------
# Checkpoint format (all integers little-endian u32, floats little-endian f64):
#   b"HGAL" | version | n_nodes | len(hyper_json) | hyper_json (UTF-8, sorted keys)
#   | n_matrices | per matrix in param_shapes order: rows | cols | rows*cols floats
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"HGAL"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ModelParams, hyper: HyperParams) -> bytes:
    n_nodes = params.raw_edge_weights.size
    hjson = json.dumps(hyper.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, n_nodes, len(hjson)), hjson]
    chunks.append(struct.pack("<I", len(params.arrays)))
    for arr in params.arrays.values():
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: ModelParams, hyper: HyperParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, hyper))


def load_checkpoint(path) -> tuple[ModelParams, HyperParams]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint (need {n} bytes)", path, pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected b'HGAL'", path, 0)
    version, n_nodes, hlen = struct.unpack("<III", take(12))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    try:
        hyper = HyperParams.from_dict(json.loads(take(hlen).decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid hyperparameter block: {exc}", path, 16) from exc
    expected = param_shapes(hyper, n_nodes)
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise FormatError(f"expected {len(expected)} matrices, found {count}", path, pos - 4)
    arrays = {}
    for name, shape in expected.items():
        at = pos
        rows, cols = struct.unpack("<II", take(8))
        if (rows, cols) != shape:
            raise FormatError(f"{name}: shape {(rows, cols)} does not match {shape}", path, at)
        arrays[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(buf):
        raise FormatError("trailing bytes after last matrix", path, pos)
    return ModelParams(arrays), hyper


def with_hyper(hyper: HyperParams, **changes) -> HyperParams:
    return replace(hyper, **changes)
