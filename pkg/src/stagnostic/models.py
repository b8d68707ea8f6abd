"""The six forecasters behind one interface: ``(B, T, S)`` in, ``(B, T', S)`` out.

Every model is a single convolutional stage producing an ``H x T x S``
latent image followed by the shared :class:`~stagnostic.layers.RegressorHead`.

========== ======================================================================
kind       convolutional stage
========== ======================================================================
A-CNN      agnostic causal block -> batch norm -> ReLU
CNN        3x3 convolution, same padding -> batch norm -> ReLU
A-ConvLSTM ConvLSTM with agnostic convolutions -> ReLU
ConvLSTM   ConvLSTM with 3-wide spatial kernels -> ReLU
A-GCN-LSTM graph convolution with identity adjacency -> node-wise LSTM -> ReLU
GCN-LSTM   graph convolution (k-hop, 4-NN adjacency) -> node-wise LSTM -> ReLU
========== ======================================================================
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .layers import (AgnosticConvBlock, AgnosticConvLstmCell, BatchNorm, ConvLstmCell,
                     GraphConvLayer, Module, RegressorHead, uniform_init)
from .tensor import ShapeError, Tensor

KINDS = ("A-CNN", "CNN", "A-ConvLSTM", "ConvLSTM", "A-GCN-LSTM", "GCN-LSTM")
AGNOSTIC_KINDS = ("A-CNN", "A-ConvLSTM", "A-GCN-LSTM")
TRADITIONAL_KINDS = ("CNN", "ConvLSTM", "GCN-LSTM")
#: (agnostic, traditional) pairs compared in the paired hypotheses
PAIRS = (("A-CNN", "CNN"), ("A-ConvLSTM", "ConvLSTM"), ("A-GCN-LSTM", "GCN-LSTM"))
GRID_KINDS = ("CNN", "ConvLSTM")
GCN_KINDS = ("A-GCN-LSTM", "GCN-LSTM")


class ConfigError(ValueError):
    """Invalid combination of model configuration fields."""


@dataclass
class ModelConfig:
    """Shape and structure of one forecaster.

    ``order`` is the column arrangement applied before the grid models (CNN,
    ConvLSTM) see the data; outputs are mapped back to the caller's column
    order.  ``adjacency`` is only accepted for GCN-LSTM; A-GCN-LSTM always
    uses the identity.
    """

    kind: str
    T: int
    T_out: int
    S: int
    H: int
    t_past: int | None = None
    k: int | None = None
    adjacency: np.ndarray | None = None
    order: Sequence[int] | None = None
    in_channels: int = 1
    seed: int = 0
    ungated_candidate: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for field in ("T", "T_out", "S", "H", "in_channels"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{field} must be a positive integer, got {value!r}")
        if self.kind == "A-CNN":
            if self.t_past is None:
                raise ConfigError("A-CNN requires t_past")
            if not 1 <= self.t_past <= self.T:
                raise ConfigError(f"t_past must lie in [1, T={self.T}], got {self.t_past}")
        elif self.t_past is not None:
            raise ConfigError(f"t_past only applies to A-CNN, not {self.kind}")
        if self.kind in GCN_KINDS:
            if self.k is None:
                self.k = 3
            if self.k < 1:
                raise ConfigError(f"hop order k must be positive, got {self.k}")
        elif self.k is not None:
            raise ConfigError(f"k only applies to GCN variants, not {self.kind}")
        if self.kind == "GCN-LSTM":
            if self.adjacency is None:
                raise ConfigError("GCN-LSTM requires an adjacency matrix")
            a = np.asarray(self.adjacency)
            if a.shape != (self.S, self.S):
                raise ConfigError(f"adjacency shape {a.shape} != ({self.S}, {self.S})")
            if not np.isin(a, (0, 1)).all():
                raise ConfigError("adjacency must be binary")
            if not np.array_equal(a, a.T):
                raise ConfigError("adjacency must be symmetric")
            if np.any(np.diag(a)):
                raise ConfigError("adjacency must have a zero diagonal")
            self.adjacency = a.astype(np.int64)
        elif self.adjacency is not None:
            raise ConfigError(f"{self.kind} takes no adjacency")
        if self.order is not None:
            if self.kind not in GRID_KINDS:
                raise ConfigError(f"{self.kind} takes no spatial ordering")
            order = np.asarray(self.order, dtype=np.int64)
            if sorted(order.tolist()) != list(range(self.S)):
                raise ConfigError("order must be a permutation of range(S)")
            self.order = order

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("adjacency", "order"):
            if d[key] is not None:
                d[key] = np.asarray(d[key]).tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if d.get("adjacency") is not None:
            d["adjacency"] = np.asarray(d["adjacency"], dtype=np.int64)
        return cls(**d)


class Forecaster(Module):
    """A built model; see the module docstring for the per-kind stage."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c, h, s = cfg.in_channels, cfg.H, cfg.S
        self.norm: BatchNorm | None = None
        if cfg.kind == "A-CNN":
            self.block = self.add_child("block", AgnosticConvBlock(c, h, s, cfg.t_past, rng))
            self.norm = self.add_child("norm", BatchNorm(h))
        elif cfg.kind == "CNN":
            fan = c * 9
            self.kernel = self.add_param("kernel", uniform_init(rng, (h, c, 3, 3), fan))
            self.bias = self.add_param("bias", uniform_init(rng, (h,), fan))
            self.norm = self.add_child("norm", BatchNorm(h))
        elif cfg.kind == "A-ConvLSTM":
            self.cell = self.add_child("cell", AgnosticConvLstmCell(c, h, s, rng,
                                                                    cfg.ungated_candidate))
        elif cfg.kind == "ConvLSTM":
            self.cell = self.add_child("cell", ConvLstmCell(c, h, 3, rng, cfg.ungated_candidate))
        else:
            adjacency = np.eye(s, dtype=np.int64) if cfg.kind == "A-GCN-LSTM" else cfg.adjacency
            self.graph = self.add_child("graph", GraphConvLayer(adjacency, cfg.k, c, rng))
            self.cell = self.add_child("cell", ConvLstmCell(c, h, 1, rng, cfg.ungated_candidate))
        self.head = self.add_child("head", RegressorHead(h, cfg.T, cfg.T_out, rng))
        if cfg.order is not None:
            self._order = np.asarray(cfg.order)
            self._inverse = np.argsort(self._order)
        else:
            self._order = None

    def conv_stage(self, x: Tensor, training: bool = False) -> Tensor:
        """Map ``(B, C, T, S)`` to the ``(B, H, T, S)`` latent image."""
        kind = self.cfg.kind
        if kind == "A-CNN":
            return tn.relu(self.norm(self.block(x), training))
        if kind == "CNN":
            z = tn.conv2d(x, self.kernel, self.bias, padding=(1, 1, 1, 1))
            return tn.relu(self.norm(z, training))
        if kind in ("A-ConvLSTM", "ConvLSTM"):
            return tn.relu(self.cell.sequence(x))
        b, c, t, s = x.shape
        nodes = tn.transpose(x, (0, 2, 3, 1))               # B,T,S,C
        mixed = tn.transpose(self.graph(nodes), (0, 3, 1, 2))
        return tn.relu(self.cell.sequence(mixed))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """Forecast ``(B, T', S)`` from ``(B, T, S)`` (or ``(B, C, T, S)``)."""
        cfg = self.cfg
        if x.ndim == 3:
            x = tn.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.T, cfg.S):
            raise ShapeError(f"{cfg.kind} expects input (B, {cfg.T}, {cfg.S}) "
                             f"with {cfg.in_channels} channel(s), got {x.shape}")
        if self._order is not None:
            x = tn.take(x, self._order, axis=-1)
        out = self.head(self.conv_stage(x, training))
        if self._order is not None:
            out = tn.take(out, self._inverse, axis=-1)
        return out

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode forecasts for an array of windows ``(n, T, S)``."""
        outs = []
        with tn.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.forward(Tensor(x[start:start + batch_size])).data)
        return np.concatenate(outs, axis=0)

    def state(self) -> list[np.ndarray]:
        """Copy of every parameter and buffer, in declaration order."""
        return ([t.data.copy() for t in self.parameters()]
                + [b.copy() for _, b in self.buffers()])

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        bufs = [b for _, b in self.buffers()]
        if len(state) != len(params) + len(bufs):
            raise ValueError("state does not match this model's parameters")
        for t, v in zip(params, state):
            if t.shape != np.shape(v):
                raise ShapeError(f"parameter {t.name}: shape {np.shape(v)} != {t.shape}")
            t.data = np.array(v, dtype=np.float64)
        for b, v in zip(bufs, state[len(params):]):
            b[...] = v


def build_model(cfg: ModelConfig) -> Forecaster:
    return Forecaster(cfg)


@dataclass(frozen=True)
class ParameterCount:
    """Trainable scalars of the convolutional stage, its batch norm (if any) and the head."""

    conv_stage: int
    regressor: int
    norm: int = 0

    @property
    def total(self) -> int:
        return self.conv_stage + self.norm + self.regressor

    def __int__(self) -> int:
        return self.total


def count_parameters(f: Forecaster) -> ParameterCount:
    """Trainable scalar count, split into convolutional stage, batch norm and regressor head."""
    head = f.head.num_parameters()
    norm = f.norm.num_parameters() if f.norm is not None else 0
    return ParameterCount(conv_stage=f.num_parameters() - head - norm, regressor=head, norm=norm)


def expected_parameter_count(cfg: ModelConfig) -> ParameterCount:
    """Closed-form count for ``cfg`` without building the model."""
    c, h, s, t = cfg.in_channels, cfg.H, cfg.S, cfg.T
    kind = cfg.kind
    norm = 2 * h if kind in ("A-CNN", "CNN") else 0
    if kind == "A-CNN":
        conv = AgnosticConvBlock.parameter_count(c, h, s, cfg.t_past)
    elif kind == "CNN":
        conv = h * (9 * c + 1)
    elif kind == "A-ConvLSTM":
        g = 4 * h
        conv = g * c * s + g * s + g * h * s + g * s + g
    elif kind == "ConvLSTM":
        conv = 4 * h * (c + h) * 3 + 4 * h
    else:
        conv = cfg.k * s * s + cfg.k * s * c + 4 * h * (c + h) + 4 * h
    return ParameterCount(conv, RegressorHead.parameter_count(h, t, cfg.T_out), norm)


def match_hidden_width(target_params: int, cfg: ModelConfig) -> ModelConfig:
    """Largest ``H`` whose total parameter count does not exceed ``target_params``."""
    smallest = expected_parameter_count(cfg.replace(H=1)).total
    if target_params < smallest:
        raise ConfigError(f"{cfg.kind} needs at least {smallest} parameters, "
                          f"target was {target_params}")
    h = 1
    while expected_parameter_count(cfg.replace(H=h + 1)).total <= target_params:
        h += 1
    return cfg.replace(H=h)


# ------------------------------------------------------------------ checkpoints

_MAGIC = b"STCK"
_VERSION = 1


def save_checkpoint(f: Forecaster, path: str | Path, epoch: int | None = None,
                    extra: dict | None = None) -> None:
    """Write a JSON header followed by little-endian float64 weights.

    Layout: ``b"STCK"``, uint32 version, uint64 header length, UTF-8 JSON
    header, then every parameter and buffer flattened in declaration order.
    """
    names = [n for n, _ in f.named_parameters()] + [n for n, _ in f.buffers()]
    arrays = f.state()
    header = {
        "format": "stagnostic-checkpoint",
        "version": _VERSION,
        "config": f.cfg.to_json(),
        "seed": f.cfg.seed,
        "epoch": epoch,
        "tensors": [[n, list(a.shape)] for n, a in zip(names, arrays)],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Forecaster, dict]:
    """Rebuild a forecaster from :func:`save_checkpoint` output; returns ``(model, header)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    model = build_model(ModelConfig.from_json(header["config"]))
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    state, pos = [], 0
    for _, shape in header["tensors"]:
        n = int(np.prod(shape))
        state.append(payload[pos:pos + n].reshape(shape).astype(np.float64))
        pos += n
    if pos != payload.size:
        raise ValueError(f"{path}: payload size does not match header")
    model.load_state(state)
    return model, header
