"""Convolutional building blocks shared by the six forecasters.

All image-like tensors use the layout ``(B, C, T, S)``: batch, channels,
time rows, spatial columns.  Recurrent cells consume one time row at a time
as a ``(B, C, 1, S)`` frame.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named trainable tensors and child modules, in declaration order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        """Non-trainable state (batch-norm running statistics)."""
        out: list[tuple[str, np.ndarray]] = []
        for cname, child in self._children.items():
            out.extend(child.buffers(f"{prefix}{cname}."))
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))


class BatchNorm(Module):
    """Batch normalization over every axis except channels.

    Eval mode normalizes with running statistics updated as
    ``running = (1 - momentum) * running + momentum * batch`` (unbiased
    variance), the usual convention.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-7):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if not training:
            return tn.batch_norm(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, self.eps)
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in train mode needs a batch of at least 2")
        axes = (0,) + tuple(range(2, x.ndim))
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * n / (n - 1)
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mu
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * var
        return tn.batch_norm(x, self.gamma, self.beta, eps=self.eps)


class AgnosticConvBlock(Module):
    """Causal convolution spanning every location, then a per-channel row expansion.

    Stage one slides ``hidden`` kernels of shape ``t_past x S`` down the time
    axis of a ``T x S`` image padded with ``t_past - 1`` zero rows on top
    only, producing ``hidden`` maps of shape ``T x 1``.  Row ``t`` therefore
    sees input rows ``t - t_past + 1 .. t`` and nothing later.  Stage two
    turns each ``T x 1`` map back into ``T x S`` with a transposed
    convolution of kernel size ``(1, S)``.
    """

    def __init__(self, in_channels: int, hidden: int, n_locations: int, t_past: int,
                 rng: np.random.Generator):
        super().__init__()
        if t_past < 1:
            raise ValueError(f"t_past must be positive, got {t_past}")
        self.in_channels = in_channels
        self.hidden = hidden
        self.n_locations = n_locations
        self.t_past = t_past
        fan = in_channels * t_past * n_locations
        self.kernel = self.add_param("kernel", uniform_init(rng, (hidden, in_channels, t_past,
                                                                  n_locations), fan))
        self.bias = self.add_param("bias", uniform_init(rng, (hidden,), fan))
        self.row = self.add_param("row", uniform_init(rng, (hidden, 1, n_locations), 1))
        self.row_bias = self.add_param("row_bias", uniform_init(rng, (hidden,), 1))

    def stage1(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_locations:
            raise ShapeError(f"agnostic block built for S={self.n_locations}, "
                             f"got input with {x.shape[-1]} locations")
        return tn.conv2d(x, self.kernel, self.bias, padding=(self.t_past - 1, 0, 0, 0))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv_transpose_row(self.stage1(x), self.row, self.row_bias)

    @staticmethod
    def parameter_count(in_channels: int, hidden: int, n_locations: int, t_past: int) -> int:
        return hidden * (in_channels * t_past * n_locations + 1) + hidden * (n_locations + 1)


def _zeros_state(batch: int, hidden: int, n_locations: int) -> tuple[Tensor, Tensor]:
    z = np.zeros((batch, hidden, 1, n_locations))
    return Tensor(z), Tensor(z)


class ConvLstmCell(Module):
    """ConvLSTM cell whose convolutions run along the spatial axis of a frame.

    Gate kernels are stacked in the order input, forget, candidate, output,
    so ``w_x[0:H]`` is W_xi, ``w_x[H:2H]`` is W_xf and so on.  Each frame is a
    single time row, so a ``width``-wide kernel with "same" padding covers a
    location and its ``width // 2`` neighbours on either side; ``width=1``
    gives a node-wise LSTM with weights shared across locations.
    """

    def __init__(self, in_channels: int, hidden: int, width: int, rng: np.random.Generator,
                 ungated_candidate: bool = False):
        super().__init__()
        if width < 1 or width % 2 == 0:
            raise ValueError(f"kernel width must be a positive odd number, got {width}")
        self.in_channels = in_channels
        self.hidden = hidden
        self.width = width
        self.ungated_candidate = ungated_candidate
        self.padding = (0, 0, width // 2, width // 2)
        fan = (in_channels + hidden) * width
        self.w_x = self.add_param("w_x", uniform_init(rng, (4 * hidden, in_channels, 1, width), fan))
        self.w_h = self.add_param("w_h", uniform_init(rng, (4 * hidden, hidden, 1, width), fan))
        self.b = self.add_param("b", uniform_init(rng, (4 * hidden,), fan))

    def input_part(self, x: Tensor) -> Tensor:
        """Input-to-state contributions ``W_x * X_t + b`` for every row at once."""
        return tn.conv2d(x, self.w_x, self.b, padding=self.padding)

    def hidden_part(self, h: Tensor) -> Tensor:
        return tn.conv2d(h, self.w_h, padding=self.padding)

    def step(self, x_t: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        if h_prev.shape != c_prev.shape:
            raise ShapeError(f"hidden {h_prev.shape} and cell {c_prev.shape} states differ")
        return self._update(self.input_part(x_t), state)

    def _update(self, x_part: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        expected = (x_part.shape[0], self.hidden, 1, x_part.shape[-1])
        if h_prev.shape != expected or c_prev.shape != expected:
            raise ShapeError(f"state shape {h_prev.shape} does not match {expected}")
        hc = tn.lstm_cell(x_part + self.hidden_part(h_prev), c_prev, self.ungated_candidate)
        return hc[:, :self.hidden], hc[:, self.hidden:]

    def sequence(self, x: Tensor) -> Tensor:
        """Unroll over the time rows of ``(B, C, T, S)``; returns all hidden states ``(B, H, T, S)``."""
        batch, _, steps, n_loc = x.shape
        state = _zeros_state(batch, self.hidden, n_loc)
        hs = []
        for t in range(steps):
            state = self._update(self.input_part(x[:, :, t:t + 1]), state)
            hs.append(state[0])
        return tn.concat(hs, axis=2)


class AgnosticConvLstmCell(ConvLstmCell):
    """ConvLSTM cell with every convolution replaced by the agnostic operator.

    ``W_x * X_t`` becomes a ``1 x S`` kernel over the whole frame followed by a
    learned ``1 x S`` row per gate channel, and likewise for ``W_h * H_{t-1}``.
    No temporal causality is needed since the recurrence handles time.
    """

    def __init__(self, in_channels: int, hidden: int, n_locations: int,
                 rng: np.random.Generator, ungated_candidate: bool = False):
        Module.__init__(self)
        self.in_channels = in_channels
        self.hidden = hidden
        self.n_locations = n_locations
        self.ungated_candidate = ungated_candidate
        g = 4 * hidden
        fan = (in_channels + hidden) * n_locations
        self.w_x = self.add_param("w_x", uniform_init(rng, (g, in_channels, 1, n_locations), fan))
        self.r_x = self.add_param("r_x", uniform_init(rng, (g, 1, n_locations), 1))
        self.w_h = self.add_param("w_h", uniform_init(rng, (g, hidden, 1, n_locations), fan))
        self.r_h = self.add_param("r_h", uniform_init(rng, (g, 1, n_locations), 1))
        self.b = self.add_param("b", uniform_init(rng, (g,), fan))

    def input_part(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_locations:
            raise ShapeError(f"cell built for S={self.n_locations}, got {x.shape[-1]} locations")
        return tn.conv_transpose_row(tn.conv2d(x, self.w_x), self.r_x, self.b)

    def hidden_part(self, h: Tensor) -> Tensor:
        return tn.conv_transpose_row(tn.conv2d(h, self.w_h), self.r_h)


def khop_masks(adjacency: np.ndarray, k: int) -> np.ndarray:
    """Stack of ``min{A^kappa + I, 1}`` for ``kappa = 1..k`` as a ``(k, S, S)`` 0/1 array."""
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency must be binary")
    if k < 1:
        raise ValueError(f"hop order must be positive, got {k}")
    a = a.astype(bool)
    eye = np.eye(a.shape[0], dtype=bool)
    masks = []
    power = a
    for kappa in range(1, k + 1):
        if kappa > 1:
            power = (power.astype(np.int64) @ a.astype(np.int64)) > 0
        masks.append((power | eye).astype(np.float64))
    return np.stack(masks)


class GraphConvLayer(Module):
    """High-order graph convolution ``sum_kappa (W_kappa o A~^kappa) X + B_kappa``.

    Input is ``(..., S, F)``; the output keeps that shape.  Orders are
    aggregated by summation.
    """

    def __init__(self, adjacency: np.ndarray, k: int, features: int, rng: np.random.Generator):
        super().__init__()
        self.masks = khop_masks(adjacency, k)
        self.k = k
        s = self.masks.shape[1]
        self.n_locations = s
        self.features = features
        self.weights = [self.add_param(f"w{kappa}", uniform_init(rng, (s, s), s))
                        for kappa in range(1, k + 1)]
        self.biases = [self.add_param(f"b{kappa}", uniform_init(rng, (s, features), s))
                       for kappa in range(1, k + 1)]
        self._mask_tensors = [Tensor(m) for m in self.masks]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-2] != self.n_locations or x.shape[-1] != self.features:
            raise ShapeError(f"graph conv expects (..., {self.n_locations}, {self.features}), "
                             f"got {x.shape}")
        mixing = tn.mul(self.weights[0], self._mask_tensors[0])
        bias = self.biases[0]
        for w, m, b in zip(self.weights[1:], self._mask_tensors[1:], self.biases[1:]):
            mixing = mixing + tn.mul(w, m)
            bias = bias + b
        return tn.add_bias(tn.matmul(mixing, x), bias)


class RegressorHead(Module):
    """Kernel-size-1 convolution over ``(H*T) x S``: a shared linear map per location."""

    def __init__(self, hidden: int, steps_in: int, steps_out: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.steps_in = steps_in
        self.steps_out = steps_out
        fan = hidden * steps_in
        self.weight = self.add_param("weight", uniform_init(rng, (steps_out, fan, 1, 1), fan))
        self.bias = self.add_param("bias", uniform_init(rng, (steps_out,), fan))

    def __call__(self, latent: Tensor) -> Tensor:
        unbatched = latent.ndim == 3
        if unbatched:
            latent = tn.reshape(latent, (1,) + latent.shape)
        b, h, t, s = latent.shape
        if (h, t) != (self.hidden, self.steps_in):
            raise ShapeError(f"regressor expects latent (B,{self.hidden},{self.steps_in},S), "
                             f"got {latent.shape}")
        flat = tn.reshape(latent, (b, h * t, 1, s))
        out = tn.reshape(tn.conv2d(flat, self.weight, self.bias), (b, self.steps_out, s))
        return tn.reshape(out, out.shape[1:]) if unbatched else out

    @staticmethod
    def parameter_count(hidden: int, steps_in: int, steps_out: int) -> int:
        return hidden * steps_in * steps_out + steps_out
