"""Scalar mix and the stacked bidirectional LSTM used by the evaluation models."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import special

from ..numerics import Tensor, ops
from ..numerics.autograd import ShapeError, make_node


def scalar_mix(layers: Sequence[Tensor], weights: Tensor, gamma: Tensor) -> Tensor:
    """``gamma * sum_k softmax(weights)_k * layers[k]``."""
    if len(layers) != weights.shape[0]:
        raise ShapeError("scalar_mix", f"{len(layers)} layers but {weights.shape[0]} mixing weights")
    shape = layers[0].shape
    for layer in layers[1:]:
        if layer.shape != shape:
            raise ShapeError("scalar_mix", f"layer shapes differ: {layer.shape} vs {shape}")
    probs = ops.softmax(weights, axis=0)
    mixed = None
    for k, layer in enumerate(layers):
        term = layer * probs[k]
        mixed = term if mixed is None else mixed + term
    return mixed * gamma


class ScalarMix:
    def __init__(self, n_layers: int, prefix: str = "mix"):
        self.prefix = prefix
        self.params = {
            f"{prefix}.weights": Tensor(np.zeros(n_layers, dtype=np.float32), requires_grad=True, name=f"{prefix}.weights"),
            f"{prefix}.gamma": Tensor(np.ones(1, dtype=np.float32), requires_grad=True, name=f"{prefix}.gamma"),
        }

    def __call__(self, layers: Sequence[Tensor]) -> Tensor:
        return scalar_mix(layers, self.params[f"{self.prefix}.weights"], self.params[f"{self.prefix}.gamma"])


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_recurrence(xw: Tensor, recurrent: Tensor, h_mask: Optional[np.ndarray] = None) -> Tensor:
    """Run the LSTM recurrence left to right over pre-projected inputs.

    ``xw`` is (B, T, 4H) holding ``x_t W + b`` with gate blocks ordered
    input, forget, cell, output; ``recurrent`` is (H, 4H).  ``h_mask``
    (B, H) multiplies the previous hidden state before the recurrent
    product (variational recurrent dropout).  Returns hidden states (B, T, H).
    """
    b, t, four_h = xw.shape
    h = four_h // 4
    if recurrent.shape != (h, four_h):
        raise ShapeError("lstm", f"recurrent weight {recurrent.shape}, expected {(h, four_h)}")
    x = xw.data
    u = recurrent.data
    dtype = x.dtype
    gates = np.empty((t, 4, b, h), dtype=dtype)
    cells = np.empty((t + 1, b, h), dtype=dtype)
    h_in = np.empty((t, b, h), dtype=dtype)
    tanh_c = np.empty((t, b, h), dtype=dtype)
    out = np.empty((b, t, h), dtype=dtype)
    cells[0] = 0
    prev = np.zeros((b, h), dtype=dtype)
    for step in range(t):
        hi = prev if h_mask is None else prev * h_mask
        h_in[step] = hi
        z = x[:, step] + hi @ u
        i = special.expit(z[:, :h])
        f = special.expit(z[:, h:2 * h])
        g = np.tanh(z[:, 2 * h:3 * h])
        o = special.expit(z[:, 3 * h:])
        gates[step] = (i, f, g, o)
        cells[step + 1] = f * cells[step] + i * g
        tanh_c[step] = np.tanh(cells[step + 1])
        prev = o * tanh_c[step]
        out[:, step] = prev

    def backward(grad):
        dxw = np.empty_like(x)
        du = np.zeros_like(u)
        dh_next = np.zeros((b, h), dtype=dtype)
        dc_next = np.zeros((b, h), dtype=dtype)
        for step in reversed(range(t)):
            i, f, g, o = gates[step]
            dh = grad[:, step] + dh_next
            tc = tanh_c[step]
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = np.concatenate([
                dc * g * i * (1 - i),
                dc * cells[step] * f * (1 - f),
                dc * i * (1 - g * g),
                dh * tc * o * (1 - o),
            ], axis=1)
            dxw[:, step] = dz
            du += h_in[step].T @ dz
            dc_next = dc * f
            dh_in = dz @ u.T
            dh_next = dh_in if h_mask is None else dh_in * h_mask
        return dxw, du

    return make_node(out, (xw, recurrent), backward, "lstm")


def reverse_index(lengths: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays reversing each row's first ``lengths[b]`` steps in place.

    Padding positions map to themselves, so applying the index twice is the identity.
    """
    steps = np.arange(t)[None, :]
    lengths = np.asarray(lengths)[:, None]
    cols = np.where(steps < lengths, lengths - 1 - steps, steps)
    rows = np.broadcast_to(np.arange(len(lengths))[:, None], cols.shape)
    return rows, cols


class BiLSTM:
    """Stacked bidirectional LSTM.

    With ``highway``, every layer whose input width equals its output width
    (all but the first) mixes its input back in through a learned gate:
    ``y = g * lstm(x) + (1 - g) * x`` with ``g = sigmoid(x W_g + b_g)``.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: int,
        layers: int,
        recurrent_dropout: float = 0.0,
        highway: bool = False,
        seed: int = 0,
        prefix: str = "lstm",
    ):
        if layers < 1 or hidden < 1:
            raise ValueError("BiLSTM needs at least one layer and a positive hidden size")
        self.input_dim = input_dim
        self.hidden = hidden
        self.layers = layers
        self.recurrent_dropout = recurrent_dropout
        self.highway = highway
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(hidden)
        self.params: dict[str, Tensor] = {}

        def add(name, array):
            self.params[name] = Tensor(array.astype(np.float32), requires_grad=True, name=name)

        for layer in range(layers):
            d_in = input_dim if layer == 0 else 2 * hidden
            for direction in ("fwd", "bwd"):
                p = f"{prefix}.l{layer}.{direction}"
                add(f"{p}.weight", rng.uniform(-bound, bound, (d_in, 4 * hidden)))
                add(f"{p}.recurrent", rng.uniform(-bound, bound, (hidden, 4 * hidden)))
                bias = np.zeros(4 * hidden)
                bias[hidden:2 * hidden] = 1.0  # forget-gate bias
                add(f"{p}.bias", bias)
            if highway and d_in == 2 * hidden:
                add(f"{prefix}.l{layer}.highway.weight", rng.uniform(-bound, bound, (d_in, 2 * hidden)))
                add(f"{prefix}.l{layer}.highway.bias", np.zeros(2 * hidden))

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def __call__(
        self,
        x: Tensor,
        lengths: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        return bilstm_forward(
            x, lengths, self.params, self.layers, self.hidden,
            self.recurrent_dropout if training else 0.0, self.highway, rng, self.prefix,
        )


def bilstm_forward(
    x: Tensor,
    lengths: np.ndarray,
    params: dict[str, Tensor],
    layers: int,
    hidden: int,
    recurrent_dropout: float = 0.0,
    highway: bool = False,
    rng: Optional[np.random.Generator] = None,
    prefix: str = "lstm",
) -> Tensor:
    """(B, T, D) -> (B, T, 2*hidden); positions at or past ``lengths[b]`` are zero."""
    b, t, _ = x.shape
    lengths = np.asarray(lengths)
    if np.any(lengths < 1) or np.any(lengths > t):
        raise ValueError("every sequence needs between 1 and T steps")
    if recurrent_dropout and rng is None:
        raise ValueError("recurrent dropout needs an RNG")
    rev = reverse_index(lengths, t)
    valid = (np.arange(t)[None, :] < lengths[:, None]).astype(x.dtype)[:, :, None]
    keep = 1.0 - recurrent_dropout
    for layer in range(layers):
        outputs = []
        for direction in ("fwd", "bwd"):
            p = f"{prefix}.l{layer}.{direction}"
            inp = x if direction == "fwd" else x[rev]
            xw = ops.linear(inp, params[f"{p}.weight"], params[f"{p}.bias"])
            mask = None
            if recurrent_dropout:
                mask = ((rng.random((b, hidden)) < keep) / keep).astype(x.dtype)
            hs = lstm_recurrence(xw, params[f"{p}.recurrent"], mask)
            outputs.append(hs if direction == "fwd" else hs[rev])
        y = ops.concat(outputs, axis=-1)
        gate_name = f"{prefix}.l{layer}.highway.weight"
        if highway and gate_name in params:
            gate = ops.sigmoid(ops.linear(x, params[gate_name], params[f"{prefix}.l{layer}.highway.bias"]))
            y = gate * y + (1.0 - gate) * x
        x = y * Tensor(valid)
    return x
