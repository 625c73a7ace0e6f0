"""Parameter containers and the small layer vocabulary built on top of ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, ShapeError


class ParamStore:
    """Flat, ordered mapping of parameter name -> leaf tensor.

    Names are slash-separated (``"encoder/lstm/w_x"``) so groups can be
    selected by prefix.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def group(self, *prefixes: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if any(n.startswith(p) for p in prefixes)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state_dict(self, state) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def n_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def add_linear(store: ParamStore, prefix: str, n_in: int, n_out: int,
               rng: np.random.Generator, scale: float = 1.0) -> None:
    store.add(f"{prefix}/w", glorot(rng, n_in, n_out, (n_in, n_out)) * scale)
    store.add(f"{prefix}/b", np.zeros(n_out))


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, store[f"{prefix}/w"]), store[f"{prefix}/b"])


def add_conv(store: ParamStore, prefix: str, c_in: int, c_out: int, k: int,
             rng: np.random.Generator) -> None:
    fan_in, fan_out = c_in * k * k, c_out * k * k
    store.add(f"{prefix}/w", glorot(rng, fan_in, fan_out, (c_out, c_in, k, k)))
    store.add(f"{prefix}/b", np.zeros(c_out))


def conv(store: ParamStore, prefix: str, x: Tensor, stride: int) -> Tensor:
    return ops.conv2d(x, store[f"{prefix}/w"], store[f"{prefix}/b"], stride=stride)


def add_lstm(store: ParamStore, prefix: str, n_in: int, hidden: int,
             rng: np.random.Generator, forget_bias: float = 1.0) -> None:
    """Gate layout along the 4H axis is [input, forget, candidate, output]."""
    store.add(f"{prefix}/w_x", glorot(rng, n_in, 4 * hidden, (n_in, 4 * hidden)))
    store.add(f"{prefix}/w_h", glorot(rng, hidden, 4 * hidden, (hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden: 2 * hidden] = forget_bias
    store.add(f"{prefix}/b", b)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch: x (N, D), h_prev/c_prev (N, H)."""
    hidden = h_prev.shape[-1]
    if (
        c_prev.shape != h_prev.shape
        or w_h.shape != (hidden, 4 * hidden)
        or w_x.shape[1] != 4 * hidden
        or b.shape != (4 * hidden,)
    ):
        raise ShapeError(
            f"lstm_cell: hidden size mismatch h={h_prev.shape} c={c_prev.shape} "
            f"w_x={w_x.shape} w_h={w_h.shape} b={b.shape}"
        )
    if x.ndim != 2 or x.shape[1] != w_x.shape[0] or x.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"lstm_cell: input {x.shape} does not match w_x {w_x.shape} / h {h_prev.shape}")
    z = ops.add(ops.add(ops.matmul(x, w_x), ops.matmul(h_prev, w_h)), b)
    i = ops.sigmoid(z[:, :hidden])
    f = ops.sigmoid(z[:, hidden: 2 * hidden])
    g = ops.tanh(z[:, 2 * hidden: 3 * hidden])
    o = ops.sigmoid(z[:, 3 * hidden:])
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, c


def lstm(store: ParamStore, prefix: str, xs: Iterable[Tensor], h0: Tensor,
         c0: Tensor) -> tuple[list[Tensor], Tensor, Tensor]:
    """Unroll over a sequence of inputs, returning every hidden output and the final state."""
    w_x, w_h, b = store[f"{prefix}/w_x"], store[f"{prefix}/w_h"], store[f"{prefix}/b"]
    h, c = h0, c0
    outs = []
    for x in xs:
        h, c = lstm_cell(x, h, c, w_x, w_h, b)
        outs.append(h)
    return outs, h, c


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def mlp(store: ParamStore, prefix: str, x: Tensor, n_layers: int,
        final_activation: Optional[str] = None) -> Tensor:
    """Stack of ``{prefix}/l{i}`` linear layers with relu between them."""
    for i in range(n_layers):
        x = linear(store, f"{prefix}/l{i}", x)
        if i < n_layers - 1:
            x = ops.relu(x)
    if final_activation == "tanh":
        x = ops.tanh(x)
    return x


def add_mlp(store: ParamStore, prefix: str, sizes: list[int], rng: np.random.Generator,
            last_scale: float = 1.0) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = last_scale if i == len(sizes) - 2 else 1.0
        add_linear(store, f"{prefix}/l{i}", a, b, rng, scale=scale)
