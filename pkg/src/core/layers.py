import logging
from typing import Optional, Sequence

import numpy as np

from src.core.errors import CheckpointShapeError, ConfigError
from src.core import tensor as T
from src.core.tensor import LSTMParams, Tensor

logger = logging.getLogger(__name__)


class ParameterStore:
    """
    Named, ordered collection of trainable tensors.
    Creation order is the checkpoint table order and fixes the PRNG draw sequence,
    so two stores built from the same seed and config are bit-identical.
    """

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.Philox(key=seed))
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape: Sequence[int], fan_in: Optional[int] = None,
               fill: Optional[float] = None) -> Tensor:
        if name in self._params:
            raise ConfigError(f"Duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if fill is not None:
            data = np.full(shape, fill, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        param = T.parameter(data, name=name)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def named(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def load(self, tensors: dict[str, np.ndarray]):
        for name, param in self._params.items():
            if name not in tensors:
                raise CheckpointShapeError(name, expected=param.shape)
            data = tensors[name]
            if tuple(data.shape) != param.shape:
                raise CheckpointShapeError(name, param.shape, data.shape)
        for name, param in self._params.items():
            param.data = np.array(tensors[name], dtype=np.float64)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.d_out = d_out
        self.weight = store.create(f"{name}.weight", (d_in, d_out))
        self.bias = store.create(f"{name}.bias", (d_out,), fill=0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is None:
            return out
        bias = self.bias if x.ndim == 1 else T.reshape(self.bias, (1, self.d_out))
        return T.add(out, bias)


class Embedding:
    def __init__(self, store: ParameterStore, name: str, n: int, d: int):
        self.table = store.create(f"{name}.table", (n, d), fan_in=d)

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class LSTMCell:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_h: int):
        self.d_h = d_h
        w_x = store.create(f"{name}.w_x", (d_in, 4 * d_h))
        w_h = store.create(f"{name}.w_h", (d_h, 4 * d_h))
        bias = np.zeros(4 * d_h)
        bias[d_h:2 * d_h] = 1.0
        b = store.create(f"{name}.bias", (4 * d_h,), fill=0.0)
        b.data = bias
        self.params = LSTMParams(w_x, w_h, b)

    def zero_state(self) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros(self.d_h)), Tensor(np.zeros(self.d_h))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return T.lstm_cell(x, h, c, self.params)


class Conv1d:
    def __init__(self, store: ParameterStore, name: str, width: int, c_in: int, c_out: int):
        if width % 2 == 0:
            raise ConfigError(f"{name}: kernel width must be odd, got {width}")
        self.c_out = c_out
        self.kernel = store.create(f"{name}.kernel", (width, c_in, c_out), fan_in=width * c_in)
        self.bias = store.create(f"{name}.bias", (c_out,), fill=0.0)

    def __call__(self, signal: Tensor) -> Tensor:
        return T.add(T.conv1d(signal, self.kernel), T.reshape(self.bias, (1, self.c_out)))


class Prenet:
    """Two linear+ReLU layers; dropout only when a training stream is supplied."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_hidden: int, rate: float):
        self.rate = rate
        self.layers = [Linear(store, f"{name}.0", d_in, d_hidden),
                       Linear(store, f"{name}.1", d_hidden, d_hidden)]

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = T.dropout(T.relu(layer(x)), self.rate, rng)
        return x
