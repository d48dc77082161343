"""Parameters, modules and the small networks used inside layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

GENERALIST = "generalist"
SPECIALIST = "specialist"
NAMESPACES = (GENERALIST, SPECIALIST)


class Param(Tensor):
    """Trainable leaf tagged with a namespace and a weight-decay flag."""

    __slots__ = ("namespace", "decay")

    def __init__(self, data, namespace: str = GENERALIST, decay: bool = False):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        if namespace not in NAMESPACES:
            raise ValueError(f"unknown namespace {namespace!r}")
        self.namespace = namespace
        self.decay = decay

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.requires_grad = True


class Module:
    """Attribute-walking container: Params, Modules and lists of Modules."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Non-trainable arrays that must survive a checkpoint round trip."""
        out: dict[str, np.ndarray] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                out.update(val.buffers(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.buffers(f"{name}.{i}."))
        for key in getattr(self, "_buffer_names", ()):
            out[f"{prefix}{key}"] = np.asarray(getattr(self, key), dtype=np.float64)
        return out

    def load_buffers(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                val.load_buffers(values, name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item.load_buffers(values, f"{name}.{i}.")
        for key in getattr(self, "_buffer_names", ()):
            full = f"{prefix}{key}"
            if full in values:
                cur = getattr(self, key)
                arr = np.asarray(values[full], dtype=np.float64)
                setattr(self, key, arr.reshape(np.shape(cur)) if np.ndim(cur) else float(arr.reshape(-1)[0]))


class Dense(Module):
    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        zero: bool = False,
        namespace: str = GENERALIST,
    ):
        scale = 0.0 if zero else 1.0 / np.sqrt(max(n_in, 1))
        self.w = Param(rng.standard_normal((n_in, n_out)) * scale, namespace, decay=True)
        self.b = Param(np.zeros(n_out), namespace, decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP(Module):
    """Dense stack with tanh between layers; the last layer can start at zero."""

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        zero_last: bool = True,
        namespace: str = GENERALIST,
    ):
        self.layers = [
            Dense(a, b, rng, zero=zero_last and i == len(sizes) - 2, namespace=namespace)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    @property
    def n_in(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dc.tanh(x)
        return x


class Conv(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        zero: bool = False,
        namespace: str = GENERALIST,
    ):
        scale = 0.0 if zero else 1.0 / np.sqrt(max(c_in * k * k, 1))
        self.w = Param(rng.standard_normal((c_out, c_in, k, k)) * scale, namespace, decay=True)
        self.b = Param(np.zeros(c_out), namespace, decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.w, self.b)


class ConvNet(Module):
    """3x3 conv, tanh, 1x1 conv, tanh, 3x3 conv (zero-initialized)."""

    def __init__(
        self,
        c_in: int,
        hidden: int,
        c_out: int,
        rng: np.random.Generator,
        namespace: str = GENERALIST,
    ):
        self.c_in = c_in
        self.convs = [
            Conv(c_in, hidden, 3, rng, namespace=namespace),
            Conv(hidden, hidden, 1, rng, namespace=namespace),
            Conv(hidden, c_out, 3, rng, zero=True, namespace=namespace),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        x = dc.tanh(self.convs[0](x))
        x = dc.tanh(self.convs[1](x))
        return self.convs[2](x)


def orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random orthogonal matrix from the QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
