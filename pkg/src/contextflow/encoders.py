"""Mixed-variable encoders: discrete or continuous values to continuous vectors.

Every encoder returns the encoded vector ``v`` together with ``log q(v | x)``
(zero for deterministic encoders) so that a dequantized likelihood is an
evidence lower bound, ``log P(x) >= E_q[log p(v) - log q(v | x)]``. Each
stochastic encoder also has a deterministic right inverse (``decode``) with
``decode(encode(x)) == x``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import GENERALIST, MLP, Module, Param

MAPPINGS = ("integer", "one-hot", "binary")
ENCODERS = ("uniform", "variational", "argmax", "embed-det", "embed-stoch")
LOG_2PI = math.log(2 * math.pi)
# keeps sigmoid(z) strictly inside (0, 1) and softplus(z) > 0 in float64
_Z_LIMIT = 30.0


class DecodeError(ValueError):
    pass


def n_bits(k: int) -> int:
    return max(1, math.ceil(math.log2(k)))


def to_bits(x: np.ndarray, bits: int) -> np.ndarray:
    """MSB-first binary code of non-negative integers, shape (..., bits)."""
    x = np.asarray(x, dtype=np.int64)
    shifts = np.arange(bits - 1, -1, -1)
    return ((x[..., None] >> shifts) & 1).astype(np.float64)


def from_bits(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.int64)
    weights = 1 << np.arange(b.shape[-1] - 1, -1, -1)
    return (b * weights).sum(axis=-1)


@dataclass
class VarSpec:
    """One context (or data) variable.

    Discrete values live in ``{low, ..., low + cardinality - 1}``.
    """

    name: str
    kind: str = "discrete"
    cardinality: int = 2
    low: int = 0
    mapping: str = "integer"
    encoder: str = "uniform"

    def __post_init__(self):
        if self.kind == "continuous":
            return
        if self.kind != "discrete":
            raise ValueError(f"{self.name}: kind must be 'discrete' or 'continuous'")
        if self.cardinality < 2:
            raise ValueError(f"{self.name}: cardinality must be >= 2")
        if self.mapping not in MAPPINGS:
            raise ValueError(f"{self.name}: unknown mapping {self.mapping!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"{self.name}: unknown encoder {self.encoder!r}")
        if self.encoder == "argmax" and self.mapping != "integer":
            raise ValueError(f"{self.name}: argmax encoder requires integer mapping")
        if self.encoder == "variational" and self.mapping not in ("integer", "one-hot"):
            raise ValueError(f"{self.name}: variational encoder supports integer or one-hot mapping")
        if self.encoder.startswith("embed") and self.mapping != "integer":
            raise ValueError(f"{self.name}: embeddings index integer values")

    @property
    def bits(self) -> int:
        return n_bits(self.cardinality)

    @property
    def width(self) -> int:
        if self.kind == "continuous":
            return 1
        if self.encoder == "argmax":
            return self.bits
        if self.encoder.startswith("embed"):
            return self.bits + 2
        return {"integer": 1, "one-hot": self.cardinality, "binary": self.bits}[self.mapping]


@dataclass
class ContextSpec:
    variables: list[VarSpec] = field(default_factory=list)

    @property
    def width(self) -> int:
        return sum(v.width for v in self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def to_dict(self) -> list[dict[str, Any]]:
        return [asdict(v) for v in self.variables]

    @classmethod
    def from_dict(cls, items: Sequence[Mapping[str, Any]] | None) -> ContextSpec:
        return cls([VarSpec(**dict(item)) for item in (items or [])])

    def validate(self, records: Mapping[str, np.ndarray]) -> int:
        """Check fields and ranges; return the batch size."""
        n = None
        for var in self.variables:
            if var.name not in records:
                raise KeyError(f"context field {var.name!r} is missing")
            vals = np.asarray(records[var.name])
            if n is None:
                n = len(vals)
            elif len(vals) != n:
                raise ValueError(f"context field {var.name!r} has {len(vals)} rows, expected {n}")
            if var.kind == "discrete":
                if not np.all(vals == np.round(vals)):
                    raise ValueError(f"context field {var.name!r} has non-integer values")
                if np.any(vals < var.low) or np.any(vals >= var.low + var.cardinality):
                    raise ValueError(
                        f"context field {var.name!r} outside "
                        f"[{var.low}, {var.low + var.cardinality})"
                    )
        return n or 0


@dataclass
class EncodedContext:
    v: Tensor
    log_q: Tensor


def as_records(records) -> dict[str, np.ndarray]:
    """Columnar ``{name: array}`` from either columns or a list of row dicts."""
    if isinstance(records, Mapping):
        return {k: np.asarray(v) for k, v in records.items()}
    rows = list(records)
    keys = rows[0].keys() if rows else []
    return {k: np.asarray([r[k] for r in rows]) for k in keys}


def standard_normal_logpdf(z: Tensor) -> Tensor:
    return (-0.5 * (z * z) - 0.5 * LOG_2PI).sum(axis=1)


# --------------------------------------------------------------------------
# uniform


def uniform_dequantize(x: np.ndarray, rng: np.random.Generator, cardinality: int | None = None,
                       low: int = 0, name: str = "x") -> EncodedContext:
    """``v = x + U[0, 1)``; ``floor(v) == x`` and ``log q = 0``."""
    x = np.asarray(x, dtype=np.float64)
    if cardinality is not None and (np.any(x < low) or np.any(x >= low + cardinality)):
        raise ValueError(f"{name}: category outside [{low}, {low + cardinality})")
    v = x + rng.random(x.shape)
    return EncodedContext(Tensor(v), Tensor(np.zeros(x.shape[0])))


class UniformEncoder(Module):
    def __init__(self, spec: VarSpec):
        self.spec = spec

    def target(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        if s.mapping == "integer":
            return x[:, None].astype(np.float64)
        k = x.astype(np.int64) - s.low
        if s.mapping == "one-hot":
            return np.eye(s.cardinality)[k]
        return to_bits(k, s.bits)

    def encode(self, x, rng, train=True) -> EncodedContext:
        return uniform_dequantize(self.target(np.asarray(x)), rng)

    def decode(self, v: np.ndarray) -> np.ndarray:
        s = self.spec
        if s.mapping == "integer":
            return np.floor(v[:, 0]).astype(np.int64)
        if s.mapping == "one-hot":
            return np.argmax(v, axis=1) + s.low
        k = from_bits(np.floor(v))
        if np.any(k >= s.cardinality):
            raise DecodeError(f"{s.name}: bit pattern outside the {s.cardinality} categories")
        return k + s.low


# --------------------------------------------------------------------------
# conditional flow shared by the variational and argmax encoders


class ConditionalNoiseFlow(Module):
    """Gaussian noise pushed through category-conditioned affine couplings.

    Two sub-layers; each computes ``[s, t] = NN(z_b) + E[x]`` with a learned
    per-category table ``E`` (additive biasing on ``x``). All output layers
    start at zero, so the untrained flow returns its base noise.
    """

    def __init__(self, dim: int, cardinality: int, rng, hidden: int = 16,
                 namespace: str = GENERALIST, n_layers: int = 2):
        self.dim = dim
        self.splits = []
        self.nets = []
        self.tables = []
        idx = np.arange(dim)
        for j in range(n_layers):
            n_a = (dim + 1) // 2
            a = idx[:n_a] if j % 2 == 0 else idx[dim - n_a :]
            b = np.setdiff1d(idx, a)
            self.splits.append((a, b, np.argsort(np.concatenate([a, b]))))
            self.nets.append(MLP([len(b), hidden, 2 * len(a)], rng, namespace=namespace))
            self.tables.append(Param(np.zeros((cardinality, 2 * len(a))), namespace))

    def sample(self, k: np.ndarray, rng) -> tuple[Tensor, Tensor]:
        """Return transformed noise ``z`` and its log-density, per sample."""
        n = len(k)
        z = Tensor(rng.standard_normal((n, self.dim)))
        logq = standard_normal_logpdf(z)
        for (a, b, order), net, table in zip(self.splits, self.nets, self.tables):
            z_a, z_b = dc.take(z, a, axis=1), dc.take(z, b, axis=1)
            raw = net(z_b) + dc.take(table, k, axis=0)
            na = len(a)
            s = dc.clamp(raw[:, :na], -8.0, 8.0)
            z_a = z_a * dc.exp(s) + raw[:, na:]
            logq = logq - s.sum(axis=1)
            z = dc.take(dc.concat([z_a, z_b], axis=1), order, axis=1)
        return z, logq


class VariationalEncoder(Module):
    """Rounding dequantizer: ``v = target(x) + sigmoid(z)`` with learned ``z | x``."""

    def __init__(self, spec: VarSpec, rng, hidden: int = 16, namespace: str = GENERALIST):
        self.spec = spec
        dim = 1 if spec.mapping == "integer" else spec.cardinality
        self.flow = ConditionalNoiseFlow(dim, spec.cardinality, rng, hidden, namespace)

    def target(self, x):
        s = self.spec
        if s.mapping == "integer":
            return x[:, None].astype(np.float64)
        return np.eye(s.cardinality)[x.astype(np.int64) - s.low]

    def encode(self, x, rng, train=True) -> EncodedContext:
        x = np.asarray(x)
        k = x.astype(np.int64) - self.spec.low
        z, logq = self.flow.sample(k, rng)
        z = dc.clamp(z, -_Z_LIMIT, _Z_LIMIT)
        eps = dc.sigmoid(z)
        if np.any(eps.data <= 0.0) or np.any(eps.data >= 1.0):
            raise RuntimeError(f"{self.spec.name}: dequantization noise left (0, 1); internal bug")
        logq = logq - (dc.log_sigmoid(z) + dc.log_sigmoid(-z)).sum(axis=1)
        return EncodedContext(eps + self.target(x), logq)

    def decode(self, v):
        s = self.spec
        if s.mapping == "integer":
            return np.floor(v[:, 0]).astype(np.int64)
        return np.argmax(v, axis=1) + s.low


def variational_dequantize(x, encoder: VariationalEncoder, rng) -> EncodedContext:
    return encoder.encode(x, rng)


class ArgmaxEncoder(Module):
    """Binary-compressed argmax encoder, ``ceil(log2 K)`` dims per variable.

    The code of ``x - low`` is read MSB-first; ``v_j > 0`` iff bit ``j`` is
    set, with magnitude ``softplus(z_j)`` of learned noise ``z | x``.
    """

    def __init__(self, spec: VarSpec, rng, hidden: int = 16, namespace: str = GENERALIST):
        self.spec = spec
        self.flow = ConditionalNoiseFlow(spec.bits, spec.cardinality, rng, hidden, namespace)

    def encode(self, x, rng, train=True) -> EncodedContext:
        k = np.asarray(x).astype(np.int64) - self.spec.low
        sign = 2.0 * to_bits(k, self.spec.bits) - 1.0
        z, logq = self.flow.sample(k, rng)
        z = dc.clamp(z, -_Z_LIMIT, np.inf)
        mag = dc.softplus(z)
        logq = logq - dc.log_sigmoid(z).sum(axis=1)
        return EncodedContext(mag * sign, logq)

    def decode(self, v):
        return argmax_decode(v, self.spec.cardinality) + self.spec.low


def argmax_decode(v: np.ndarray, cardinality: int) -> np.ndarray:
    k = from_bits(np.asarray(v) > 0)
    if np.any(k >= cardinality):
        raise DecodeError(f"sign pattern decodes outside the {cardinality} categories")
    return k


class EmbeddingEncoder(Module):
    """Learned lookup table; the stochastic variant samples ``N(mu[x], sigma[x]^2)``
    in train mode and returns ``mu[x]`` in eval mode."""

    def __init__(self, spec: VarSpec, rng, stochastic: bool = False, namespace: str = GENERALIST):
        self.spec = spec
        self.stochastic = stochastic
        e = spec.width
        self.table = Param(rng.standard_normal((spec.cardinality, e)), namespace, decay=True)
        if stochastic:
            self.log_sigma = Param(np.full((spec.cardinality, e), -1.0), namespace)

    def encode(self, x, rng, train=True) -> EncodedContext:
        k = np.asarray(x).astype(np.int64) - self.spec.low
        if np.any(k < 0) or np.any(k >= self.spec.cardinality):
            raise IndexError(f"{self.spec.name}: index outside the embedding table")
        mu = dc.take(self.table, k, axis=0)
        n = len(k)
        if not (self.stochastic and train):
            return EncodedContext(mu, Tensor(np.zeros(n)))
        ls = dc.clamp(dc.take(self.log_sigma, k, axis=0), -20.0, 0.0)
        eps = rng.standard_normal(mu.shape)
        v = mu + dc.exp(ls) * eps
        logq = (-0.5 * eps * eps - ls - 0.5 * LOG_2PI).sum(axis=1)
        return EncodedContext(v, logq)

    def decode(self, v):
        d = ((v[:, None, :] - self.table.data[None]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1) + self.spec.low


def embed_lookup(x, encoder: EmbeddingEncoder, train: bool, rng) -> EncodedContext:
    return encoder.encode(x, rng, train=train)


class ContinuousEncoder(Module):
    """Affine standardization with training-split statistics; ``log q = 0``."""

    _buffer_names = ("mean", "std")

    def __init__(self, spec: VarSpec):
        self.spec = spec
        self.mean = 0.0
        self.std = 1.0

    def fit(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.mean = float(x.mean())
        sd = float(x.std())
        self.std = sd if sd > 1e-12 else 1.0

    def encode(self, x, rng, train=True) -> EncodedContext:
        x = np.asarray(x, dtype=np.float64)
        return EncodedContext(Tensor(((x - self.mean) / self.std)[:, None]), Tensor(np.zeros(len(x))))

    def decode(self, v):
        return v[:, 0] * self.std + self.mean


def make_encoder(spec: VarSpec, rng, namespace: str = GENERALIST, hidden: int = 16) -> Module:
    if spec.kind == "continuous":
        return ContinuousEncoder(spec)
    if spec.encoder == "uniform":
        return UniformEncoder(spec)
    if spec.encoder == "variational":
        return VariationalEncoder(spec, rng, hidden, namespace)
    if spec.encoder == "argmax":
        return ArgmaxEncoder(spec, rng, hidden, namespace)
    return EmbeddingEncoder(spec, rng, spec.encoder == "embed-stoch", namespace)


class ContextEncoder(Module):
    """Per-variable encoders whose outputs are concatenated (log q summed)."""

    def __init__(self, spec: ContextSpec, rng, namespace: str = GENERALIST, hidden: int = 16):
        self.spec = spec
        self.encoders = [make_encoder(v, rng, namespace, hidden) for v in spec.variables]

    @property
    def width(self) -> int:
        return self.spec.width

    def fit(self, records) -> None:
        records = as_records(records)
        for var, enc in zip(self.spec.variables, self.encoders):
            if isinstance(enc, ContinuousEncoder):
                enc.fit(records[var.name])

    def encode(self, records, rng, train: bool = True) -> EncodedContext:
        records = as_records(records)
        n = self.spec.validate(records)
        if not self.encoders:
            return EncodedContext(Tensor(np.zeros((n, 0))), Tensor(np.zeros(n)))
        parts = [enc.encode(records[var.name], rng, train) for var, enc in
                 zip(self.spec.variables, self.encoders)]
        v = parts[0].v if len(parts) == 1 else dc.concat([p.v for p in parts], axis=1)
        log_q = parts[0].log_q
        for p in parts[1:]:
            log_q = log_q + p.log_q
        return EncodedContext(v, log_q)

    def decode(self, v: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        col = 0
        for var, enc in zip(self.spec.variables, self.encoders):
            out[var.name] = enc.decode(v[:, col : col + var.width])
            col += var.width
        return out


def encode_record(records, encoder: ContextEncoder, rng, train: bool = True) -> EncodedContext:
    return encoder.encode(records, rng, train)


class DataDequantizer(Module):
    """Dequantizer for integer-valued data tensors of any per-sample shape.

    ``uniform`` adds ``U[0, 1)`` noise; ``variational`` applies one shared
    rounding dequantizer to every element; ``none`` passes continuous data.
    """

    def __init__(self, kind: str, cardinality: int, rng, hidden: int = 16):
        if kind not in ("uniform", "variational", "none"):
            raise ValueError(f"unknown data dequantizer {kind!r}")
        self.kind = kind
        self.cardinality = cardinality
        if kind == "variational":
            spec = VarSpec("data", cardinality=cardinality, mapping="integer", encoder="variational")
            self.enc = VariationalEncoder(spec, rng, hidden)

    def encode(self, x: np.ndarray, rng) -> EncodedContext:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if self.kind == "none":
            return EncodedContext(Tensor(x), Tensor(np.zeros(n)))
        if self.kind == "uniform":
            return EncodedContext(Tensor(x + rng.random(x.shape)), Tensor(np.zeros(n)))
        flat = x.reshape(-1)
        if np.any(flat < 0) or np.any(flat >= self.cardinality) or np.any(flat != np.round(flat)):
            raise ValueError(f"data values must be integers in [0, {self.cardinality})")
        enc = self.enc.encode(flat, rng)
        log_q = enc.log_q.reshape(n, -1).sum(axis=1)
        return EncodedContext(enc.v.reshape(x.shape), log_q)

    def decode(self, v: np.ndarray) -> np.ndarray:
        return v if self.kind == "none" else np.floor(v)
