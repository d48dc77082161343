"""Model assembly, likelihood accounting and the generalist/specialist lifecycle.

A model is: data dequantizer -> optional fixed preprocessing -> optional axis
permutation -> ``B`` blocks of (squeeze -> ``L`` x (actnorm -> 1x1 mixing ->
coupling) -> optional split prior) -> GMM head.

``log p = head + sum(logdet) + sum(split log-densities) - log q(data) - log q(context)``
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import diffcore as dc
from .bijections import (
    ActNorm,
    BoundedLogit,
    ConfigError,
    Conv1x1,
    Coupling,
    Layer,
    PermuteAxes,
    SplitPrior,
    Squeeze,
    Standardize,
)
from .diffcore import Tensor
from .encoders import ContextEncoder, ContextSpec, DataDequantizer
from .gmmhead import GmmHead
from .nn import GENERALIST, NAMESPACES, SPECIALIST, Module, Param

GENERALIST_PHASE = GENERALIST
SPECIALIST_PHASE = SPECIALIST


@dataclass
class FlowConfig:
    input_shape: tuple[int, ...] = (2,)
    blocks: int = 2
    sub_blocks: int = 2
    net: str = "dense"
    width_factor: int = 4
    hidden_channels: int = 32
    mask: str = "half"
    squeeze: bool = True
    split_prior: list[bool] = field(default_factory=list)
    permute_axes: list[int] | None = None
    conditioning: str = "additive"
    context: list[dict[str, Any]] = field(default_factory=list)
    context_hidden: int = 8
    encoder_hidden: int = 16
    classes: int = 1
    components: int = 8
    data_dequantizer: str = "none"
    data_cardinality: int = 256
    data_transform: str = "none"
    data_range: list[float] | None = None
    actnorm_data_init: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.permute_axes is not None:
            self.permute_axes = [int(p) for p in self.permute_axes]
        if isinstance(self.split_prior, bool):
            self.split_prior = [self.split_prior] * self.blocks
        self.split_prior = list(self.split_prior) + [False] * (self.blocks - len(self.split_prior))
        if self.blocks < 0 or self.sub_blocks < 1:
            raise ConfigError("blocks must be >= 0 and sub_blocks >= 1")
        if self.conditioning not in ("none", "additive", "concat"):
            raise ConfigError(f"unknown conditioning mode {self.conditioning!r}")
        if self.data_transform not in ("none", "standardize", "logit"):
            raise ConfigError(f"unknown data transform {self.data_transform!r}")

    @property
    def context_spec(self) -> ContextSpec:
        return ContextSpec.from_dict(self.context)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FlowConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


PRESETS: dict[str, dict[str, Any]] = {
    "mnist_r": dict(input_shape=(1, 28, 28), blocks=2, sub_blocks=2, net="conv", classes=10,
                    data_dequantizer="uniform", data_transform="standardize"),
    "cifar10c": dict(input_shape=(3, 32, 32), blocks=3, sub_blocks=4, net="conv", classes=10,
                     split_prior=[True, True, False], data_dequantizer="uniform",
                     data_transform="standardize"),
    "atm": dict(input_shape=(8, 38), blocks=3, sub_blocks=4, permute_axes=[1, 0], classes=2,
                split_prior=[True, True, False], data_transform="standardize"),
    "smap": dict(input_shape=(8, 25), blocks=2, sub_blocks=4, permute_axes=[1, 0], classes=1,
                 data_transform="standardize"),
}


def preset(name: str, **overrides) -> FlowConfig:
    base = dict(PRESETS[name])
    base.update(overrides)
    return FlowConfig(**base)


class ParamStore:
    """Named parameters split into generalist and specialist namespaces."""

    def __init__(self, named: dict[str, Param], buffers: dict[str, np.ndarray] | None = None,
                 specialist_buffers: tuple[str, ...] = ()):
        self.params = named
        self.buffers = buffers or {}
        self.specialist_buffers = specialist_buffers

    def namespace(self, ns: str) -> dict[str, Param]:
        return {k: p for k, p in self.params.items() if p.namespace == ns}

    def count(self, ns: str | None = None) -> int:
        items = self.params.values() if ns is None else self.namespace(ns).values()
        return int(sum(p.size for p in items))

    def trainable(self) -> dict[str, Param]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def set_frozen(self, ns: str, frozen: bool) -> None:
        for p in self.namespace(ns).values():
            p.freeze() if frozen else p.unfreeze()

    def buffer_namespace(self, name: str) -> str:
        if self.specialist_buffers and name.startswith(self.specialist_buffers):
            return SPECIALIST
        return GENERALIST

    def fingerprint(self, ns: str = GENERALIST) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.namespace(ns).items()):
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for name, b in sorted(self.buffers.items()):
            if self.buffer_namespace(name) != ns:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class LogProb:
    total: Tensor
    """(N, M) per-class joint log-likelihoods."""
    parts: dict[str, Tensor]
    latent: Tensor | None = None

    def marginal(self) -> Tensor:
        return dc.logsumexp(self.total, axis=1)


class FlowModel(Module):
    def __init__(self, config: FlowConfig):
        self.config = config
        self.phase = GENERALIST_PHASE
        root = dc.make_rng(config.seed)
        r_layers, r_head, r_enc, r_ctx, self._attach_rng = dc.split_rng(root, 5)
        self.data_encoder = DataDequantizer(
            config.data_dequantizer, config.data_cardinality, r_enc, config.encoder_hidden
        )
        shape = config.input_shape
        self.preprocess: list[Layer] = []
        if config.data_transform == "standardize":
            self.preprocess.append(Standardize(shape))
        elif config.data_transform == "logit":
            low, high = config.data_range or (0.0, float(config.data_cardinality))
            self.preprocess.append(BoundedLogit(shape, low, high))

        mode = config.conditioning
        self.context_encoder: ContextEncoder | None = None
        ctx_dim = 0
        if mode == "concat":
            self.context_encoder = ContextEncoder(
                config.context_spec, r_ctx, GENERALIST, config.encoder_hidden
            )
            ctx_dim = self.context_encoder.width
        layer_mode = "none" if mode == "none" else mode
        self.layers: list[Layer] = []
        if config.permute_axes is not None:
            self.layers.append(PermuteAxes(shape, tuple(config.permute_axes)))
            shape = self.layers[-1].out_shape(shape)
        for b in range(config.blocks):
            if config.squeeze and len(shape) >= 2:
                try:
                    sq = Squeeze(shape)
                except ConfigError as err:
                    raise ConfigError(f"block {b}: {err}") from None
                self.layers.append(sq)
                shape = sq.out_shape(shape)
            for sub in range(config.sub_blocks):
                kw = dict(mode=layer_mode, ctx_dim=ctx_dim, ctx_hidden=config.context_hidden)
                self.layers.append(ActNorm(shape, r_layers, data_init=config.actnorm_data_init, **kw))
                self.layers.append(Conv1x1(shape, r_layers, **kw))
                try:
                    self.layers.append(
                        Coupling(shape, r_layers, parity=sub, mask=config.mask, net=config.net,
                                 width_factor=config.width_factor,
                                 hidden_channels=config.hidden_channels, **kw)
                    )
                except ConfigError as err:
                    raise ConfigError(f"block {b}: {err}") from None
            if config.split_prior[b]:
                try:
                    sp = SplitPrior(shape)
                except ConfigError as err:
                    raise ConfigError(f"block {b}: {err}") from None
                self.layers.append(sp)
                shape = sp.out_shape(shape)
        for i, layer in enumerate(self.layers):
            layer.index = i
        self.latent_shape = tuple(shape)
        self.head = GmmHead(int(np.prod(shape)), config.classes, r_head, config.components)

    # ------------------------------------------------------------------
    # parameters

    @property
    def uses_context(self) -> bool:
        return self.context_encoder is not None

    def param_store(self) -> ParamStore:
        prefix = ("context_encoder.",) if self.config.conditioning == "additive" else ()
        return ParamStore(dict(self.named_params()), self.buffers(), prefix)

    def fingerprint(self) -> str:
        return self.param_store().fingerprint(GENERALIST)

    def census(self) -> dict[str, int]:
        store = self.param_store()
        return {ns: store.count(ns) for ns in NAMESPACES}

    # ------------------------------------------------------------------
    # lifecycle

    def attach_specialist(self, context_spec: ContextSpec | None = None) -> None:
        """Allocate zero-initialized specialist nets and freeze the generalist."""
        if self.phase == SPECIALIST_PHASE:
            raise RuntimeError("specialist already attached")
        if self.config.conditioning != "additive":
            raise RuntimeError(f"cannot attach a specialist in {self.config.conditioning!r} mode")
        spec = context_spec if context_spec is not None else self.config.context_spec
        if context_spec is not None:
            self.config.context = spec.to_dict()
        rng = self._attach_rng
        self.context_encoder = ContextEncoder(spec, rng, SPECIALIST, self.config.encoder_hidden)
        for layer in self.layers:
            layer.attach_specialist(self.context_encoder.width, rng, self.config.context_hidden)
        self.head.attach_specialist()
        self.param_store().set_frozen(GENERALIST, True)
        self.phase = SPECIALIST_PHASE
        self.generalist_fingerprint = self.fingerprint()

    # ------------------------------------------------------------------
    # likelihood

    def _rngs(self, rng):
        if rng is None:
            rng = dc.make_rng(0)
        return dc.split_rng(rng, 2)

    def encode_context(self, context, rng, train: bool = True):
        if self.context_encoder is None:
            return None, None
        if context is None:
            raise ValueError("this model is context-conditioned; pass a context")
        enc = self.context_encoder.encode(context, rng, train)
        return enc.v, enc.log_q

    def fit_preprocessing(self, data: np.ndarray) -> None:
        """Fit fixed transforms on (dequantized-scale) training data."""
        for pre in self.preprocess:
            if isinstance(pre, Standardize):
                pre.fit(np.asarray(data, dtype=np.float64) + (0.5 if self.config.data_dequantizer != "none" else 0.0))

    def data_init(self, x: np.ndarray, context=None, rng=None) -> None:
        """Data-dependent actnorm initialization on one batch."""
        data_rng, ctx_rng = self._rngs(rng)
        v = self.data_encoder.encode(x, data_rng).v
        for pre in self.preprocess:
            v = pre.inverse(v).output
        cond, _ = self.encode_context(context, ctx_rng)
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.init_from_batch(v.data)
            v = layer.inverse(v, cond).output

    def log_prob(self, x: np.ndarray, context=None, rng=None, train: bool = True) -> LogProb:
        data_rng, ctx_rng = self._rngs(rng)
        enc = self.data_encoder.encode(x, data_rng)
        v = enc.v
        n = v.shape[0]
        zero = Tensor(np.zeros(n))
        logdet_g, logdet_c, split = zero, zero, zero
        for pre in self.preprocess:
            r = pre.inverse(v)
            v, logdet_g = r.output, logdet_g + r.logdet
        cond, ctx_logq = self.encode_context(context, ctx_rng, train)
        for layer in self.layers:
            r = layer.inverse(v, cond)
            v = r.output
            if isinstance(layer, SplitPrior):
                split = split + r.logdet
            else:
                logdet_g = logdet_g + (r.logdet - r.logdet_c)
                logdet_c = logdet_c + r.logdet_c
        base = self.head.logpdf(v)
        minus_q_data = -enc.log_q
        minus_q_ctx = -ctx_logq if ctx_logq is not None else zero
        rest = logdet_g + logdet_c + split + minus_q_data + minus_q_ctx
        total = base + rest.reshape(n, 1)
        parts = dict(
            base_logp=dc.logsumexp(base, axis=1),
            logdet_g=logdet_g,
            logdet_c=logdet_c,
            split_logps=split,
            minus_log_q=minus_q_data + minus_q_ctx,
            minus_log_q_data=minus_q_data,
            minus_log_q_context=minus_q_ctx,
        )
        return LogProb(total, parts, v)

    # ------------------------------------------------------------------
    # latent transforms and sampling

    def to_latent(self, v: np.ndarray | Tensor, cond: Tensor | None = None):
        """Continuous ``v`` -> (latent, factored-out halves, total logdet)."""
        v = v if isinstance(v, Tensor) else Tensor(v)
        n = v.shape[0]
        logdet = Tensor(np.zeros(n))
        for pre in self.preprocess:
            r = pre.inverse(v)
            v, logdet = r.output, logdet + r.logdet
        zs = []
        for layer in self.layers:
            if isinstance(layer, SplitPrior):
                keep, z = v[:, : layer.half], v[:, layer.half :]
                zs.append(z.data)
                v = keep
                continue
            r = layer.inverse(v, cond)
            v, logdet = r.output, logdet + r.logdet
        return v, zs, logdet

    def from_latent(self, u: np.ndarray | Tensor, zs=None, cond: Tensor | None = None, rng=None):
        u = u if isinstance(u, Tensor) else Tensor(u)
        zs = list(zs) if zs is not None else None
        for layer in reversed(self.layers):
            if isinstance(layer, SplitPrior) and zs is not None:
                u = dc.concat([u, Tensor(zs.pop())], axis=1)
            else:
                u = layer.forward(u, cond, rng)
        for pre in reversed(self.preprocess):
            u = pre.forward(u)
        return u

    def sample(self, n: int, context=None, rng=None, labels: np.ndarray | None = None) -> np.ndarray:
        rng = rng if rng is not None else dc.make_rng(0)
        head_rng, layer_rng, ctx_rng = dc.split_rng(rng, 3)
        if labels is None:
            labels = head_rng.integers(0, self.head.classes, size=n)
        labels = np.asarray(labels, dtype=np.int64)
        u = self.head.sample(labels, head_rng).reshape((n,) + self.latent_shape)
        cond, _ = self.encode_context(context, ctx_rng, train=False)
        v = self.from_latent(u, None, cond, layer_rng).data
        if self.config.data_dequantizer != "none":
            v = np.clip(np.floor(v), 0, self.config.data_cardinality - 1)
        return v


def build(config: FlowConfig) -> FlowModel:
    return FlowModel(config)


def attach_specialist(model: FlowModel, context_spec: ContextSpec | None = None) -> FlowModel:
    model.attach_specialist(context_spec)
    return model
