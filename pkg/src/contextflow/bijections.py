"""Conditional bijective layers and structural reshuffles.

Direction convention (single source of truth for the package):

* ``inverse(v, cond)`` maps data-side ``v`` to latent-side ``u`` and returns the
  per-sample ``log|det du/dv|``. Summed over layers it is *added* to the base
  log-density, ``log p(v) = log p(u) + sum(logdet)``.
* ``forward(u, cond)`` maps back, ``u -> v``; no log-det is returned.

Tensors are batch-first. Per-sample shapes are ``(D,)`` for vectors,
``(C, T)`` for sequences and ``(C, H, W)`` for images; axis 1 is the channel
axis and every trailing axis is a "position" over which per-channel
parameters (and the context) are broadcast.

Conditioning modes:

* ``"none"``: unconditional layer.
* ``"additive"``: generalist parameters plus a specialist context net (CN)
  whose output is *added* (coupling pre-activations, actnorm ``(log_s, t)``,
  mixing matrix ``W``). The CN exists only after :meth:`attach_specialist`
  and starts at exactly zero.
* ``"concat"``: the baseline. Couplings feed ``[v_b, CN(c)]`` to the net;
  actnorm and mixing take their parameters from ``CN(c)`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import GENERALIST, MLP, SPECIALIST, ConvNet, Module, Param, orthogonal

SCALE_CLAMP = 8.0
MODES = ("none", "additive", "concat")
MASKS = ("half", "alternate", "checkerboard")


class ConfigError(ValueError):
    pass


@dataclass
class LayerResult:
    output: Tensor
    logdet: Tensor
    logdet_c: Tensor | float = 0.0
    """Part of ``logdet`` attributable to the specialist terms."""


def _positions(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:])) if len(shape) > 1 else 1


def _bcast(x: Tensor, ndim: int) -> Tensor:
    """(N, C) -> (N, C, 1, ...) so per-channel values broadcast over positions."""
    extra = ndim - x.ndim
    return x.reshape(x.shape + (1,) * extra) if extra > 0 else x


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n))


class Layer(Module):
    mode = "none"
    index = -1

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    @property
    def has_context(self) -> bool:
        return getattr(self, "cn", None) is not None

    def attach_specialist(self, ctx_dim: int, rng: np.random.Generator, hidden: int = 32) -> None:
        pass

    def inverse(self, v: Tensor, cond: Tensor | None = None) -> LayerResult:
        raise NotImplementedError

    def forward(self, u: Tensor, cond: Tensor | None = None, rng=None) -> Tensor:
        raise NotImplementedError

    def _context(self, cond: Tensor | None) -> Tensor | None:
        if self.cn is None:
            return None
        if cond is None:
            raise ConfigError(f"layer {self.index} is context-conditioned but no context was given")
        return self.cn(cond)


def _context_net(ctx_dim, hidden, n_out, rng, namespace, zero_last=True):
    return MLP([ctx_dim, hidden, n_out], rng, zero_last=zero_last, namespace=namespace)


# --------------------------------------------------------------------------
# coupling


class Coupling(Layer):
    """Affine coupling ``u_a = exp(s_hat) * v_a + t`` with ``v_b`` passed through.

    ``[s_hat, t] = NN(v_b) + CN(c)`` in additive mode and
    ``NN([v_b, CN(c)])`` in concat mode; ``s_hat`` is clamped to
    ``[-8, 8]`` before exponentiation.
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        rng: np.random.Generator,
        parity: int = 0,
        mask: str = "half",
        net: str = "dense",
        width_factor: int = 4,
        hidden_channels: int = 32,
        mode: str = "none",
        ctx_dim: int = 0,
        ctx_hidden: int = 32,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {mode!r}")
        if mask not in MASKS:
            raise ConfigError(f"unknown mask {mask!r}")
        self.shape = tuple(shape)
        self.mode = mode
        self.mask_kind = mask
        self.net_kind = net
        self.width_factor = width_factor
        self.ctx_hidden = ctx_hidden
        c = self.shape[0]
        self.positions = _positions(self.shape)
        if mask == "checkerboard":
            if len(self.shape) != 3 or net != "conv":
                raise ConfigError("checkerboard masks need image inputs and a conv net")
            h, w = self.shape[1:]
            board = (np.add.outer(np.arange(h), np.arange(w)) + parity) % 2
            self.board = board.astype(np.float64)
            self.idx_a = self.idx_b = None
            n_a = n_b = c
        else:
            self.idx_a, self.idx_b = _feature_split(c, mask, parity)
            n_a, n_b = len(self.idx_a), len(self.idx_b)
            self.order = np.argsort(np.concatenate([self.idx_a, self.idx_b]))
        self.n_a = n_a
        # CN output is per channel; broadcast over positions.
        self.cn_width = 2 * n_a
        self.cn = None
        extra = 0
        if mode == "concat":
            self.cn = _context_net(ctx_dim, ctx_hidden, self.cn_width, rng, GENERALIST, zero_last=False)
            extra = self.cn_width
        if net == "dense":
            n_in = n_b * self.positions + extra
            hidden = width_factor * max(n_b * self.positions, 1)
            self.nn = MLP([n_in, hidden, hidden, 2 * n_a * self.positions], rng)
        elif net == "conv":
            if len(self.shape) != 3:
                raise ConfigError("conv coupling nets need (C, H, W) inputs")
            self.nn = ConvNet(n_b + extra, hidden_channels, 2 * n_a, rng)
        else:
            raise ConfigError(f"unknown coupling net {net!r}")

    @property
    def nn_in_width(self) -> int:
        return self.nn.n_in if isinstance(self.nn, MLP) else self.nn.c_in

    def attach_specialist(self, ctx_dim, rng, hidden=32):
        if self.mode != "additive":
            return
        if self.cn is not None:
            raise ConfigError(f"layer {self.index} already has a specialist")
        self.cn = _context_net(ctx_dim, hidden, self.cn_width, rng, SPECIALIST)

    # split/merge
    def _split(self, x: Tensor):
        if self.idx_a is None:
            m = self.board
            return x, x * (1.0 - m)
        return dc.take(x, self.idx_a, axis=1), dc.take(x, self.idx_b, axis=1)

    def _merge(self, new_a: Tensor, x: Tensor, x_b: Tensor) -> Tensor:
        if self.idx_a is None:
            return new_a
        return dc.take(dc.concat([new_a, x_b], axis=1), self.order, axis=1)

    def _params(self, x_b: Tensor, cond: Tensor | None):
        n = x_b.shape[0]
        c_out = self._context(cond)
        if self.mode == "concat":
            if self.net_kind == "dense":
                inp = dc.concat([x_b.reshape(n, -1), c_out], axis=1)
            else:
                tiled = _bcast(c_out, 4) * Tensor(np.ones((1, 1) + self.shape[1:]))
                inp = dc.concat([x_b, tiled], axis=1)
        else:
            inp = x_b.reshape(n, -1) if self.net_kind == "dense" else x_b
        raw = self.nn(inp)
        if not np.all(np.isfinite(raw.data)):
            raise FloatingPointError(f"non-finite coupling net output in layer {self.index}")
        spatial = self.shape[1:]
        raw = raw.reshape((n, 2 * self.n_a) + spatial)
        s_nn, t_nn = raw[:, : self.n_a], raw[:, self.n_a :]
        s_hat, t = s_nn, t_nn
        if self.mode == "additive" and c_out is not None:
            cs, ct = c_out[:, : self.n_a], c_out[:, self.n_a :]
            s_hat = s_nn + _bcast(cs, raw.ndim)
            t = t_nn + _bcast(ct, raw.ndim)
        s_hat_c = dc.clamp(s_hat, -SCALE_CLAMP, SCALE_CLAMP)
        if self.idx_a is None:
            s_hat_c = s_hat_c * self.board
            t = t * self.board
        return s_nn, s_hat_c, t, c_out

    def _logdets(self, s_nn, s_hat_c, c_out):
        n = s_hat_c.shape[0]
        logdet = s_hat_c.reshape(n, -1).sum(axis=1)
        if self.mode == "additive" and c_out is not None:
            base = dc.clamp(s_nn, -SCALE_CLAMP, SCALE_CLAMP)
            if self.idx_a is None:
                base = base * self.board
            return logdet, logdet - base.reshape(n, -1).sum(axis=1)
        return logdet, 0.0

    def inverse(self, v, cond=None):
        v_a, v_b = self._split(v)
        s_nn, s_hat, t, c_out = self._params(v_b, cond)
        u_a = dc.exp(s_hat) * v_a + t
        logdet, logdet_c = self._logdets(s_nn, s_hat, c_out)
        return LayerResult(self._merge(u_a, v, v_b), logdet, logdet_c)

    def forward(self, u, cond=None, rng=None):
        u_a, u_b = self._split(u)
        _, s_hat, t, _ = self._params(u_b, cond)
        v_a = (u_a - t) * dc.exp(-s_hat)
        return self._merge(v_a, u, u_b)


def _feature_split(c: int, mask: str, parity: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(c)
    if mask == "half":
        n_a = (c + 1) // 2
        if parity % 2 == 0:
            a, b = idx[:n_a], idx[n_a:]
        else:
            a, b = idx[c - n_a :], idx[: c - n_a]
    else:
        even, odd = idx[0::2], idx[1::2]
        a, b = (even, odd) if parity % 2 == 0 or len(odd) == 0 else (odd, even)
    return a, b


# --------------------------------------------------------------------------
# actnorm


class ActNorm(Layer):
    """Per-channel affine map ``u = exp(log_s) * v + t`` at every position."""

    _buffer_names = ("initialized",)

    def __init__(
        self,
        shape: tuple[int, ...],
        rng: np.random.Generator,
        mode: str = "none",
        ctx_dim: int = 0,
        ctx_hidden: int = 32,
        data_init: bool = True,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {mode!r}")
        self.shape = tuple(shape)
        self.mode = mode
        self.channels = self.shape[0]
        self.positions = _positions(self.shape)
        self.cn = None
        c = self.channels
        if mode == "concat":
            self.cn = _context_net(ctx_dim, ctx_hidden, 2 * c, rng, GENERALIST)
        else:
            self.log_s = Param(np.zeros(c))
            self.t = Param(np.zeros(c))
        self.initialized = 0.0 if data_init else 1.0

    def attach_specialist(self, ctx_dim, rng, hidden=32):
        if self.mode != "additive":
            return
        if self.cn is not None:
            raise ConfigError(f"layer {self.index} already has a specialist")
        self.cn = _context_net(ctx_dim, hidden, 2 * self.channels, rng, SPECIALIST)

    def init_from_batch(self, v: np.ndarray) -> None:
        """Set base parameters so the batch leaves with zero mean, unit std per channel."""
        v = np.asarray(v, dtype=np.float64)
        axes = (0,) + tuple(range(2, v.ndim))
        mu = v.mean(axis=axes)
        sd = v.std(axis=axes)
        sd = np.where(sd > 1e-12, sd, 1.0)
        log_s = -np.log(sd)
        t = -mu / sd
        if self.mode == "concat":
            last = self.cn.layers[-1]
            last.b.data[...] = np.concatenate([log_s, t])
        else:
            self.log_s.data[...] = log_s
            self.t.data[...] = t
        self.initialized = 1.0

    def _effective(self, cond, ndim):
        c = self.channels
        if self.mode == "concat":
            out = self._context(cond)
            return _bcast(out[:, :c], ndim), _bcast(out[:, c:], ndim), None
        if not self.initialized:
            raise RuntimeError(
                f"actnorm layer {self.index} is uninitialized; run a data-dependent init pass first"
            )
        extra = (1,) * (ndim - 2)
        log_s = self.log_s.reshape((1, c) + extra)
        t = self.t.reshape((1, c) + extra)
        out = self._context(cond)
        if out is None:
            return log_s, t, None
        cs = _bcast(out[:, :c], ndim)
        return log_s + cs, t + _bcast(out[:, c:], ndim), cs

    def inverse(self, v, cond=None):
        n = v.shape[0]
        log_s, t, cs = self._effective(cond, v.ndim)
        u = dc.exp(log_s) * v + t
        per = log_s.reshape(log_s.shape[0], -1).sum(axis=1) * float(self.positions)
        logdet = per if per.shape[0] == n else per * Tensor(np.ones(n))
        logdet_c = 0.0
        if cs is not None:
            logdet_c = cs.reshape(n, -1).sum(axis=1) * float(self.positions)
        return LayerResult(u, logdet, logdet_c)

    def forward(self, u, cond=None, rng=None):
        log_s, t, _ = self._effective(cond, u.ndim)
        return (u - t) * dc.exp(-log_s)


# --------------------------------------------------------------------------
# invertible 1x1 convolution / dense mixing


class Conv1x1(Layer):
    """Channel mixing ``u = W v`` at every position.

    Additive mode uses ``W = W_g + reshape(CN(c), (C, C))`` per sample; concat
    mode uses ``W = reshape(CN(c), (C, C))`` whose output bias starts at a
    random orthogonal matrix.
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        rng: np.random.Generator,
        mode: str = "none",
        ctx_dim: int = 0,
        ctx_hidden: int = 32,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {mode!r}")
        self.shape = tuple(shape)
        self.mode = mode
        self.channels = c = self.shape[0]
        self.positions = _positions(self.shape)
        self.cn = None
        w0 = orthogonal(c, rng)
        if mode == "concat":
            self.cn = _context_net(ctx_dim, ctx_hidden, c * c, rng, GENERALIST)
            self.cn.layers[-1].b.data[...] = w0.reshape(-1)
        else:
            self.w = Param(w0)

    def attach_specialist(self, ctx_dim, rng, hidden=32):
        if self.mode != "additive":
            return
        if self.cn is not None:
            raise ConfigError(f"layer {self.index} already has a specialist")
        self.cn = _context_net(ctx_dim, hidden, self.channels**2, rng, SPECIALIST)

    def weight(self, cond=None) -> tuple[Tensor, Tensor | None]:
        """Effective mixing matrix, (C, C) or per-sample (N, C, C)."""
        c = self.channels
        out = self._context(cond)
        if self.mode == "concat":
            return out.reshape(-1, c, c), None
        if out is None:
            return self.w, None
        return self.w + out.reshape(-1, c, c), self.w

    def inverse(self, v, cond=None):
        n = v.shape[0]
        w, w_g = self.weight(cond)
        x = v.reshape(n, self.channels, -1)
        u = (w @ x).reshape(v.shape)
        lad = dc.logabsdet(w) * float(self.positions)
        logdet = lad if lad.ndim == 1 else lad * Tensor(np.ones(n))
        logdet_c = 0.0
        if w_g is not None:
            logdet_c = logdet - dc.logabsdet(w_g) * float(self.positions)
        return LayerResult(u, logdet, logdet_c)

    def forward(self, u, cond=None, rng=None):
        n = u.shape[0]
        w, _ = self.weight(cond)
        x = dc.solve(w, u.reshape(n, self.channels, -1))
        return x.reshape(u.shape)


# --------------------------------------------------------------------------
# structural layers


class Squeeze(Layer):
    """Space/time-to-channel shuffle.

    ``(C, H, W) -> (4C, H/2, W/2)`` with output channel ``4c + 2(h % 2) + (w % 2)``;
    ``(C, T) -> (2C, T/2)`` with output channel ``2c + (t % 2)``.
    """

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        if len(self.shape) not in (2, 3):
            raise ConfigError(f"squeeze needs (C, T) or (C, H, W), got {self.shape}")
        if any(s % 2 for s in self.shape[1:]):
            raise ConfigError(f"squeeze needs even extents, got {self.shape}")

    def out_shape(self, shape):
        if len(shape) == 3:
            c, h, w = shape
            return (4 * c, h // 2, w // 2)
        c, t = shape
        return (2 * c, t // 2)

    def inverse(self, v, cond=None):
        n = v.shape[0]
        if v.ndim == 4:
            _, c, h, w = v.shape
            out = v.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
            out = out.reshape(n, 4 * c, h // 2, w // 2)
        else:
            _, c, t = v.shape
            out = v.reshape(n, c, t // 2, 2).transpose(0, 1, 3, 2).reshape(n, 2 * c, t // 2)
        return LayerResult(out, _zeros(n))

    def forward(self, u, cond=None, rng=None):
        n = u.shape[0]
        if u.ndim == 4:
            _, c4, h2, w2 = u.shape
            c = c4 // 4
            out = u.reshape(n, c, 2, 2, h2, w2).transpose(0, 1, 4, 2, 5, 3)
            return out.reshape(n, c, 2 * h2, 2 * w2)
        _, c2, t2 = u.shape
        c = c2 // 2
        return u.reshape(n, c, 2, t2).transpose(0, 1, 3, 2).reshape(n, c, 2 * t2)


class PermuteAxes(Layer):
    """Fixed transposition of the per-sample axes."""

    def __init__(self, shape: tuple[int, ...], perm: tuple[int, ...]):
        self.shape = tuple(shape)
        self.perm = tuple(perm)
        if sorted(self.perm) != list(range(len(self.shape))):
            raise ConfigError(f"permutation {self.perm} does not match rank {len(self.shape)}")
        self.inv = tuple(int(i) for i in np.argsort(self.perm))

    def out_shape(self, shape):
        return tuple(shape[i] for i in self.perm)

    def _check(self, x):
        if x.ndim != len(self.perm) + 1:
            raise ConfigError(f"permute_axes expected rank {len(self.perm)}, got {x.ndim - 1}")

    def inverse(self, v, cond=None):
        self._check(v)
        out = v.transpose((0,) + tuple(p + 1 for p in self.perm))
        return LayerResult(out, _zeros(v.shape[0]))

    def forward(self, u, cond=None, rng=None):
        self._check(u)
        return u.transpose((0,) + tuple(p + 1 for p in self.inv))


class SplitPrior(Layer):
    """Factor out the second half of the channels under a diagonal Gaussian.

    ``inverse`` returns the first half and carries the Gaussian log-density of
    the second half in the result's ``logdet`` slot; the model books it as a
    split log-density, not as a Jacobian term. Mean and log-variance are
    learnable per channel.
    """

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        c = self.shape[0]
        if c % 2:
            raise ConfigError(f"split prior needs an even channel count, got {c}")
        self.half = c // 2
        self.mean = Param(np.zeros(self.half))
        self.logvar = Param(np.zeros(self.half))

    def out_shape(self, shape):
        return (shape[0] // 2,) + tuple(shape[1:])

    def _stats(self, ndim):
        extra = (1,) * (ndim - 2)
        return self.mean.reshape((1, self.half) + extra), self.logvar.reshape((1, self.half) + extra)

    def log_density(self, z: Tensor) -> Tensor:
        n = z.shape[0]
        mu, lv = self._stats(z.ndim)
        d = z - mu
        lp = -0.5 * (d * d * dc.exp(-lv) + lv + np.log(2 * np.pi))
        return lp.reshape(n, -1).sum(axis=1)

    def split(self, v: Tensor) -> tuple[Tensor, Tensor]:
        keep, z = v[:, : self.half], v[:, self.half :]
        return keep, self.log_density(z)

    def inverse(self, v, cond=None):
        keep, logp = self.split(v)
        return LayerResult(keep, logp)

    def forward(self, u, cond=None, rng=None):
        if rng is None:
            raise ValueError("split prior sampling needs an rng")
        mu, lv = self._stats(u.ndim)
        eps = rng.standard_normal(u.shape)
        z = mu.data + np.exp(0.5 * lv.data) * eps
        return dc.concat([u, Tensor(z)], axis=1)


class Standardize(Layer):
    """Fixed affine ``(v - shift) / scale`` fitted on the training split."""

    _buffer_names = ("shift", "scale")

    def __init__(self, shape: tuple[int, ...], shift: float = 0.0, scale: float = 1.0):
        self.shape = tuple(shape)
        self.shift = float(shift)
        self.scale = float(scale)

    def fit(self, data: np.ndarray) -> None:
        self.shift = float(np.mean(data))
        sd = float(np.std(data))
        self.scale = sd if sd > 1e-12 else 1.0

    def inverse(self, v, cond=None):
        n = v.shape[0]
        d = int(np.prod(v.shape[1:]))
        u = (v - self.shift) * (1.0 / self.scale)
        return LayerResult(u, Tensor(np.full(n, -d * np.log(self.scale))))

    def forward(self, u, cond=None, rng=None):
        return u * self.scale + self.shift


class BoundedLogit(Layer):
    """``u = logit((v - low) / (high - low))`` for data supported on ``(low, high)``."""

    _buffer_names = ("low", "high")

    def __init__(self, shape: tuple[int, ...], low: float, high: float):
        if not high > low:
            raise ConfigError("bounded logit needs high > low")
        self.shape = tuple(shape)
        self.low = float(low)
        self.high = float(high)

    def inverse(self, v, cond=None):
        n = v.shape[0]
        width = self.high - self.low
        y = (v - self.low) * (1.0 / width)
        if np.any(y.data <= 0.0) or np.any(y.data >= 1.0):
            raise ValueError(f"value outside the open interval ({self.low}, {self.high})")
        log_y, log_1my = dc.log(y), dc.log(1.0 - y)
        u = log_y - log_1my
        logdet = (-np.log(width) - log_y - log_1my).reshape(n, -1).sum(axis=1)
        return LayerResult(u, logdet)

    def forward(self, u, cond=None, rng=None):
        return dc.sigmoid(u) * (self.high - self.low) + self.low
