"""Class-conditional diagonal Gaussian mixtures over the flow latent.

``log p(u | y=m) = logsumexp_k [log w_mk + sum_d log N(u_d; mu_mkd, var_mkd)]``.
After :meth:`GmmHead.attach_specialist` the head evaluates an equal-weight
mixture of the frozen generalist set and a trainable specialist set that
starts as an exact copy, so the specialist starts generalist-equivalent.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import GENERALIST, SPECIALIST, Module, Param

LOG_2PI = math.log(2 * math.pi)
LOG_HALF = math.log(0.5)


class MixtureSet(Module):
    def __init__(self, means, logvars, logits, namespace):
        self.means = Param(means, namespace)
        self.logvars = Param(logvars, namespace)
        self.logits = Param(logits, namespace)

    def weights(self) -> np.ndarray:
        lw = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        w = np.exp(lw)
        return w / w.sum(axis=1, keepdims=True)

    def component_logpdf(self, u: Tensor) -> Tensor:
        """(N, M, K) log-densities of every component, matmul-expanded."""
        m, k, d = self.means.shape
        n = u.shape[0]
        mu = self.means.reshape(m * k, d)
        lv = self.logvars.reshape(m * k, d)
        prec = dc.exp(-lv)
        quad = (u * u) @ prec.T - 2.0 * (u @ (mu * prec).T) + (mu * mu * prec).sum(axis=1)
        lp = -0.5 * (quad + lv.sum(axis=1) + d * LOG_2PI)
        return lp.reshape(n, m, k)

    def logpdf(self, u: Tensor) -> Tensor:
        log_w = self.logits - dc.logsumexp(self.logits, axis=1, keepdims=True)
        return dc.logsumexp(self.component_logpdf(u) + log_w, axis=2)

    def sample(self, labels: np.ndarray, rng) -> np.ndarray:
        w = self.weights()
        comps = np.array([rng.choice(w.shape[1], p=w[y]) for y in labels])
        mu = self.means.data[labels, comps]
        sd = np.exp(0.5 * self.logvars.data[labels, comps])
        return mu + sd * rng.standard_normal(mu.shape)


class GmmHead(Module):
    def __init__(self, dim: int, classes: int, rng, components: int = 8, mean_scale: float = 1.0):
        self.dim = dim
        self.classes = classes
        self.components = components
        means = rng.standard_normal((classes, components, dim)) * mean_scale
        self.generalist = MixtureSet(
            means, np.zeros((classes, components, dim)), np.zeros((classes, components)), GENERALIST
        )
        self.specialist = None

    @property
    def phase(self) -> str:
        return GENERALIST if self.specialist is None else SPECIALIST

    def attach_specialist(self) -> None:
        if self.specialist is not None:
            raise RuntimeError("GMM head already has a specialist set")
        g = self.generalist
        self.specialist = MixtureSet(g.means.data, g.logvars.data, g.logits.data, SPECIALIST)

    def logpdf(self, u: Tensor, phase: str | None = None) -> Tensor:
        """(N, M) class log-likelihoods of flattened latents ``u``."""
        u = u.reshape(u.shape[0], -1)
        if u.shape[1] != self.dim:
            raise ValueError(f"latent dimension {u.shape[1]} does not match head dimension {self.dim}")
        phase = phase or self.phase
        lp_g = self.generalist.logpdf(u)
        if phase == GENERALIST:
            return lp_g
        if self.specialist is None:
            raise RuntimeError("specialist phase requested before attach_specialist")
        lp_s = self.specialist.logpdf(u)
        both = dc.concat([lp_g.reshape(lp_g.shape + (1,)), lp_s.reshape(lp_s.shape + (1,))], axis=2)
        return dc.logsumexp(both, axis=2) + LOG_HALF

    def sample(self, labels: np.ndarray, rng) -> np.ndarray:
        w_rng, g_rng, s_rng = dc.split_rng(rng, 3)
        out = self.generalist.sample(labels, g_rng)
        if self.specialist is not None:
            pick = w_rng.random(len(labels)) < 0.5
            out = np.where(pick[:, None], self.specialist.sample(labels, s_rng), out)
        return out


def classify(loglik) -> np.ndarray:
    """Softmax over class log-likelihoods."""
    x = np.asarray(loglik.data if isinstance(loglik, Tensor) else loglik, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def loss(loglik: Tensor, labels: np.ndarray | None = None, alpha: float = 1e-3) -> Tensor:
    """Semi-supervised objective averaged over the batch.

    Labelled rows contribute ``-(log softmax(L)[y] + alpha * logsumexp(L))``;
    rows labelled ``-1`` contribute only ``-alpha * logsumexp(L)``. With one
    class or no labels the objective is ``-logsumexp(L)`` (``alpha = 1``).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n, m = loglik.shape
    lse = dc.logsumexp(loglik, axis=1)
    if m == 1 or labels is None:
        return -lse.mean()
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels >= m):
        raise ValueError(f"label outside [0, {m})")
    known = labels >= 0
    rows = np.nonzero(known)[0]
    total = -(alpha * lse).sum()
    if rows.size:
        picked = loglik[rows, labels[rows]]
        total = total - (picked - lse[rows]).sum()
    return total * (1.0 / n)
