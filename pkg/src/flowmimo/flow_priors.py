"""Analytic priors and velocity fields on the linear interpolation path.

The path convention is x(tau) = (1 - tau) * x0 + tau * x1 with x1 standard
normal, so tau = 1 is the noise end and tau = 0 the data end.  Under this
path a Gaussian mixture prior stays a Gaussian mixture at every tau:
component means shrink to (1 - tau) * mu and covariances become
(1 - tau)^2 * Sigma + tau^2 * I, which gives closed-form marginal scores,
velocities and posterior-mean denoisers.  Rank-deficient components (priors
supported on affine subspaces) are handled through their eigenbasis, the
tau^2 term regularizing the normal directions.

The velocity field and the marginal score are related by
    v(x, tau) = (x + tau * score(x, tau)) / (tau - 1)
and the posterior mean of x0 given x(tau) is the one-step denoiser
    e[x0 | x(tau)] = x(tau) - tau * v(x, tau).

``MlpVf`` is a small tanh MLP velocity field trained by conditional flow
matching with hand-derived backprop; it exposes the same ``velocity``
interface as ``GmmPrior`` so the decoder can use either interchangeably.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diskio
from .seeding import as_rng

__all__ = [
    "GmmComponent",
    "GmmPrior",
    "ot_path_sample",
    "gmm_marginal_score",
    "vf_from_score",
    "score_from_vf",
    "tweedie_mmse",
    "MlpVf",
    "cfm_loss_and_grad",
    "cfm_train",
    "score_error",
]

_ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class GmmComponent:
    """One Gaussian component given by its support eigendecomposition.

    mean: (d,) offset of the (possibly affine-subspace) support.
    basis: (d, r) orthonormal columns spanning the support directions.
    eigvals: (r,) nonnegative variances along the basis columns.
    r < d means the component is supported on an r-dim affine subspace.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigvals: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        basis = np.asarray(self.basis, dtype=float)
        eigvals = np.asarray(self.eigvals, dtype=float)
        if basis.ndim != 2 or basis.shape[0] != mean.shape[0]:
            raise ValueError("basis must be (d, r) matching mean length")
        if eigvals.shape != (basis.shape[1],):
            raise ValueError("eigvals must match basis columns")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=_ORTHO_TOL):
            raise ValueError("basis columns must be orthonormal")
        if np.any(eigvals < 0):
            raise ValueError("eigvals must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigvals", eigvals)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def cov(self) -> np.ndarray:
        return (self.basis * self.eigvals) @ self.basis.T


class GmmPrior:
    """Gaussian mixture over R^d with closed-form path marginals.

    weights: (K,) nonnegative, summing to 1 (validated).
    """

    def __init__(self, weights, components):
        weights = np.asarray(weights, dtype=float)
        components = tuple(components)
        if weights.ndim != 1 or len(components) != weights.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components must share the ambient dimension")
        self.weights = weights
        self.components = components

    # -- constructors -------------------------------------------------

    @classmethod
    def gaussian(cls, mean, cov) -> "GmmPrior":
        """Single Gaussian from a PSD covariance (rank-deficient allowed)."""
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        lam, u = np.linalg.eigh(0.5 * (cov + cov.T))
        lam = np.clip(lam, 0.0, None)
        keep = lam > lam.max(initial=0.0) * 1e-12  # empty for a point mass
        comp = GmmComponent(mean, u[:, keep], lam[keep])
        return cls(np.array([1.0]), (comp,))

    @classmethod
    def standard(cls, d: int) -> "GmmPrior":
        return cls(np.array([1.0]), (GmmComponent(np.zeros(d), np.eye(d), np.ones(d)),))

    @classmethod
    def subspace(cls, mean, basis, eigvals) -> "GmmPrior":
        return cls(np.array([1.0]), (GmmComponent(mean, basis, eigvals),))

    @classmethod
    def mixture(cls, weights, priors) -> "GmmPrior":
        """Mix existing priors (their own weights folded in)."""
        weights = np.asarray(weights, dtype=float)
        w_out, comps = [], []
        for w, p in zip(weights, priors):
            for wi, ci in zip(p.weights, p.components):
                w_out.append(w * wi)
                comps.append(ci)
        return cls(np.asarray(w_out), comps)

    @classmethod
    def shell(cls, d: int, n_components: int, sigma: float, seed) -> "GmmPrior":
        """Components with unit-norm random means and isotropic sigma^2 covariance.

        A concentrated stand-in for a structured source: draws stay close to
        one of a few well-separated modes.
        """
        rng = as_rng(seed)
        means = rng.standard_normal((n_components, d))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        comps = [GmmComponent(m, np.eye(d), np.full(d, sigma**2)) for m in means]
        return cls(np.full(n_components, 1.0 / n_components), comps)

    def product(self, other: "GmmPrior") -> "GmmPrior":
        """Independent product prior over concatenated coordinates."""
        comps, weights = [], []
        d1 = self.dim
        d2 = other.dim
        for wa, ca in zip(self.weights, self.components):
            for wb, cb in zip(other.weights, other.components):
                mean = np.concatenate([ca.mean, cb.mean])
                basis = np.zeros((d1 + d2, ca.rank + cb.rank))
                basis[:d1, : ca.rank] = ca.basis
                basis[d1:, ca.rank :] = cb.basis
                comps.append(GmmComponent(mean, basis, np.concatenate([ca.eigvals, cb.eigvals])))
                weights.append(wa * wb)
        return GmmPrior(np.asarray(weights), comps)

    def affine_pushforward(self, mat, offset) -> "GmmPrior":
        """Prior of M x + b when x follows this prior (M real, any shape)."""
        mat = np.asarray(mat, dtype=float)
        offset = np.asarray(offset, dtype=float)
        comps = []
        for c in self.components:
            root = mat @ (c.basis * np.sqrt(c.eigvals))  # (d_out, r)
            if root.size:
                u, s, _ = np.linalg.svd(root, full_matrices=False)
                keep = s > (s.max(initial=0.0) * 1e-12 + 1e-300)
                basis, lam = u[:, keep], s[keep] ** 2
            else:
                basis = np.zeros((mat.shape[0], 0))
                lam = np.zeros(0)
            comps.append(GmmComponent(mat @ c.mean + offset, basis, lam))
        return GmmPrior(self.weights.copy(), comps)

    # -- moments and sampling -----------------------------------------

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def mean_cov(self):
        """Overall mixture mean and covariance."""
        mu = sum(w * c.mean for w, c in zip(self.weights, self.components))
        cov = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            dm = c.mean - mu
            cov += w * (c.cov() + np.outer(dm, dm))
        return mu, cov

    def sample(self, n: int, seed) -> np.ndarray:
        """Draw n samples, shape (n, d)."""
        rng = as_rng(seed)
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            rows = np.flatnonzero(idx == k)
            if rows.size == 0:
                continue
            z = rng.standard_normal((rows.size, c.rank))
            out[rows] = c.mean + (z * np.sqrt(c.eigvals)) @ c.basis.T
        return out

    # -- path marginal quantities -------------------------------------

    def _component_log_density(self, x, tau):
        """Per-component log densities of the tau-marginal, stacked on axis 0."""
        x = np.asarray(x, dtype=float)
        d = self.dim
        logs = []
        for c in self.components:
            a = 1.0 - tau
            cvals = a * a * c.eigvals + tau * tau  # (r,)
            v = x - a * c.mean
            p = v @ c.basis  # (..., r)
            quad = np.sum(p * p / cvals, axis=-1)
            logdet = np.sum(np.log(cvals))
            if c.rank < d:
                if tau == 0.0:
                    raise ValueError("degenerate density: rank-deficient component at tau=0")
                resid = np.sum(v * v, axis=-1) - np.sum(p * p, axis=-1)
                quad = quad + np.clip(resid, 0.0, None) / (tau * tau)
                logdet = logdet + (d - c.rank) * math.log(tau * tau)
            logs.append(-0.5 * (quad + logdet + d * math.log(2.0 * math.pi)))
        return np.stack(logs, axis=0)

    def log_density(self, x, tau: float):
        """Log density of the tau-marginal at x (batched over leading axes)."""
        comp_logs = self._component_log_density(x, tau)
        return logsumexp(comp_logs + np.log(self.weights).reshape((-1,) + (1,) * (comp_logs.ndim - 1)), axis=0)

    def _responsibilities(self, x, tau):
        comp_logs = self._component_log_density(x, tau)
        logw = np.log(self.weights).reshape((-1,) + (1,) * (comp_logs.ndim - 1))
        logr = comp_logs + logw
        logr = logr - logsumexp(logr, axis=0, keepdims=True)
        return np.exp(logr)

    def score(self, x, tau: float) -> np.ndarray:
        """Gradient of log density of the tau-marginal, shape of x."""
        x = np.asarray(x, dtype=float)
        d = self.dim
        resp = self._responsibilities(x, tau) if len(self.components) > 1 else None
        out = np.zeros_like(x)
        for k, c in enumerate(self.components):
            a = 1.0 - tau
            cvals = a * a * c.eigvals + tau * tau
            v = x - a * c.mean
            p = v @ c.basis
            s = -(p / cvals) @ c.basis.T
            if c.rank < d:
                if tau == 0.0:
                    raise ValueError("degenerate density: rank-deficient component at tau=0")
                s = s - (v - p @ c.basis.T) / (tau * tau)
            out += s if resp is None else resp[k][..., None] * s
        return out

    def velocity(self, x, tau: float) -> np.ndarray:
        """Marginal velocity field of the path; finite at tau=1.

        Uses the per-component closed form in which the (tau - 1) factor of
        the velocity/score relation has been cancelled analytically, so the
        noise endpoint needs no special casing.
        """
        x = np.asarray(x, dtype=float)
        d = self.dim
        if tau == 0.0 and any(c.rank < d for c in self.components):
            raise ValueError("velocity undefined at tau=0 off the prior support")
        resp = self._responsibilities(x, tau) if len(self.components) > 1 else None
        out = np.zeros_like(x)
        for k, c in enumerate(self.components):
            a = 1.0 - tau
            cvals = a * a * c.eigvals + tau * tau
            g = (a * c.eigvals - tau) / cvals  # support directions
            v = x - a * c.mean
            p = v @ c.basis
            vel = -c.mean - (p * g) @ c.basis.T
            if c.rank < d:
                vel = vel - (v - p @ c.basis.T) * (-1.0 / tau)
            out += vel if resp is None else resp[k][..., None] * vel
        return out

    def denoise(self, x, tau: float) -> np.ndarray:
        """Exact posterior mean e[x0 | x(tau)] (= one-step denoiser)."""
        return tweedie_mmse(x, self.velocity(x, tau), tau)

    def tangent_score(self, x) -> np.ndarray:
        """Score at tau=0 restricted to the support subspace.

        For full-rank mixtures this is the plain score.  Rank-deficient
        mixtures must share a common support subspace; x is projected onto
        it before evaluation.
        """
        d = self.dim
        if all(c.rank == d for c in self.components):
            return self.score(x, 0.0)
        base = self.components[0]
        proj = base.basis @ base.basis.T
        for c in self.components[1:]:
            if c.rank != base.rank or not np.allclose(c.basis @ c.basis.T, proj, atol=1e-8):
                raise ValueError("tangent score needs a common support subspace")
            if np.linalg.norm(proj @ (c.mean - base.mean) - (c.mean - base.mean)) > 1e-8:
                raise ValueError("component offsets must lie in a common affine subspace")
        x = np.asarray(x, dtype=float)
        logs = []
        for c in self.components:
            p = (x - c.mean) @ c.basis
            logs.append(-0.5 * (np.sum(p * p / c.eigvals, axis=-1) + np.sum(np.log(c.eigvals))))
        logr = np.stack(logs, axis=0) + np.log(self.weights).reshape((-1,) + (1,) * (np.ndim(logs[0])))
        resp = np.exp(logr - logsumexp(logr, axis=0, keepdims=True))
        out = np.zeros_like(x)
        for k, c in enumerate(self.components):
            p = (x - c.mean) @ c.basis
            out += resp[k][..., None] * (-(p / c.eigvals) @ c.basis.T)
        return out


# -- path and flow algebra --------------------------------------------


def ot_path_sample(x0, x1, tau: float) -> np.ndarray:
    """Point on the linear path: (1 - tau) * x0 + tau * x1."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return (1.0 - tau) * np.asarray(x0) + tau * np.asarray(x1)


def gmm_marginal_score(prior: GmmPrior, x, tau: float) -> np.ndarray:
    """Closed-form score of the tau-marginal of a GMM prior."""
    return prior.score(x, tau)


def vf_from_score(score, x, tau: float) -> np.ndarray:
    """Velocity from marginal score: v = (x + tau * score) / (tau - 1).

    Singular at tau=1; use an analytic velocity (e.g. GmmPrior.velocity)
    there instead.
    """
    if tau == 1.0:
        raise ValueError("velocity/score relation is singular at tau=1")
    return (np.asarray(x) + tau * np.asarray(score)) / (tau - 1.0)


def score_from_vf(v, x, tau: float) -> np.ndarray:
    """Score from velocity, inverse of vf_from_score; singular at tau=0."""
    if tau == 0.0:
        raise ValueError("velocity/score relation is singular at tau=0")
    return ((tau - 1.0) * np.asarray(v) - np.asarray(x)) / tau


def tweedie_mmse(x, v, tau: float) -> np.ndarray:
    """One-step denoiser x - tau * v; exact posterior mean for Gaussian priors."""
    return np.asarray(x) - tau * np.asarray(v)


# -- learned velocity field -------------------------------------------


def _tau_features(tau, n: int) -> np.ndarray:
    """Per-sample conditioning features [tau, sin(2 pi tau), cos(2 pi tau)]."""
    t = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    return np.stack([t, np.sin(2.0 * np.pi * t), np.cos(2.0 * np.pi * t)], axis=1)


@dataclass
class MlpVf:
    """Tanh MLP velocity field v(x, tau) with hand-rolled backprop.

    widths: layer sizes [d, h1, ..., d]; the input layer is augmented with
    the three tau features, so the first weight matrix is (h1, d + 3).
    """

    widths: list
    weights: list = field(repr=False)
    biases: list = field(repr=False)
    seed: int = 0
    final_loss: float = math.nan

    N_TAU_FEATURES = 3

    @classmethod
    def init(cls, widths, seed: int = 0) -> "MlpVf":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[0] != widths[-1]:
            raise ValueError("widths must start and end with the data dimension")
        rng = as_rng(seed)
        weights, biases = [], []
        fan_in = widths[0] + cls.N_TAU_FEATURES
        for w_out in widths[1:]:
            weights.append(rng.standard_normal((w_out, fan_in)) / math.sqrt(fan_in))
            biases.append(np.zeros(w_out))
            fan_in = w_out
        return cls(widths=widths, weights=weights, biases=biases, seed=int(seed))

    @property
    def dim(self) -> int:
        return self.widths[0]

    def _forward(self, x2d: np.ndarray, tau) -> tuple:
        """Forward pass keeping activations for backprop; x2d is (n, d)."""
        h = np.concatenate([x2d, _tau_features(tau, x2d.shape[0])], axis=1)
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = np.tanh(z) if i < len(self.weights) - 1 else z  # linear output layer
            acts.append(h)
        return h, acts

    def velocity(self, x, tau) -> np.ndarray:
        """Evaluate the field; x is (..., d), tau a scalar or per-row array."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        x2d = x.reshape(-1, x.shape[-1])
        t = np.asarray(tau, dtype=float)
        if t.ndim:
            t = np.broadcast_to(t, lead).reshape(-1)
        out, _ = self._forward(x2d, t)
        return out.reshape(lead + (self.dim,))

    def loss_and_grad(self, x_tau, tau, target):
        """Mean squared flow-matching residual and parameter gradients.

        Loss = mean_n || v(x_tau_n, tau_n) - target_n ||^2.  Returns
        (loss, grad_weights, grad_biases) with grads matching the
        weights/biases lists.
        """
        x_tau = np.asarray(x_tau, dtype=float)
        target = np.asarray(target, dtype=float)
        n = x_tau.shape[0]
        out, acts = self._forward(x_tau, tau)
        resid = out - target
        loss = float(np.sum(resid * resid) / n)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite flow-matching loss")
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        delta = 2.0 * resid / n  # (n, d_out)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)  # tanh'
        return loss, gw, gb

    def sgd_step(self, gw, gb, lr: float) -> None:
        for i in range(len(self.weights)):
            self.weights[i] -= lr * gw[i]
            self.biases[i] -= lr * gb[i]

    def save(self, path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        diskio.write_blob(
            path,
            {
                "kind": "mlp_vf",
                "widths": list(self.widths),
                "activation": "tanh",
                "seed": self.seed,
                "final_loss": None if math.isnan(self.final_loss) else self.final_loss,
            },
            arrays,
        )

    @classmethod
    def load(cls, path) -> "MlpVf":
        head, arrays = diskio.read_blob(path)
        if head.get("kind") != "mlp_vf":
            raise ValueError(f"not a velocity-field checkpoint: {path}")
        widths = [int(w) for w in head["widths"]]
        n_layers = len(widths) - 1
        weights = [arrays[f"w{i}"] for i in range(n_layers)]
        biases = [arrays[f"b{i}"] for i in range(n_layers)]
        loss = head.get("final_loss")
        return cls(widths=widths, weights=weights, biases=biases, seed=int(head.get("seed", 0)),
                   final_loss=math.nan if loss is None else float(loss))


def cfm_loss_and_grad(net: MlpVf, x0, x1, tau):
    """Conditional flow-matching loss on a fixed (x0, x1, tau) batch.

    Path points are x(tau) = (1 - tau) x0 + tau x1 and the regression
    target is the pair velocity x1 - x0.  Deterministic given the inputs,
    which makes it directly checkable against finite differences.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    tau = np.asarray(tau, dtype=float)
    x_tau = (1.0 - tau)[:, None] * x0 + tau[:, None] * x1
    return net.loss_and_grad(x_tau, tau, x1 - x0)


def cfm_train(net: MlpVf, sampler, n_steps: int, batch_size: int, lr: float, seed,
              callback=None) -> list:
    """SGD on the conditional flow-matching objective.

    sampler(n, rng) must return (n, d) prior draws.  Returns the per-step
    loss trace; raises on divergence (non-finite loss).
    """
    rng = as_rng(seed)
    trace = []
    for step in range(int(n_steps)):
        x0 = np.asarray(sampler(batch_size, rng), dtype=float)
        x1 = rng.standard_normal(x0.shape)
        tau = rng.uniform(0.0, 1.0, size=x0.shape[0])
        loss, gw, gb = cfm_loss_and_grad(net, x0, x1, tau)
        net.sgd_step(gw, gb, lr)
        trace.append(loss)
        if callback is not None:
            callback(step, loss)
    net.final_loss = trace[-1] if trace else math.nan
    return trace


def score_error(vf, prior: GmmPrior, eps: float, n_samples: int, seed) -> float:
    """eps-weighted score gap at tau=eps between a velocity field and the prior.

    delta = eps * mean_n || score_vf(x_eps) - score_exact(x_eps) ||_2 over
    path points x_eps built from prior draws.  Zero (to roundoff) when vf
    is the prior's own velocity field.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    rng = as_rng(seed)
    x0 = prior.sample(n_samples, rng)
    x1 = rng.standard_normal(x0.shape)
    x_eps = ot_path_sample(x0, x1, eps)
    s_hat = score_from_vf(vf.velocity(x_eps, eps), x_eps, eps)
    s_true = prior.score(x_eps, eps)
    return float(eps * np.mean(np.linalg.norm(s_hat - s_true, axis=-1)))
