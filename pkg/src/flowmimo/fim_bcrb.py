"""Fisher information and Bayesian Cramer-Rao machinery.

The complex FIM of the joint transmit/channel parameter, ordered
[x-block; h-block] with per-subcarrier direct-sum structure, is

    F(x, h) = (2 / noise_var) *
        [[ dsum_f (conj(H_f) H_f^T kron I_T),  dsum_f (conj(H_f) kron X_f) ],
         [ dsum_f (H_f^T kron X_f^H),          dsum_f (I_nr kron X_f^H X_f) ]]

which is Hermitian PSD and rank deficient by at least n_f * n_t^2: for
every (f, kappa, ell), the vector built from A_f = X_f[:, kappa] e_ell^T
and B_f = -e_kappa H_f[ell, :] (zero at other subcarriers) lies in its
null space.  The deficiency is the bilinear X H ambiguity of the
pilot-free model.

Convention note: F above is the complexified real FIM (it equals
2 * E[s s^H] for the conjugate-Wirtinger likelihood score s), while prior
FIMs are plain conjugate-Wirtinger outer products E[s s^H].  The Bayesian
FIM therefore combines them as 0.5 * E[F] + diag(prior terms); with that
pairing the pilot-only linear-Gaussian bound reproduces the conjugate
posterior MMSE exactly (pinned by test).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel_sim import SystemDims
from .flow_priors import GmmPrior, ot_path_sample
from .seeding import as_rng
from .tensor_core import direct_sum, kron, real_to_complex_score

__all__ = [
    "FimMatrix",
    "NullBasisReport",
    "BcrbResult",
    "IllConditionedError",
    "fim_side",
    "rank_bound",
    "assemble_fim",
    "null_vectors",
    "verify_rank_deficiency",
    "prior_fim",
    "gaussian_prior_fim",
    "bfim",
    "bcrb",
    "smoothing_error_table",
]

RANK_RTOL = 1e-8         # numerical rank threshold relative to sigma_max
ANNIHILATION_RTOL = 1e-10
COND_LIMIT = 1e12


class IllConditionedError(np.linalg.LinAlgError):
    """Bayesian FIM condition number beyond the invertibility limit."""


def fim_side(dims: SystemDims) -> int:
    return dims.n_f * dims.n_t * (dims.t_s + dims.n_r)


def rank_bound(dims: SystemDims) -> int:
    """Structural upper bound on rank(F): side minus n_f * n_t^2."""
    return fim_side(dims) - dims.n_f * dims.n_t**2


@dataclass(frozen=True)
class FimMatrix:
    """Complex Hermitian FIM with its parameter geometry."""

    matrix: np.ndarray
    dims: SystemDims
    known_x: bool = False

    @property
    def x_size(self) -> int:
        return 0 if self.known_x else self.dims.n_f * self.dims.t_s * self.dims.n_t


def assemble_fim(x: np.ndarray, h: np.ndarray, noise_var: float,
                 dims: SystemDims | None = None) -> FimMatrix:
    """Exact FIM of one (X, H) instance under the Gaussian observation model."""
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    if dims is None:
        dims = SystemDims(n_f=x.shape[0], n_t=x.shape[2], n_r=h.shape[2], t_s=x.shape[1],
                          noise_var=noise_var)
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    eye_t = np.eye(dims.t_s)
    eye_r = np.eye(dims.n_r)
    f_xx = direct_sum([kron(h[f].conj() @ h[f].T, eye_t) for f in range(dims.n_f)])
    f_xh = direct_sum([kron(h[f].conj(), x[f]) for f in range(dims.n_f)])
    f_hh = direct_sum([kron(eye_r, x[f].conj().T @ x[f]) for f in range(dims.n_f)])
    top = np.hstack([f_xx, f_xh])
    bot = np.hstack([f_xh.conj().T, f_hh])
    return FimMatrix(matrix=(2.0 / noise_var) * np.vstack([top, bot]), dims=dims)


def null_vectors(x: np.ndarray, h: np.ndarray, dims: SystemDims | None = None) -> np.ndarray:
    """The n_f * n_t^2 structural null vectors, one per row.

    Row (f, kappa, ell) has x-part A_f = X_f[:, kappa] e_ell^T and h-part
    B_f = -e_kappa H_f[ell, :] at subcarrier f (column-major vecs in the
    canonical ordering), zeros elsewhere.  The annihilation identity is
    algebraic and holds for any instance, but an all-zero X column or H
    row makes some vectors vanish and the set lose independence; such
    degenerate instances only warn (they have measure zero).
    """
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    if dims is None:
        dims = SystemDims(n_f=x.shape[0], n_t=x.shape[2], n_r=h.shape[2], t_s=x.shape[1])
    n_f, n_t, t_s, n_r = dims.n_f, dims.n_t, dims.t_s, dims.n_r
    if np.any(np.all(x == 0, axis=1)) or np.any(np.all(h == 0, axis=2)):
        warnings.warn("degenerate instance: zero X column or zero H row, "
                      "structural null vectors may be dependent", RuntimeWarning)
    x_size = n_f * t_s * n_t
    out = np.zeros((n_f * n_t * n_t, x_size + n_f * n_t * n_r), dtype=complex)
    row = 0
    for f in range(n_f):
        for kappa in range(n_t):
            for ell in range(n_t):
                a = np.zeros((t_s, n_t), dtype=complex)
                a[:, ell] = x[f, :, kappa]
                b = np.zeros((n_t, n_r), dtype=complex)
                b[kappa, :] = -h[f, ell, :]
                xo = f * t_s * n_t
                ho = x_size + f * n_t * n_r
                out[row, xo : xo + t_s * n_t] = a.reshape(-1, order="F")
                out[row, ho : ho + n_t * n_r] = b.reshape(-1, order="F")
                row += 1
    return out


@dataclass(frozen=True)
class NullBasisReport:
    """Outcome of one structural rank-deficiency check."""

    side: int
    bound: int
    numerical_rank: int
    annihilation_ok: bool
    max_annihilation: float      # max ||F w|| / (||F|| ||w||)
    basis_rank: int              # rank of the stacked null vectors
    passed: bool


def verify_rank_deficiency(x: np.ndarray, h: np.ndarray, noise_var: float = 1.0) -> NullBasisReport:
    """Check Prop.-style deficiency on one instance.

    Numerical rank uses the RANK_RTOL * sigma_max threshold; each
    structural null vector must satisfy ||F w|| <= 1e-10 ||F|| ||w||, and
    the n_f * n_t^2 vectors must be linearly independent.
    """
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    dims = SystemDims(n_f=x.shape[0], n_t=x.shape[2], n_r=h.shape[2], t_s=x.shape[1])
    fim = assemble_fim(x, h, noise_var, dims).matrix
    sv = np.linalg.svd(fim, compute_uv=False)
    num_rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    basis = null_vectors(x, h, dims)
    f_norm = np.linalg.norm(fim, 2)
    resid = np.linalg.norm(basis @ fim.T, axis=1)  # ||F w|| per row (F Hermitian)
    rel = resid / (f_norm * np.linalg.norm(basis, axis=1))
    basis_sv = np.linalg.svd(basis, compute_uv=False)
    basis_rank = int(np.sum(basis_sv > max(basis.shape) * np.finfo(float).eps * basis_sv[0]))
    bound = rank_bound(dims)
    ok = (num_rank <= bound) and bool(np.all(rel <= ANNIHILATION_RTOL)) and basis_rank == basis.shape[0]
    return NullBasisReport(
        side=fim.shape[0], bound=bound, numerical_rank=num_rank,
        annihilation_ok=bool(np.all(rel <= ANNIHILATION_RTOL)),
        max_annihilation=float(rel.max()), basis_rank=basis_rank, passed=ok,
    )


def prior_fim(score_fn, sampler, eps: float, n_samples: int, seed) -> np.ndarray:
    """Monte-Carlo prior FIM E[s s^H] from eps-smoothed real-embedding scores.

    score_fn(x, tau) returns the real-embedding score at path points
    x_eps = (1 - eps) x0 + eps x1 with x0 from sampler(n, rng); s is the
    conjugate-Wirtinger conversion of that score.  For a full-rank
    circular Gaussian prior this converges to C^{-1} as eps -> 0; for
    subspace-supported priors the normal directions carry O(1/eps^2)
    information, which is what regularizes the Bayesian FIM.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    rng = as_rng(seed)
    x0 = np.asarray(sampler(n_samples, rng), dtype=float)
    x1 = rng.standard_normal(x0.shape)
    x_eps = ot_path_sample(x0, x1, eps)
    s = real_to_complex_score(np.asarray(score_fn(x_eps, eps)))
    f = (s.T @ s.conj()) / n_samples
    return 0.5 * (f + f.conj().T)


def gaussian_prior_fim(prior: GmmPrior) -> np.ndarray:
    """Exact unsmoothed prior FIM for a single full-rank Gaussian prior.

    With real-embedding covariance S and P = S^{-1} in (re, im) blocks,
    E[s s^H] = 0.25 * ((P11 + P22) + 1j (P21 - P12)); equals C^{-1} for a
    circular complex Gaussian CN(0, C).
    """
    if len(prior.components) != 1:
        raise ValueError("analytic prior FIM needs a single Gaussian component")
    comp = prior.components[0]
    if comp.rank != comp.dim:
        raise ValueError("analytic prior FIM needs a full-rank covariance")
    p = (comp.basis / comp.eigvals) @ comp.basis.T  # S^{-1}
    n = comp.dim // 2
    p11, p12 = p[:n, :n], p[:n, n:]
    p21, p22 = p[n:, :n], p[n:, n:]
    return 0.25 * ((p11 + p22) + 1j * (p21 - p12))


def bfim(x_ensemble: np.ndarray, h_ensemble: np.ndarray, noise_var: float,
         prior_fim_x: np.ndarray | None, prior_fim_h: np.ndarray | None,
         dims: SystemDims, known_x: bool = False) -> FimMatrix:
    """Bayesian FIM: calibrated Monte-Carlo likelihood term plus prior terms.

    0.5 * mean_n F(x_n, h_n) + diag(prior_fim_x, prior_fim_h); see the
    module note for the 0.5.  Zero (None) prior terms reproduce the
    structural deficiency on single-instance ensembles.  known_x keeps
    only the h-block (deterministic pilots, x excluded from the
    parameter).
    """
    x_ensemble = np.asarray(x_ensemble, dtype=complex)
    h_ensemble = np.asarray(h_ensemble, dtype=complex)
    if x_ensemble.ndim == 3:
        x_ensemble = x_ensemble[None]
    if h_ensemble.ndim == 3:
        h_ensemble = h_ensemble[None]
    if x_ensemble.shape[0] != h_ensemble.shape[0]:
        raise ValueError("x and h ensembles must pair up")
    n = x_ensemble.shape[0]
    side = fim_side(dims)
    mean_f = np.zeros((side, side), dtype=complex)
    for xi, hi in zip(x_ensemble, h_ensemble):
        mean_f += assemble_fim(xi, hi, noise_var, dims).matrix
    mean_f /= n
    x_size = dims.n_f * dims.t_s * dims.n_t
    if known_x:
        out = 0.5 * mean_f[x_size:, x_size:]
        if prior_fim_h is not None:
            out = out + prior_fim_h
        return FimMatrix(matrix=0.5 * (out + out.conj().T), dims=dims, known_x=True)
    out = 0.5 * mean_f
    if prior_fim_x is not None:
        out[:x_size, :x_size] += prior_fim_x
    if prior_fim_h is not None:
        out[x_size:, x_size:] += prior_fim_h
    return FimMatrix(matrix=0.5 * (out + out.conj().T), dims=dims)


@dataclass(frozen=True)
class BcrbResult:
    """Normalized Bayesian bounds and inversion diagnostics."""

    bcrb_h: float
    bcrb_x: float
    trace_h: float
    trace_x: float
    cond: float
    e_h2: float
    e_x2: float

    @property
    def bcrb_h_db(self) -> float:
        return 10.0 * np.log10(self.bcrb_h)

    @property
    def bcrb_x_db(self) -> float:
        return float("nan") if np.isnan(self.bcrb_x) else 10.0 * np.log10(self.bcrb_x)


def bcrb(fim_matrix: FimMatrix, e_h2: float, e_x2: float = float("nan")) -> BcrbResult:
    """Invert the Bayesian FIM and normalize block traces by signal energies.

    bcrb_h = tr(C_hh) / e||H||_F^2 (and likewise for x); inversion is by
    eigendecomposition with symmetric enforcement, rejecting matrices with
    condition number above 1e12.
    """
    m = fim_matrix.matrix
    m = 0.5 * (m + m.conj().T)
    lam, vec = np.linalg.eigh(m)
    if lam[0] <= 0 or lam[-1] / lam[0] > COND_LIMIT:
        cond = float("inf") if lam[0] <= 0 else float(lam[-1] / lam[0])
        raise IllConditionedError(f"ill-conditioned BFIM: condition number {cond:.3e}")
    inv_diag = np.einsum("ij,j,ij->i", vec, 1.0 / lam, vec.conj()).real
    x_size = fim_matrix.x_size
    trace_x = float(inv_diag[:x_size].sum()) if x_size else float("nan")
    trace_h = float(inv_diag[x_size:].sum())
    return BcrbResult(
        bcrb_h=trace_h / e_h2,
        bcrb_x=trace_x / e_x2 if x_size else float("nan"),
        trace_h=trace_h,
        trace_x=trace_x,
        cond=float(lam[-1] / lam[0]),
        e_h2=float(e_h2),
        e_x2=float(e_x2),
    )


def smoothing_error_table(prior: GmmPrior, eps_list, n_samples: int, seed,
                          vf=None) -> list:
    """Tangent-projected smoothing error of the eps-smoothed score.

    For each eps: the mean over prior draws of
        || P_T (score(x_eps, eps) - tangent_score(x0)) ||_2
    with P_T the projector onto the prior support (identity for full-rank
    priors), its per-sample constant gap/eps, and, when a learned velocity
    field is supplied, the eps-weighted training gap delta.  eps = 0 rows
    are exactly zero by definition.  Returns a list of row dicts plus a
    fitted log-log slope over the positive-eps rows under key "slope" of
    the last row.
    """
    from .flow_priors import score_error  # local import to avoid cycle noise

    rng = as_rng(seed)
    x0 = prior.sample(n_samples, rng)
    x1 = rng.standard_normal(x0.shape)
    base = prior.tangent_score(x0)
    comp = prior.components[0]
    full_rank = all(c.rank == c.dim for c in prior.components)
    basis = None if full_rank else comp.basis

    def project(v):
        return v if basis is None else (v @ basis) @ basis.T

    rows = []
    for eps in eps_list:
        if eps == 0.0:
            rows.append({"eps": 0.0, "smoothing_gap": 0.0, "gap_over_eps": float("nan"),
                         "delta": 0.0})
            continue
        x_eps = ot_path_sample(x0, x1, eps)
        gap_vec = project(prior.score(x_eps, eps) - base)
        gap = float(np.mean(np.linalg.norm(gap_vec, axis=-1)))
        delta = float(score_error(vf, prior, eps, n_samples, rng)) if vf is not None else 0.0
        rows.append({"eps": float(eps), "smoothing_gap": gap, "gap_over_eps": gap / eps,
                     "delta": delta})
    pos = [(r["eps"], r["smoothing_gap"]) for r in rows if r["eps"] > 0 and r["smoothing_gap"] > 0]
    if len(pos) >= 2:
        le = np.log([p[0] for p in pos])
        lg = np.log([p[1] for p in pos])
        slope = float(np.polyfit(le, lg, 1)[0])
    else:
        slope = float("nan")
    for r in rows:
        r["slope"] = slope
    return rows
