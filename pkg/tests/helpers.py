"""Independent oracles shared by the test suite.

Everything here is deliberately written from first principles (brute
force, quadrature, finite differences, scalar recursions) so it can
disagree with the package implementation; tests compare the two routes.
"""

from __future__ import annotations

import numpy as np


# -- finite differences ------------------------------------------------


def fd_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a real vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fd_wirtinger_gradient(f, z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Conjugate-Wirtinger gradient d f / d z* of a real-valued f by FD.

    Uses d/dz* = 0.5 (d/dRe + 1j d/dIm) applied entrywise.
    """
    z = np.asarray(z, dtype=complex)
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e.flat[i] = step
        d_re = (f(z + e) - f(z - e)) / (2.0 * step)
        d_im = (f(z + 1j * e) - f(z - 1j * e)) / (2.0 * step)
        g.flat[i] = 0.5 * (d_re + 1j * d_im)
    return g


def fd_complex_jacobian(f, z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Holomorphic Jacobian d f_i / d z_j of a complex map by real-step FD.

    Valid when f is holomorphic in each entry of z (no conjugate
    dependence), which covers the bilinear observation mean.
    """
    z = np.asarray(z, dtype=complex)
    f0 = np.asarray(f(z)).reshape(-1)
    jac = np.zeros((f0.size, z.size), dtype=complex)
    for j in range(z.size):
        e = np.zeros_like(z)
        e.flat[j] = step
        jac[:, j] = (np.asarray(f(z + e)).reshape(-1) - np.asarray(f(z - e)).reshape(-1)) / (2.0 * step)
    return jac


# -- quadrature posterior mean for 2-dim mixture priors ----------------


def quadrature_posterior_mean(weights, means, covs, x_tau: np.ndarray, tau: float,
                              lim: float = 9.0, n: int = 801) -> np.ndarray:
    """Brute-force E[x0 | x(tau)] for a 2-dim Gaussian mixture prior.

    Integrates x0 * p(x0) * N(x_tau; (1-tau) x0, tau^2 I) over a
    tensor-product grid; the mixture density is evaluated directly from
    (weights, means, covs), independent of the package.
    """
    grid = np.linspace(-lim, lim, n)
    g0, g1 = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
    dens = np.zeros(pts.shape[0])
    for w, mu, cov in zip(weights, means, covs):
        cov = np.asarray(cov, dtype=float)
        diff = pts - np.asarray(mu, dtype=float)
        quad = np.sum(diff @ np.linalg.inv(cov) * diff, axis=1)
        norm = 2.0 * np.pi * np.sqrt(np.linalg.det(cov))
        dens += w * np.exp(-0.5 * quad) / norm
    d2 = np.sum((np.asarray(x_tau) - (1.0 - tau) * pts) ** 2, axis=1)
    like = np.exp(-0.5 * d2 / tau**2)
    w_tot = dens * like
    return (pts * w_tot[:, None]).sum(axis=0) / w_tot.sum()


def gaussian_conditional_mean(mean: np.ndarray, cov: np.ndarray, x_tau: np.ndarray,
                              tau: float) -> np.ndarray:
    """Closed-form E[x0 | x(tau)] for a full-rank Gaussian prior.

    x(tau) = (1-tau) x0 + tau x1 makes (x0, x(tau)) jointly Gaussian;
    standard conditioning gives
        E[x0|x] = mu + (1-tau) C ((1-tau)^2 C + tau^2 I)^{-1} (x - (1-tau) mu).
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    a = 1.0 - tau
    marg = a * a * cov + tau * tau * np.eye(cov.shape[0])
    gain = a * cov @ np.linalg.inv(marg)
    return mean + (np.asarray(x_tau) - a * mean) @ gain.T


# -- conjugate-Gaussian channel estimation oracle ----------------------


def complex_lmmse(y: np.ndarray, a: np.ndarray, c: np.ndarray, noise_var: float) -> np.ndarray:
    """Posterior mean C A^H (A C A^H + sigma^2 I)^{-1} y for h ~ CN(0, C)."""
    gram = a @ c @ a.conj().T + noise_var * np.eye(a.shape[0])
    return c @ a.conj().T @ np.linalg.solve(gram, y)


def complex_lmmse_mse(a: np.ndarray, c: np.ndarray, noise_var: float) -> float:
    """tr of the posterior covariance C - C A^H (A C A^H + sigma^2 I)^{-1} A C."""
    gram = a @ c @ a.conj().T + noise_var * np.eye(a.shape[0])
    post = c - c @ a.conj().T @ np.linalg.solve(gram, a @ c)
    return float(np.trace(post).real)


# -- scalar recursion for the guided flow in the conjugate regime ------


def guided_flow_gain(beta: float, c: float, noise_var: float, n_steps: int,
                     prior_var: float = 0.5) -> tuple:
    """Terminal (u, w) coefficients of the guided Euler flow, one coordinate.

    In the conjugate channel-only setting with an exactly orthogonal known
    block (per-coordinate gram eigenvalue c) the decoder state stays linear
    in (initial noise n0, least-squares solution h_ls):

        z_k = u_k n0 + w_k h_ls.

    One step at tau multiplies by A = 1 + dt a(tau) - C kappa rho(tau) and
    adds B = C kappa to w, with kappa = 2 c / noise_var, the Gaussian-prior
    Euler factor a(tau) = ((1-tau) V - tau) / c_tau, the denoiser gain
    rho(tau) = (1-tau) V / c_tau, c_tau = (1-tau)^2 V + tau^2, and guidance
    weight C = tau dt beta / (1-tau).  The terminal factor T = rho(dt)
    maps the raw state to the reported denoised estimate.  Returns (u, w)
    after T; (inf, inf) flags divergence.
    """
    v = prior_var
    dt = 1.0 / n_steps
    kappa = 2.0 * c / noise_var
    u, w = 1.0, 0.0
    for k in range(n_steps - 1):
        tau = 1.0 - k * dt
        c_tau = (1.0 - tau) ** 2 * v + tau * tau
        a = ((1.0 - tau) * v - tau) / c_tau
        if tau >= 1.0 - 1e-12:
            big_a, big_b = 1.0 + dt * a, 0.0
        else:
            rho = (1.0 - tau) * v / c_tau
            cg = tau * dt * beta / (1.0 - tau)
            big_a = 1.0 + dt * a - cg * kappa * rho
            big_b = cg * kappa
        u, w = big_a * u, big_a * w + big_b
        if abs(u) > 1e12:
            return float("inf"), float("inf")
    tau = dt
    t_fac = (1.0 - tau) * v / ((1.0 - tau) ** 2 * v + tau * tau)
    return t_fac * u, t_fac * w


def predict_flow_mse(beta: float, c: float, noise_var: float, n_steps: int,
                     n_avg: int = 1, prior_var: float = 0.5,
                     ls_var: float | None = None) -> float:
    """Predicted per-coordinate MSE of the n_avg-averaged denoised estimate.

    The folded estimate is u mean(n0) + w h_ls with h_ls = h + e_ls,
    var(e_ls) = noise_var / (2 c) per real coordinate (override via
    ls_var, e.g. 0 for a noiseless observation), so

        mse = u^2 / n_avg + (w - 1)^2 prior_var + w^2 ls_var.
    """
    u, w = guided_flow_gain(beta, c, noise_var, n_steps, prior_var)
    if not np.isfinite(u):
        return float("inf")
    s_ls = noise_var / (2.0 * c) if ls_var is None else ls_var
    return u * u / n_avg + (w - 1.0) ** 2 * prior_var + w * w * s_ls


def design_beta(c: float, noise_var: float, n_steps: int, n_avg: int = 1,
                prior_var: float = 0.5, ls_var: float | None = None,
                betas=None) -> tuple:
    """Pick the guidance weight minimizing the predicted MSE over a grid.

    Returns (beta, predicted_mse).
    """
    if betas is None:
        betas = np.geomspace(1e-3, 30.0, 400)
    best = (float("nan"), float("inf"))
    for b in betas:
        mse = predict_flow_mse(b, c, noise_var, n_steps, n_avg, prior_var, ls_var)
        if mse < best[1]:
            best = (float(b), float(mse))
    return best


# -- Fisher information oracles ----------------------------------------


def mc_fim(x: np.ndarray, h: np.ndarray, noise_var: float, n_draws: int,
           seed: int) -> np.ndarray:
    """Monte-Carlo FIM from score outer products.

    Draws noise realizations, forms the conjugate-Wirtinger scores
    s_x = vec(W H^H) / nv and s_h = vec(X^H W) / nv per subcarrier
    (column-major vecs, x-blocks first), and averages 2 s s^H.
    """
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    n_f, t_s, n_t = x.shape
    n_r = h.shape[2]
    rng = np.random.default_rng(seed)
    w = np.sqrt(noise_var / 2.0) * (
        rng.standard_normal((n_draws, n_f, t_s, n_r))
        + 1j * rng.standard_normal((n_draws, n_f, t_s, n_r)))
    cols = []
    for f in range(n_f):
        g = w[:, f] @ h[f].conj().T / noise_var          # (N, t_s, n_t)
        cols.append(g.transpose(0, 2, 1).reshape(n_draws, -1))
    for f in range(n_f):
        g = np.einsum("tk,ntr->nkr", x[f].conj(), w[:, f]) / noise_var
        cols.append(g.transpose(0, 2, 1).reshape(n_draws, -1))
    s = np.concatenate(cols, axis=1)
    return 2.0 * (s.T @ s.conj()) / n_draws


def fd_fim(x: np.ndarray, h: np.ndarray, noise_var: float,
           step: float = 1e-6) -> np.ndarray:
    """FIM as (2/nv) J^H J with J the FD Jacobian of the observation mean.

    The mean map (x, h) -> stacked vec(X_f H_f) is holomorphic, so the
    real-step central difference in fd_complex_jacobian recovers J; for a
    Gaussian likelihood with scaled-identity covariance the FIM is then
    (2/nv) J^H J regardless of how the mean entries are ordered.
    """
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    n_f, t_s, n_t = x.shape
    n_r = h.shape[2]
    x_size = n_f * t_s * n_t

    def mean_map(z):
        out = []
        for f in range(n_f):
            xf = z[f * t_s * n_t:(f + 1) * t_s * n_t].reshape(n_t, t_s).T
            off = x_size + f * n_t * n_r
            hf = z[off:off + n_t * n_r].reshape(n_r, n_t).T
            out.append((xf @ hf).reshape(-1))
        return np.concatenate(out)

    z0 = np.concatenate(
        [x[f].reshape(-1, order="F") for f in range(n_f)]
        + [h[f].reshape(-1, order="F") for f in range(n_f)])
    jac = fd_complex_jacobian(mean_map, z0, step)
    return (2.0 / noise_var) * jac.conj().T @ jac


# -- misc --------------------------------------------------------------


def random_psd_complex(n: int, rng, cond: float = 10.0) -> np.ndarray:
    """Random Hermitian PSD matrix with spectrum spread ~cond."""
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, _ = np.linalg.qr(a)
    lam = np.geomspace(1.0, cond, n)
    return (q * lam) @ q.conj().T


def round_robin_block(dims, power: float = 1.0) -> np.ndarray:
    """Fully known block with exactly orthogonal per-user columns.

    User k fires on symbols k, k + n_t, ... with constant amplitude chosen
    so X_f^H X_f = t_s * power * I exactly (requires n_t | t_s).
    """
    if dims.t_s % dims.n_t:
        raise ValueError("round robin needs n_t to divide t_s")
    x = np.zeros((dims.n_f, dims.t_s, dims.n_t), dtype=complex)
    amp = np.sqrt(dims.n_t * power)
    for k in range(dims.n_t):
        x[:, k :: dims.n_t, k] = amp
    return x
