"""Numerical primitives shared by the solver and the analysis code.

Everything here is a pure function of its inputs: soft-thresholded SVD,
nuclear-norm regularized matrix completion, principal-pivoting NNLS and a
ridge-stabilized weighted least-squares kernel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "ConditioningError",
    "DegenerateProblemError",
    "InvalidInputError",
    "NnlsProblem",
    "ObservedMatrix",
    "SvtConfig",
    "SvtResult",
    "completion_objective",
    "masked_nmf",
    "nnls_gram",
    "nnls_solve",
    "ridge_weighted_ls",
    "svd_soft_threshold",
    "svt_complete",
]


class InvalidInputError(ValueError):
    """Raised for non-finite or inconsistently shaped inputs."""


class DegenerateProblemError(np.linalg.LinAlgError):
    """Raised when a least-squares design is rank deficient.

    ``columns`` lists the column indices that are linearly dependent on the
    remaining ones.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(int(c) for c in columns)


class ConditioningError(np.linalg.LinAlgError):
    """Raised when a normal matrix is not positive definite."""

    def __init__(self, message, smallest_eigenvalue):
        super().__init__(message)
        self.smallest_eigenvalue = float(smallest_eigenvalue)


def _require_finite(name, a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


# --------------------------------------------------------------------------
# singular value thresholding
# --------------------------------------------------------------------------


def _soft_threshold(Y, tau):
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    X = (U[:, keep] * s[keep]) @ Vt[keep]
    return X, float(s.sum())


def svd_soft_threshold(Y, mu):
    """Shrink the singular values of ``Y`` by ``mu``.

    Returns ``U diag((s - mu)_+) V^T``, the minimizer of
    ``0.5 * ||X - Y||_F^2 + mu * ||X||_*``. A full SVD is used; the matrices
    handled in this package are at most a few hundred rows wide.
    """
    Y = _require_finite("Y", Y)
    if mu < 0:
        raise InvalidInputError("mu must be non-negative")
    if Y.ndim != 2:
        raise InvalidInputError("Y must be a matrix")
    return _soft_threshold(Y, float(mu))[0]


@dataclass(frozen=True)
class ObservedMatrix:
    """Partially observed matrix; ``mask`` is True where ``values`` is known."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise InvalidInputError("values and mask must be matrices of equal shape")
        if not np.all(np.isfinite(values[mask])):
            raise InvalidInputError("observed entries must be finite")
        # unobserved entries are ignored; store zeros so nothing leaks through
        object.__setattr__(self, "values", np.where(mask, values, 0.0))
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class SvtConfig:
    """Settings for :func:`svt_complete`.

    ``delta`` is the step size of the SVT recursion and must lie in (0, 2).
    ``method`` selects the plain recursion (``"svt"``) or the monotone
    accelerated variant with threshold continuation (``"accelerated"``),
    which reaches the same minimizer in far fewer SVDs for small ``mu``.
    """

    mu: float = 0.01
    delta: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    method: str = "accelerated"

    def __post_init__(self):
        if self.mu < 0:
            raise InvalidInputError("mu must be >= 0")
        if not 0 < self.delta < 2:
            raise InvalidInputError("delta must lie in (0, 2)")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be positive")
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")
        if self.method not in ("svt", "accelerated"):
            raise InvalidInputError(f"unknown SVT method {self.method!r}")


@dataclass
class SvtResult:
    matrix: np.ndarray
    converged: bool
    n_iter: int
    objective_trace: list = field(default_factory=list)


def completion_objective(S, obs, mu):
    """``sum_{Omega} (Psi - S)^2 + mu * ||S||_*``."""
    r = obs.mask * (obs.values - S)
    nuc = np.linalg.svd(S, compute_uv=False).sum() if mu > 0 else 0.0
    return float(np.sum(r * r) + mu * nuc)


def svt_complete(obs, cfg, init=None):
    """Nuclear-norm regularized completion of a partially observed matrix.

    Minimizes ``sum_{(i,j) in Omega} (Psi_ij - S_ij)^2 + mu ||S||_*`` with the
    singular value thresholding recursion

        S_k = D_{mu delta / 2}(Y_{k-1}),   Y_k = S_k + delta P_Omega(Psi - S_k)

    started from ``S_0 = init`` (zero by default). The objective is
    nonincreasing for ``delta <= 1``; for larger steps only iterates that
    lower the objective are accepted. Returns the best iterate and a
    convergence flag.
    """
    if not isinstance(obs, ObservedMatrix):
        raise InvalidInputError("obs must be an ObservedMatrix")
    if not obs.mask.any():
        raise InvalidInputError("at least one entry must be observed")
    S0 = np.zeros_like(obs.values) if init is None else _require_finite("init", init).copy()
    if S0.shape != obs.values.shape:
        raise InvalidInputError("init has the wrong shape")

    if cfg.mu == 0:
        return _svt_plain(obs, cfg, S0, cfg.mu)
    if cfg.method == "svt":
        return _svt_plain(obs, cfg, S0, cfg.mu)

    # continuation: start from a large threshold only on cold starts
    if init is None:
        top = np.linalg.norm(obs.values, 2)
        mu_k = top
        total = 0
        while mu_k / 3 > cfg.mu:
            mu_k /= 3
            stage = _svt_accelerated(obs, cfg, S0, mu_k, max(cfg.max_iter // 10, 20), cfg.tol * 100)
            S0, total = stage.matrix, total + stage.n_iter
        res = _svt_accelerated(obs, cfg, S0, cfg.mu, cfg.max_iter, cfg.tol)
        res.n_iter += total
        return res
    return _svt_accelerated(obs, cfg, S0, cfg.mu, cfg.max_iter, cfg.tol)


def _prox_step(S, obs, mu, step):
    # gradient of sum_Omega (Psi - S)^2 is -2 P_Omega(Psi - S); step = delta / 2
    Y = S + 2.0 * step * obs.mask * (obs.values - S)
    X, nuc_shrunk = _soft_threshold(Y, mu * step)
    r = obs.mask * (obs.values - X)
    return X, float(np.sum(r * r) + mu * nuc_shrunk)


def _svt_plain(obs, cfg, S, mu):
    step = cfg.delta / 2.0
    f = completion_objective(S, obs, mu)
    best, f_best = S, f
    trace = [f]
    converged = False
    for it in range(1, cfg.max_iter + 1):
        S_new, f_new = _prox_step(S, obs, mu, step)
        change = np.linalg.norm(S_new - S)
        scale = max(np.linalg.norm(S), np.linalg.norm(S_new), 1e-300)
        S = S_new
        if f_new <= f_best:
            best, f_best = S_new, f_new
        trace.append(f_best)
        if change <= cfg.tol * scale:
            converged = True
            break
    return SvtResult(best, converged, it, trace)


def _svt_accelerated(obs, cfg, S, mu, max_iter, tol):
    # monotone FISTA (Beck & Teboulle); step 1/L with L = 2 for the data term
    step = min(cfg.delta, 1.0) / 2.0
    x = S
    fx = completion_objective(x, obs, mu)
    x_prev = x
    y = x
    t = 1.0
    trace = [fx]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z, fz = _prox_step(y, obs, mu, step)
        x_prev = x
        if fz <= fx:
            x, fx = z, fz
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        trace.append(fx)
        change = np.linalg.norm(z - x_prev)
        if it > 2 and change <= tol * max(np.linalg.norm(x), 1e-300):
            converged = True
            break
    return SvtResult(x, converged, it, trace)


# --------------------------------------------------------------------------
# non-negative least squares
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NnlsProblem:
    """``min ||design @ x - target||^2`` subject to ``x >= 0``."""

    design: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        A = _require_finite("design", self.design)
        b = _require_finite("target", self.target).ravel()
        if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
            raise InvalidInputError("design must be a non-empty matrix")
        if b.shape[0] != A.shape[0]:
            raise InvalidInputError("target length must match design rows")
        object.__setattr__(self, "design", A)
        object.__setattr__(self, "target", b)


def _dependent_columns(A, rtol=1e-10):
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return list(range(A.shape[1]))
    rank = int(np.sum(d > rtol * d[0]))
    return sorted(int(c) for c in piv[rank:]) + sorted(int(c) for c in piv[len(d):])


def nnls_solve(p, method="single", tol=1e-8, on_degenerate="raise"):
    """Solve a non-negative least-squares problem by principal pivoting.

    Parameters
    ----------
    p : NnlsProblem
    method : {"single", "block"}
        ``"single"`` exchanges one variable per pivot (Murty's rule, finite
        termination). ``"block"`` exchanges every infeasible variable at
        once and falls back to single pivots if that stalls.
    tol : float
        KKT tolerance on the gradient normalized by ``||A^T b||``.
    on_degenerate : {"raise", "ridge"}
        Rank-deficient designs raise :class:`DegenerateProblemError` naming
        the dependent columns, or get a ``1e-12 * trace / n`` ridge with a
        warning.
    """
    A, b = p.design, p.target
    dep = _dependent_columns(A)
    G = A.T @ A
    h = A.T @ b
    if dep:
        if on_degenerate == "raise":
            raise DegenerateProblemError(f"design is rank deficient in columns {dep}", dep)
        warnings.warn(f"rank-deficient NNLS design (columns {dep}); adding a tiny ridge",
                      RuntimeWarning, stacklevel=2)
        G = G + 1e-12 * max(np.trace(G), 1e-300) / G.shape[0] * np.eye(G.shape[0])
    return nnls_gram(G, h, method=method, tol=tol)


def nnls_gram(G, h, method="single", tol=1e-8, max_iter=None):
    """Principal pivoting on the normal equations ``G x = h``, ``x >= 0``.

    ``G`` must be symmetric positive definite. The returned ``x`` satisfies
    the complementarity conditions ``x >= 0``, ``y = G x - h >= 0`` on the
    zero set and ``y = 0`` on the support, up to ``tol * ||h||``.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float).ravel()
    n = h.size
    scale = max(np.linalg.norm(h), np.finfo(float).tiny)
    thr = tol * scale
    free = np.zeros(n, dtype=bool)
    max_iter = max_iter or 50 * (n + 1) ** 2
    budget, best_infeasible = 3, n + 1
    x = np.zeros(n)
    for _ in range(max_iter):
        x = np.zeros(n)
        if free.any():
            x[free] = scipy.linalg.solve(G[np.ix_(free, free)], h[free], assume_a="pos")
        y = G @ x - h
        y[free] = 0.0
        bad = (free & (x < -thr)) | (~free & (y < -thr))
        if not bad.any():
            x[free] = np.maximum(x[free], 0.0)
            return x
        n_bad = int(bad.sum())
        if method == "block":
            if n_bad < best_infeasible:
                best_infeasible, budget = n_bad, 3
                free ^= bad
                continue
            if budget > 0:
                budget -= 1
                free ^= bad
                continue
        j = int(np.flatnonzero(bad)[-1])
        free[j] = ~free[j]
    raise RuntimeError("principal pivoting did not terminate")


def nnls_gram_sum_constrained(G, h, groups, totals, tol=1e-8, max_iter=None):
    """``min 0.5 x^T G x - h^T x`` with ``x >= 0`` and fixed group sums.

    ``groups`` is an integer label per variable; every label ``g`` gets the
    equality ``sum(x[groups == g]) == totals[g]`` with ``totals[g] > 0``.
    Solved by a primal active-set method started from the feasible point
    that spreads each total evenly over its group.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float).ravel()
    groups = np.asarray(groups)
    labels = np.unique(groups)
    totals = np.asarray(totals, dtype=float)
    if np.any(totals <= 0):
        raise InvalidInputError("group totals must be positive")
    n = h.size
    E = np.stack([(groups == g).astype(float) for g in labels])
    x = np.zeros(n)
    for gi, g in enumerate(labels):
        idx = groups == g
        x[idx] = totals[gi] / idx.sum()
    free = np.ones(n, dtype=bool)
    scale = max(np.linalg.norm(h), np.linalg.norm(G @ x), np.finfo(float).tiny)
    thr = tol * scale
    max_iter = max_iter or 50 * (n + 1) ** 2
    ne = E.shape[0]
    for _ in range(max_iter):
        F = np.flatnonzero(free)
        Ef = E[:, F]
        kkt = np.zeros((F.size + ne, F.size + ne))
        kkt[: F.size, : F.size] = G[np.ix_(F, F)]
        kkt[: F.size, F.size:] = Ef.T
        kkt[F.size:, : F.size] = Ef
        rhs = np.concatenate([h[F], totals])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        target = np.zeros(n)
        target[F] = sol[: F.size]
        lam = sol[F.size:]
        if np.all(target[F] >= -thr * 1e-3):
            x = np.where(free, np.maximum(target, 0.0), 0.0)
            # multipliers of the bounds on the zero set
            grad = G @ x - h + E.T @ lam
            blocked = (~free) & (grad < -thr)
            if not blocked.any():
                return x
            j = int(np.flatnonzero(blocked)[np.argmin(grad[blocked])])
            free[j] = True
            continue
        # step towards the target until a free variable hits zero
        d = target - x
        neg = free & (d < 0)
        ratios = np.where(neg, x / np.where(neg, -d, 1.0), np.inf)
        j = int(np.argmin(ratios))
        alpha = min(max(ratios[j], 0.0), 1.0)
        x = x + alpha * d
        x[j] = 0.0
        free[j] = False
        x = np.where(free, np.maximum(x, 0.0), 0.0)
    raise RuntimeError("active-set NNLS did not terminate")


def masked_nmf(Y, mask, rank, n_iter=500, seed=0):
    """Nonnegative factorization ``Y ~ A @ B`` fitted on masked entries only.

    Multiplicative updates for ``sum_{mask} (Y - A B)^2`` with a seeded
    uniform start. Negative observations are clipped to zero. Returns
    ``(A, B)`` with shapes ``(n_rows, rank)`` and ``(rank, n_cols)``.
    """
    Y = _require_finite("Y", np.where(mask, Y, 0.0))
    W = np.asarray(mask, dtype=float)
    if Y.shape != W.shape or Y.ndim != 2:
        raise InvalidInputError("Y and mask must be matrices of equal shape")
    Y = np.maximum(Y, 0.0) * W
    rng = np.random.default_rng(seed)
    level = np.sqrt(max(Y.sum(), np.finfo(float).tiny) / max(W.sum(), 1.0) / rank)
    A = rng.uniform(0.5, 1.5, size=(Y.shape[0], rank)) * level
    B = rng.uniform(0.5, 1.5, size=(rank, Y.shape[1])) * level
    tiny = 1e-300
    for _ in range(n_iter):
        A *= (Y @ B.T) / ((W * (A @ B)) @ B.T + tiny)
        B *= (A.T @ Y) / (A.T @ (W * (A @ B)) + tiny)
    return A, B


# --------------------------------------------------------------------------
# weighted least squares
# --------------------------------------------------------------------------


def ridge_weighted_ls(design, weights, target, ridge=0.0):
    """Weighted ridge regression via a QR factorization.

    Returns ``argmin_x ||diag(sqrt(w)) (target - design x)||^2 + x^T R x`` where
    ``R`` is ``diag(ridge)`` (scalar or vector) or a full PSD matrix.
    """
    A = _require_finite("design", design)
    w = _require_finite("weights", weights).ravel()
    y = _require_finite("target", target).ravel()
    if A.ndim != 2 or A.shape[0] != w.size or w.size != y.size:
        raise InvalidInputError("inconsistent dimensions")
    if np.any(w < 0):
        raise InvalidInputError("weights must be non-negative")
    n = A.shape[1]
    R = np.asarray(ridge, dtype=float)
    if R.ndim == 0:
        R = np.full(n, float(R))
    if R.ndim == 1:
        if np.any(R < 0):
            raise InvalidInputError("ridge must be non-negative")
        root = np.diag(np.sqrt(R))
    else:
        evals, evecs = np.linalg.eigh(0.5 * (R + R.T))
        if evals.min() < -1e-12 * max(abs(evals).max(), 1.0):
            raise InvalidInputError("ridge matrix must be positive semidefinite")
        root = (evecs * np.sqrt(np.maximum(evals, 0.0))).T
    sw = np.sqrt(w)
    aug = np.vstack([A * sw[:, None], root])
    rhs = np.concatenate([y * sw, np.zeros(root.shape[0])])
    Q, Rf = np.linalg.qr(aug)
    d = np.abs(np.diag(Rf))
    if d.size < n or d.min() <= 1e-13 * max(d.max(), np.finfo(float).tiny):
        normal = aug.T @ aug
        lo = float(np.linalg.eigvalsh(normal).min())
        raise ConditioningError(f"weighted normal matrix is singular (min eigenvalue {lo:.3e})", lo)
    return scipy.linalg.solve_triangular(Rf, Q.T @ rhs)
