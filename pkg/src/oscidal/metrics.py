"""Error measures, norm estimates and the two-sided error bound check."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NoConvergence, NoneSolution, ZeroDenominator

__all__ = [
    "BoundReport",
    "discrete_seminorm",
    "relative_l2_error",
    "spectrum_relative_error",
    "operator_norm_estimate",
    "inverse_norm_estimate",
    "condition_estimate",
    "verify_bounds",
    "RE_POINTS",
    "SPECTRUM_POINTS",
]

RE_POINTS = 20000
SPECTRUM_POINTS = 20001


def _values(g):
    return g.values if hasattr(g, "values") else np.asarray(g, dtype=complex)


def discrete_seminorm(g):
    """``sqrt(mean |g(x_j)|^2)`` over the samples of ``g``."""
    a = np.abs(_values(g))
    m = a.max(initial=0.0)
    if m == 0.0 or not math.isfinite(m):
        return float(m)
    # scale first so tiny or huge samples neither underflow nor overflow
    return float(m * math.sqrt(np.mean((a / m) ** 2)))


def re_grid(l=RE_POINTS):
    return -1.0 + 2.0 * np.arange(l + 1) / l


def relative_l2_error(y_exact, y_approx, l=RE_POINTS):
    """Trapezoid-weighted relative L2 error on ``s_j = -1 + 2j/l``.

    ``y_exact`` and ``y_approx`` are callables on point arrays or arrays
    already sampled on that grid.
    """
    s = re_grid(l)
    ye = np.asarray(y_exact(s) if callable(y_exact) else y_exact, dtype=complex)
    ya = np.asarray(y_approx(s) if callable(y_approx) else y_approx, dtype=complex)
    w = np.full(l + 1, 2.0)
    w[0] = w[-1] = 1.0
    den = np.sum(w * np.abs(ye) ** 2)
    if den == 0.0:
        raise ZeroDenominator("exact solution vanishes on the evaluation grid")
    return float(math.sqrt(np.sum(w * np.abs(ye - ya) ** 2) / den))


def spectrum_grid(n=SPECTRUM_POINTS):
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


@dataclass
class Spectrum:
    freq: np.ndarray  # angular frequency of each bin, ascending
    rel_err: np.ndarray  # nan where undefined
    defined: np.ndarray  # bool
    exact_amplitude: np.ndarray


def spectrum_relative_error(y_exact, y_approx, n=SPECTRUM_POINTS, floor=1e-14):
    """Per-frequency relative error ``|F y - F Y| / |F y|``.

    Both functions are sampled at ``n`` uniform points of ``[-1, 1]`` and
    transformed with the DFT; bins are returned in ascending angular
    frequency ``2 pi k / (n * ds)``. Bins whose exact amplitude is below
    ``floor * max`` are flagged undefined (``rel_err`` is nan there).
    """
    s = spectrum_grid(n)
    ye = np.asarray(y_exact(s) if callable(y_exact) else y_exact, dtype=complex)
    ya = np.asarray(y_approx(s) if callable(y_approx) else y_approx, dtype=complex)
    Fe = np.fft.fftshift(np.fft.fft(ye))
    Fd = np.fft.fftshift(np.fft.fft(ye - ya))
    ds = 2.0 / (n - 1)
    freq = np.fft.fftshift(np.fft.fftfreq(n, d=ds)) * 2.0 * math.pi
    amp = np.abs(Fe)
    defined = amp >= floor * amp.max()
    rel = np.full(n, np.nan)
    rel[defined] = np.abs(Fd[defined]) / amp[defined]
    return Spectrum(freq, rel, defined, amp)


def _power(apply, n, tol, max_iter, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = apply(v)
        lam = np.linalg.norm(w)
        if lam == 0.0:
            return 0.0, True
        v = w / lam
        new = math.sqrt(lam)
        if abs(new - est) <= tol * new:
            return new, True
        est = new
    return est, False


def operator_norm_estimate(M, tol=1e-8, max_iter=5000, seed=0):
    """Largest singular value by power iteration on ``M^H M``.

    Raises :class:`NoConvergence` (carrying the estimate) at the cap.
    """
    A = M.entries if hasattr(M, "entries") else np.asarray(M, dtype=complex)
    est, ok = _power(lambda v: A.conj().T @ (A @ v), A.shape[0], tol, max_iter, seed)
    if not ok:
        raise NoConvergence("operator norm power iteration hit max_iter", est)
    return est


def inverse_norm_estimate(M, tol=1e-8, max_iter=5000, seed=0):
    """``||M^{-1}||_2`` by power iteration on ``M^{-H} M^{-1}`` (LU solves)."""
    if not hasattr(M, "solve"):
        from .operator import OperatorMatrix

        M = OperatorMatrix(np.asarray(M, dtype=complex), omega=None)
    est, ok = _power(lambda v: M.solve_adjoint(M.solve(v)), M.n, tol, max_iter, seed)
    if not ok:
        raise NoConvergence("inverse norm power iteration hit max_iter", est)
    return est


def condition_estimate(M, **kw):
    return operator_norm_estimate(M, **kw) * inverse_norm_estimate(M, **kw)


@dataclass
class BoundReport:
    grade: int
    residual_norm: float
    R_hat: float
    norm_M: float
    norm_M_inv: float
    lower: float
    upper: float
    measured_error: float
    lower_ok: bool
    upper_ok: bool

    def as_row(self):
        return asdict(self)


def bound_report(grade, residual_norm, R_hat, norm_M, norm_M_inv, measured):
    safe = 2.0 * R_hat
    lower = max(residual_norm - safe, 0.0) / norm_M
    upper = norm_M_inv * (residual_norm + safe)
    return BoundReport(grade, residual_norm, R_hat, norm_M, norm_M_inv, lower, upper,
                       measured, lower <= measured, measured <= upper)


def verify_bounds(run, problem, op, M, R_hat=None, norm_M=None, norm_M_inv=None):
    """Check ``lower <= ||y - y_l||_N <= upper`` for every grade of ``run``.

    ``run`` needs ``grades`` whose records carry ``residual_norm`` and the
    accumulated solution on the collocation grid (``y_grid``). Failures of
    the lower bound are reported, not raised: with the refinement surrogate
    for the quadrature error the lower bound is only heuristic.
    """
    from .operator import estimate_quadrature_error

    if problem.exact.kind == "none":
        raise NoneSolution("bound verification needs a manufactured solution")
    from .problem import exact_values

    if R_hat is None:
        R_hat = estimate_quadrature_error(problem, op.config)
    if norm_M is None:
        norm_M = operator_norm_estimate(M)
    if norm_M_inv is None:
        norm_M_inv = inverse_norm_estimate(M)
    y = exact_values(problem.exact, op.grid)
    reports = []
    for rec in run.grades:
        measured = discrete_seminorm(y - rec.y_grid)
        reports.append(bound_report(rec.grade, rec.residual_norm, R_hat, norm_M, norm_M_inv, measured))
    return reports
