"""Trapezoidal discretization of the oscillatory integral operator.

``K_p F(s) = sum_j w_j K(s, s_j) exp(i kappa |s - s_j|) F(s_j)`` on the
uniform nodes ``s_j = -1 + j h``, ``h = 2/p``, with trapezoid weights. On the
collocation grid ``x_j`` (``N = p q + 1`` points) the operator ``I - K_p`` is
the dense matrix ``M = I - B/p``.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import CorruptCheckpoint, GridMismatch, InvalidConfig, NoneSolution, SingularMatrix
from .problem import ComplexGridFunction, exact_values

__all__ = [
    "QuadratureConfig",
    "DiscreteOperator",
    "OperatorMatrix",
    "quad_node_count",
    "collocation_grid",
    "trapezoid_matrix",
    "apply_discrete_operator",
    "assemble_matrix",
    "reference_solve",
    "quadrature_error_bound",
    "estimate_quadrature_error",
    "write_matrix_dump",
    "read_matrix_dump",
]


@dataclass(frozen=True)
class QuadratureConfig:
    """Node-count parameters: ``p = ceil(gamma * kappa**beta)``, ``N = p q + 1``."""

    Gamma: float = 2.0
    beta: float = 1.0
    gamma: float = 8.0
    q: int = 1

    def validate(self):
        if self.Gamma < 0:
            raise InvalidConfig(f"Gamma must be >= 0, got {self.Gamma}")
        if self.beta < 1:
            raise InvalidConfig(f"beta must be >= 1, got {self.beta}")
        if self.gamma < self.Gamma + 3:
            raise InvalidConfig(
                f"gamma={self.gamma} violates gamma >= Gamma + 3 = {self.Gamma + 3}"
            )
        if int(self.q) != self.q or self.q < 1:
            raise InvalidConfig(f"q must be a positive integer, got {self.q}")
        return self


def quad_node_count(config, kappa):
    config.validate()
    if kappa < 1:
        raise InvalidConfig(f"wavenumber must be >= 1, got {kappa}")
    return int(math.ceil(config.gamma * kappa**config.beta))


def collocation_grid(p_kappa, q=1):
    n = p_kappa * q + 1
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def trapezoid_matrix(kernel, kappa, targets, nodes):
    """Rows ``x`` of the composite trapezoid operator acting on ``F(nodes)``."""
    targets = np.asarray(targets, dtype=float)
    nodes = np.asarray(nodes, dtype=float)
    p = len(nodes) - 1
    w = np.full(p + 1, 2.0 / p)
    w[0] = w[-1] = 1.0 / p
    d = targets[:, None] - nodes[None, :]
    return kernel(targets[:, None], nodes[None, :]) * np.exp(1j * kappa * np.abs(d)) * w


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    problem: object
    config: QuadratureConfig
    p_kappa: int
    quad_nodes: np.ndarray
    grid: np.ndarray

    @classmethod
    def build(cls, problem, config):
        p = quad_node_count(config, problem.kappa)
        grid = collocation_grid(p, config.q)
        # every q-th collocation point, so the subset relation is bit-exact
        nodes = grid[:: config.q].copy()
        grid.flags.writeable = False
        nodes.flags.writeable = False
        return cls(problem, config, p, nodes, grid)

    @classmethod
    def with_node_count(cls, problem, p_kappa, q=1):
        """Operator with an explicit node count, bypassing ``p = ceil(gamma kappa^beta)``.

        For cross-checks at node counts the parameter constraint cannot
        produce (e.g. ``p = 2``); ``config`` records ``gamma = p / kappa``.
        """
        p_kappa, q = int(p_kappa), int(q)
        if p_kappa < 1 or q < 1:
            raise InvalidConfig("node count and q must be positive")
        config = QuadratureConfig(Gamma=0.0, beta=1.0, gamma=p_kappa / problem.kappa, q=q)
        grid = collocation_grid(p_kappa, q)
        nodes = grid[::q].copy()
        grid.flags.writeable = False
        nodes.flags.writeable = False
        return cls(problem, config, p_kappa, nodes, grid)

    @property
    def h(self):
        return 2.0 / self.p_kappa

    @property
    def n(self):
        return len(self.grid)

    def rows(self, targets):
        return trapezoid_matrix(self.problem.kernel, self.problem.kappa, targets, self.quad_nodes)


def _quad_samples(op, F):
    nodes = F.nodes
    if len(nodes) == op.p_kappa + 1 and np.array_equal(nodes, op.quad_nodes):
        return F.values
    q = op.config.q
    if len(nodes) == op.n and np.array_equal(nodes[::q], op.quad_nodes):
        return F.values[::q]
    raise GridMismatch(f"{F.grid_id} is not sampled at the {op.p_kappa + 1} quadrature nodes")


def apply_discrete_operator(op, F, targets=None):
    """``(K_p F)(x)`` at ``targets`` (default: the collocation grid).

    ``F`` must be sampled on the quadrature nodes or on the full collocation
    grid; no interpolation is done.
    """
    fv = _quad_samples(op, F)
    targets = op.grid if targets is None else np.asarray(targets, dtype=float)
    return ComplexGridFunction.from_complex(targets, op.rows(targets) @ fv)


class OperatorMatrix:
    """Dense ``M = I - B/p`` with a lazily built, cached LU factorization."""

    def __init__(self, entries, omega, p_kappa=None, q=None):
        entries = np.ascontiguousarray(entries, dtype=complex)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("operator matrix must be square")
        entries.flags.writeable = False
        self.entries = entries
        self.omega = omega
        self.p_kappa = p_kappa
        self.q = q
        self._lu = None
        self._lock = threading.Lock()

    @property
    def n(self):
        return self.entries.shape[0]

    def __matmul__(self, v):
        return self.entries @ v

    def factorization(self):
        if self._lu is None:
            with self._lock:
                if self._lu is None:
                    with warnings.catch_warnings():
                        # exact-zero pivots are reported below as SingularMatrix
                        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                        lu, piv = scipy.linalg.lu_factor(self.entries, check_finite=True)
                    pivots = np.abs(np.diag(lu))
                    if pivots.min() <= self.n * np.finfo(float).eps * pivots.max():
                        raise SingularMatrix(
                            f"pivot {pivots.min():.3e} underflows; 1 is (numerically) "
                            "in the spectrum of the discrete operator"
                        )
                    self._lu = (lu, piv)
        return self._lu

    def solve(self, b):
        return scipy.linalg.lu_solve(self.factorization(), b)

    def solve_adjoint(self, b):
        """Solve ``M^H x = b``."""
        return scipy.linalg.lu_solve(self.factorization(), b, trans=2)


def assemble_matrix(op):
    p, q = op.p_kappa, op.config.q
    n = p * q + 1
    kappa = op.problem.kappa
    step = 2.0 * kappa / (q * p)
    omega = complex(np.exp(1j * step))
    cols = np.arange(0, n, q)  # 0-based l = d q, d = 0..p
    colw = np.full(len(cols), 2.0)
    colw[0] = colw[-1] = 1.0
    j = np.arange(n)
    x = op.grid
    # omega**|j-l| = exp(i kappa |x_j - x_l|) on the uniform grid
    phase = np.exp(1j * step * np.abs(j[:, None] - cols[None, :]))
    B = np.zeros((n, n), dtype=complex)
    B[:, cols] = colw * op.problem.kernel(x[:, None], x[cols][None, :]) * phase
    M = np.eye(n, dtype=complex) - B / p
    return OperatorMatrix(M, omega, p_kappa=p, q=q)


def reference_solve(M, f):
    """Direct solution of ``M v_y = v_f`` by LU with partial pivoting."""
    if len(f) != M.n:
        raise GridMismatch(f"rhs has {len(f)} samples, matrix is {M.n}x{M.n}")
    return f.with_values(M.solve(f.values))


def quadrature_error_bound(tau_tilde, config, kappa, m):
    config.validate()
    g, b, G = config.gamma, config.beta, config.Gamma
    first = 132.0 * tau_tilde / (5.0 * g * kappa**b)
    second = 81.0 * tau_tilde * (G + 3.0) ** m / (5.0 * g**m * kappa ** (m * (b - 1.0)))
    return first + second


def estimate_quadrature_error(problem, config, kappa=None, refinement_factor=2):
    """Refinement surrogate ``||K_{r p} y - K_p y||_N`` on the collocation grid."""
    if problem.exact.kind == "none":
        raise NoneSolution("quadrature error estimate needs a manufactured solution")
    if refinement_factor < 2:
        raise InvalidConfig("refinement_factor must be >= 2")
    kappa = problem.kappa if kappa is None else float(kappa)
    p = quad_node_count(config, kappa)
    grid = collocation_grid(p, config.q)
    coarse = collocation_grid(p, 1)
    fine = collocation_grid(refinement_factor * p, 1)
    yc = exact_values(problem.exact, coarse)
    yf = exact_values(problem.exact, fine)
    diff = np.empty(len(grid), dtype=complex)
    chunk = max(1, 4_000_000 // len(fine))
    for lo in range(0, len(grid), chunk):
        x = grid[lo:lo + chunk]
        diff[lo:lo + chunk] = (trapezoid_matrix(problem.kernel, kappa, x, fine) @ yf
                               - trapezoid_matrix(problem.kernel, kappa, x, coarse) @ yc)
    return float(np.linalg.norm(diff) / math.sqrt(len(grid)))


_MAT_HEADER = struct.Struct("<8sIIQQ")
MATRIX_DUMP_MAGIC = b"OSCMAT\x00\x00"
MATRIX_DUMP_VERSION = 1


def write_matrix_dump(path, M):
    """Dump ``M`` as: magic, uint32 version, uint32 0, uint64 rows, uint64 cols,
    then row-major little-endian float64 ``(re, im)`` pairs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = M.entries if isinstance(M, OperatorMatrix) else np.asarray(M, dtype=complex)
    payload = np.empty(a.size * 2, dtype="<f8")
    payload[0::2] = a.real.ravel()
    payload[1::2] = a.imag.ravel()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(_MAT_HEADER.pack(MATRIX_DUMP_MAGIC, MATRIX_DUMP_VERSION, 0, *a.shape))
        fh.write(payload.tobytes())
    os.replace(tmp, path)


def read_matrix_dump(path):
    raw = Path(path).read_bytes()
    magic, version, _, rows, cols = _MAT_HEADER.unpack_from(raw)
    if magic != MATRIX_DUMP_MAGIC or version != MATRIX_DUMP_VERSION:
        raise CorruptCheckpoint(f"{path}: not a version-{MATRIX_DUMP_VERSION} matrix dump")
    body = raw[_MAT_HEADER.size:]
    if len(body) != 16 * rows * cols:
        raise CorruptCheckpoint(f"{path}: payload length mismatch")
    return np.frombuffer(body, dtype="<c16").astype(complex).reshape(rows, cols)
