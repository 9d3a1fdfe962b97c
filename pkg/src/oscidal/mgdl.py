"""Grade-by-grade training against the discrete operator residual.

A grade is a one-hidden-layer sine network fed with the frozen feature map of
the previous grade (the raw coordinate for grade 1). Its complexified output
``T f_l`` is added to the accumulated solution, and the next grade fits the
operator residual ``e_l = f - M y_l``. After Adam the output layer can be
re-solved exactly by linear least squares, which makes the residual norm
non-increasing from grade to grade.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import InvalidConfig, NonFiniteLoss
from .metrics import discrete_seminorm, re_grid, relative_l2_error
from .net import Adam, Architecture, LayerParams, TrainConfig, forward, grad, init_params
from .operator import DiscreteOperator, assemble_matrix, trapezoid_matrix
from .problem import compute_rhs, exact_values

log = logging.getLogger(__name__)

VALIDATION_POINTS = 2048
STOPPING_MODES = ("tolerance", "validation_plateau", "train_plateau")


def equal_width(width, grades):
    return (int(width),) * grades


def varying_width(grades):
    """Widths ``a_j = 200 + 100 * ceil(j/2)`` for ``j = 1..grades``."""
    return tuple(200 + 100 * math.ceil(j / 2) for j in range(1, grades + 1))


@dataclass(frozen=True)
class AmgdlConfig:
    max_grades: int = 12
    min_grades: int = 1
    tolerance: float | None = None
    stopping: str = "validation_plateau"
    widths: tuple = (256,)
    train: TrainConfig = field(default_factory=TrainConfig)
    refit_last_layer: bool = True
    omega0: float = 1.0
    omega_hidden: float = 1.0
    epochs_per_grade: tuple | None = None
    eval_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.epochs_per_grade is not None:
            object.__setattr__(self, "epochs_per_grade", tuple(int(e) for e in self.epochs_per_grade))
        if self.stopping not in STOPPING_MODES:
            raise InvalidConfig(f"stopping must be one of {STOPPING_MODES}")
        if not (1 <= self.min_grades <= self.max_grades):
            raise InvalidConfig("need 1 <= min_grades <= max_grades")
        if not self.widths:
            raise InvalidConfig("at least one grade width is required")
        if self.stopping == "tolerance" and not (self.tolerance and self.tolerance > 0):
            raise InvalidConfig("tolerance stopping needs tolerance > 0")

    def width(self, grade):
        return self.widths[min(grade, len(self.widths)) - 1]

    def train_config(self, grade):
        if self.epochs_per_grade:
            e = self.epochs_per_grade[min(grade, len(self.epochs_per_grade)) - 1]
            return replace(self.train, epochs=e)
        return self.train


# ---------------------------------------------------------------------------
# discretized data shared by every grade
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Discretization:
    """Operator, matrix and sampled right-hand sides for one problem."""

    problem: object
    op: DiscreteOperator
    M: object
    f: np.ndarray  # on the collocation grid
    x_val: np.ndarray
    f_val: np.ndarray
    K_val: np.ndarray  # trapezoid rows at validation points
    y_exact: np.ndarray | None = None

    @property
    def grid(self):
        return self.op.grid

    @property
    def n(self):
        return self.op.n

    def val_residual_delta(self, z_grid, z_val):
        """Change of the validation residual when ``z`` is added to ``Y``."""
        q = self.op.config.q
        return z_val - self.K_val @ z_grid[::q]


def prepare(problem, quad_config, n_val=VALIDATION_POINTS, val_seed=0, oversample=1,
            use_cache=True):
    """Assemble ``M`` and sample ``f`` on training and validation points.

    Validation points are ``n_val`` seeded uniform draws on ``I``, sorted.
    """
    op = DiscreteOperator.build(problem, quad_config)
    M = assemble_matrix(op)
    f = compute_rhs(problem, op.grid, oversample, use_cache=use_cache).values
    rng = np.random.default_rng([val_seed, 2048])
    x_val = np.unique(rng.uniform(-1.0, 1.0, n_val))
    f_val = compute_rhs(problem, x_val, oversample, use_cache=use_cache).values
    K_val = op.rows(x_val)
    y_exact = exact_values(problem.exact, op.grid)
    return Discretization(problem, op, M, f, x_val, f_val, K_val, y_exact)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GradeRecord:
    grade: int
    hidden_params: list
    head_params: LayerParams
    frozen: bool
    train_loss: float
    val_loss: float
    residual_norm: float
    wall_seconds: float
    adam_loss: float = float("nan")
    history: dict = field(default_factory=dict)
    y_grid: np.ndarray | None = None
    re: float | None = None


@dataclass(eq=False)
class TrainingRun:
    method: str
    seed: int
    grades: list = field(default_factory=list)
    selected: int = 0
    stop_reason: str = ""
    threshold: float | None = None
    inverse_norm: float | None = None

    @property
    def final(self):
        return self.grades[self.selected - 1]

    def rows(self):
        """Per-grade summary rows (no timing, so they are reproducible)."""
        return [
            {
                "grade": r.grade,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "residual_norm": r.residual_norm,
                "RE": r.re,
            }
            for r in self.grades
        ]


# ---------------------------------------------------------------------------
# grade stack
# ---------------------------------------------------------------------------


class GradeStack:
    """Frozen hidden layers plus cached features, solution and residual.

    ``feat_*`` hold the current feature map on the collocation grid, the
    validation points and (when an exact solution exists) the RE grid.
    """

    def __init__(self, disc, track_re=True):
        self.disc = disc
        self.grades = []
        self.hidden = []
        self.feat_grid = disc.grid[:, None]
        self.feat_val = disc.x_val[:, None]
        self.y_grid = np.zeros(disc.n, dtype=complex)
        self.y_val = np.zeros(len(disc.x_val), dtype=complex)
        self.e_grid = disc.f.copy()
        self.e_val = disc.f_val.copy()
        self.track_re = track_re and disc.problem.exact.kind != "none"
        if self.track_re:
            self.s_eval = re_grid()
            self.feat_eval = self.s_eval[:, None]
            self.y_eval = np.zeros(len(self.s_eval), dtype=complex)
            self.y_eval_exact = exact_values(disc.problem.exact, self.s_eval)

    @property
    def feature_dim(self):
        return self.feat_grid.shape[1]

    def residual_norm(self):
        return discrete_seminorm(self.e_grid)

    def append(self, record):
        """Freeze ``record``'s hidden layers and fold its head into the caches."""
        record.frozen = True
        layers = record.hidden_params
        hg = _hidden(layers, self.feat_grid)
        hv = _hidden(layers, self.feat_val)
        zg = _head(record.head_params, hg)
        zv = _head(record.head_params, hv)
        self.e_grid = self.e_grid - self.disc.M.entries @ zg
        self.e_val = self.e_val - self.disc.val_residual_delta(zg, zv)
        self.y_grid = self.y_grid + zg
        self.y_val = self.y_val + zv
        self.feat_grid, self.feat_val = hg, hv
        if self.track_re:
            he = _hidden(layers, self.feat_eval)
            self.y_eval = self.y_eval + _head(record.head_params, he)
            self.feat_eval = he
            record.re = relative_l2_error(self.y_eval_exact, self.y_eval)
        self.hidden.extend(layers)
        record.y_grid = self.y_grid.copy()
        self.grades.append(record)

    def rebuilt_residual(self):
        return self.disc.f - self.disc.M.entries @ self.y_grid

    def evaluate(self, points, upto=None):
        """Accumulated solution ``sum_j T f_j`` at arbitrary points."""
        feat = np.asarray(points, dtype=float)[:, None]
        y = np.zeros(len(feat), dtype=complex)
        for rec in self.grades[:upto]:
            feat = _hidden(rec.hidden_params, feat)
            y += _head(rec.head_params, feat)
        return y


def _hidden(layers, x):
    h = x
    for layer in layers:
        h = np.sin(h @ layer.weights.T + layer.biases)
    return h


def _head(layer, h):
    out = h @ layer.weights.T + layer.biases
    return out[:, 0] + 1j * out[:, 1]


def residual(stack, candidate, rows=None):
    """``e_prev - M T(candidate)`` restricted to ``rows`` (all by default)."""
    from .errors import GridMismatch

    z = candidate.values if hasattr(candidate, "values") else np.asarray(candidate, dtype=complex)
    if len(z) != stack.disc.n:
        raise GridMismatch(f"candidate has {len(z)} samples, grid has {stack.disc.n}")
    if rows is None:
        return stack.e_grid - stack.disc.M.entries @ z
    rows = np.asarray(rows)
    return stack.e_grid[rows] - stack.disc.M.entries[rows] @ z


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def _fit(params, inputs, target, M, config, grade_seed, val_fn=None, eval_every=10):
    """Mini-batch Adam on ``mean_B |target_B - M_B T N(inputs)|^2``.

    Returns the trained parameters and a per-epoch history.
    """
    n = len(target)
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = config.epochs * steps_per_epoch
    adam = Adam(params, config, total)
    rng = np.random.default_rng([config.seed, grade_seed, 1])
    Mfull = M.entries
    hist = {"epoch": [], "train": [], "val": []}

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        acc = 0.0
        for k in range(steps_per_epoch):
            idx = perm[k * bs:(k + 1) * bs]
            rows = Mfull[idx]
            tgt = target[idx]

            def loss(out, rows=rows, tgt=tgt):
                z = out[:, 0] + 1j * out[:, 1]
                r = tgt - rows @ z
                gz = (-2.0 / len(tgt)) * (rows.conj().T @ r)
                return np.vdot(r, r).real / len(tgt), np.stack([gz.real, gz.imag], axis=1)

            value, g = grad(loss, params, inputs)
            params = adam.step(params, g)
            acc += value * len(idx)
        if val_fn is not None and ((epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs):
            hist["epoch"].append(epoch + 1)
            hist["train"].append(acc / n)
            hist["val"].append(val_fn(params))
    return params, hist


def refit_last_layer(M, target, feat):
    """Exact least-squares output layer for fixed features.

    Solves ``min_{W,b} ||target - M T(W feat + b)||_2`` over real ``W`` (2 x w)
    and ``b`` (2,) via the real/imaginary stacked system, using a pivoted-QR
    minimum-norm solve. Returns the new head.
    """
    Mm = M.entries if hasattr(M, "entries") else np.asarray(M)
    n, w = feat.shape
    phi = np.hstack([feat, np.ones((n, 1))])
    A = Mm @ phi
    S = np.block([[A.real, -A.imag], [A.imag, A.real]])
    rhs = np.concatenate([target.real, target.imag])
    coef, *_ = scipy.linalg.lstsq(S, rhs, lapack_driver="gelsy", check_finite=False)
    a, c = coef[: w + 1], coef[w + 1:]
    return LayerParams(np.vstack([a[:w], c[:w]]), np.array([a[w], c[w]]))


def train_grade(stack, width, config, refit=True, omega0=1.0, eval_every=10):
    """Train the next grade on the current residual; does not modify ``stack``.

    Call :meth:`GradeStack.append` to freeze the result.
    """
    disc = stack.disc
    grade = len(stack.grades) + 1
    arch = Architecture((width,), input_dim=stack.feature_dim)
    params = init_params(arch, [config.seed, grade, 0], omega0)
    params[-1] = LayerParams(np.zeros_like(params[-1].weights), np.zeros_like(params[-1].biases))
    t0 = time.perf_counter()

    def val_fn(p):
        out, _ = forward(p, stack.feat_val)
        zv = out[:, 0] + 1j * out[:, 1]
        zg_out, _ = forward(p, stack.feat_grid)
        zg = zg_out[:, 0] + 1j * zg_out[:, 1]
        r = stack.e_val - disc.val_residual_delta(zg, zv)
        return float(np.vdot(r, r).real / len(r))

    try:
        params, hist = _fit(params, stack.feat_grid, stack.e_grid, disc.M, config, grade,
                            val_fn=val_fn, eval_every=eval_every)
    except NonFiniteLoss as exc:
        raise NonFiniteLoss(f"grade {grade}: {exc}", partial={"grade": grade}) from exc

    hidden = params[:-1]
    head = params[-1]
    feat = _hidden(hidden, stack.feat_grid)
    adam_res = stack.e_grid - disc.M.entries @ _head(head, feat)
    adam_loss = float(np.vdot(adam_res, adam_res).real / disc.n)
    if refit:
        candidate = refit_last_layer(disc.M, stack.e_grid, feat)
        res = stack.e_grid - disc.M.entries @ _head(candidate, feat)
        loss = float(np.vdot(res, res).real / disc.n)
        prev = float(np.vdot(stack.e_grid, stack.e_grid).real / disc.n)
        # keep the exact-arithmetic guarantee under rounding
        zero = LayerParams(np.zeros_like(head.weights), np.zeros_like(head.biases))
        head, train_loss = min(((candidate, loss), (head, adam_loss), (zero, prev)),
                               key=lambda t: t[1])
    else:
        train_loss = adam_loss
    if not math.isfinite(train_loss):
        raise NonFiniteLoss(f"grade {grade}: non-finite loss", partial={"grade": grade})
    wall = time.perf_counter() - t0

    fv = _hidden(hidden, stack.feat_val)
    zv = _head(head, fv)
    zg = _head(head, feat)
    rv = stack.e_val - disc.val_residual_delta(zg, zv)
    val_loss = float(np.vdot(rv, rv).real / len(rv))
    return GradeRecord(
        grade=grade,
        hidden_params=[p.copy() for p in hidden],
        head_params=head.copy(),
        frozen=False,
        train_loss=train_loss,
        val_loss=val_loss,
        residual_norm=math.sqrt(train_loss),
        wall_seconds=wall,
        adam_loss=adam_loss,
        history=hist,
    )


def run_amgdl(disc, config, seed=None, inverse_norm=None, track_re=True):
    """Train grades until the configured stopping rule fires.

    ``tolerance`` stops once ``||e_l||_N <= tol / (2 ||M^-1||)``;
    ``validation_plateau`` / ``train_plateau`` stop the first time the
    validation (training) loss fails to decrease, ties included, and return
    the grade with the smallest such loss among grades ``>= min_grades``.
    Every mode stops at ``max_grades``.
    """
    if seed is not None:
        config = replace(config, train=replace(config.train, seed=seed))
    seed = config.train.seed
    stack = GradeStack(disc, track_re=track_re)
    run = TrainingRun("amgdl", seed)
    threshold = None
    if config.stopping == "tolerance":
        if inverse_norm is None:
            from .metrics import inverse_norm_estimate

            inverse_norm = inverse_norm_estimate(disc.M)
        threshold = config.tolerance / (2.0 * inverse_norm)
        run.threshold, run.inverse_norm = threshold, inverse_norm
    key = "val_loss" if config.stopping == "validation_plateau" else "train_loss"

    for grade in range(1, config.max_grades + 1):
        omega = config.omega0 if grade == 1 else config.omega_hidden
        try:
            rec = train_grade(stack, config.width(grade), config.train_config(grade),
                              refit=config.refit_last_layer, omega0=omega,
                              eval_every=config.eval_every)
        except NonFiniteLoss as exc:
            run.grades = stack.grades
            run.selected = len(stack.grades)
            run.stop_reason = "failed"
            raise NonFiniteLoss(str(exc), partial=run) from exc
        stack.append(rec)
        log.info("grade %d: train %.3e val %.3e RE %s (%.1fs)", grade, rec.train_loss,
                 rec.val_loss, rec.re, rec.wall_seconds)
        if grade < config.min_grades:
            continue
        if config.stopping == "tolerance":
            if rec.residual_norm <= threshold:
                run.stop_reason = "tolerance"
                run.selected = grade
                break
        elif grade > config.min_grades:
            prev = getattr(stack.grades[-2], key)
            if getattr(rec, key) >= prev:
                run.stop_reason = "plateau"
                break
    else:
        run.stop_reason = "max_grades"

    run.grades = stack.grades
    if not run.selected:
        if config.stopping == "tolerance":
            run.selected = len(stack.grades)
        else:
            eligible = stack.grades[config.min_grades - 1:]
            run.selected = min(eligible, key=lambda r: getattr(r, key)).grade
    run.stack = stack
    return run


def run_sgdl(disc, widths, config, omega0=1.0, omega_hidden=1.0, eval_every=10, track_re=True):
    """Single end-to-end network ``[1] -> widths -> [2]`` on the same loss."""
    widths = tuple(int(w) for w in widths)
    arch = Architecture(widths, input_dim=1)
    params = init_params(arch, [config.seed, 1, 0], omega0)
    for k in range(1, len(params) - 1):
        params[k] = LayerParams(params[k].weights * omega_hidden, params[k].biases)
    params[-1] = LayerParams(np.zeros_like(params[-1].weights), np.zeros_like(params[-1].biases))
    x = disc.grid[:, None]
    xv = disc.x_val[:, None]

    def val_fn(p):
        zv = _complex_out(p, xv)
        zg = _complex_out(p, x)
        r = disc.f_val - disc.val_residual_delta(zg, zv)
        return float(np.vdot(r, r).real / len(r))

    t0 = time.perf_counter()
    try:
        params, hist = _fit(params, x, disc.f, disc.M, config, 1, val_fn=val_fn, eval_every=eval_every)
    except NonFiniteLoss as exc:
        raise NonFiniteLoss(f"sgdl: {exc}", partial=TrainingRun("sgdl", config.seed)) from exc
    wall = time.perf_counter() - t0
    zg = _complex_out(params, x)
    res = disc.f - disc.M.entries @ zg
    loss = float(np.vdot(res, res).real / disc.n)
    val = val_fn(params)
    rec = GradeRecord(1, [p.copy() for p in params[:-1]], params[-1].copy(), True, loss, val,
                      math.sqrt(loss), wall, adam_loss=loss, history=hist, y_grid=zg)
    if track_re and disc.problem.exact.kind != "none":
        s = re_grid()
        rec.re = relative_l2_error(exact_values(disc.problem.exact, s), _complex_out(params, s[:, None]))
    run = TrainingRun("sgdl", config.seed, [rec], selected=1, stop_reason="single_grade")
    run.params = params
    return run


def _complex_out(params, x):
    out, _ = forward(params, x)
    return out[:, 0] + 1j * out[:, 1]
