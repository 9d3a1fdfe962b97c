"""Experiment configuration files (INI-style sections, ``key = value``).

Example::

    [problem]
    kernel = constant
    kernel_value = 0.45
    kappa = 20
    solution = bands
    bands = exp:0, cos:20, s2:-20

    [quadrature]
    Gamma = 2
    beta = 1
    gamma = 8
    q = 1

See ``presets/*.cfg`` for complete files.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import InvalidConfig
from .mgdl import STOPPING_MODES, AmgdlConfig, equal_width, varying_width
from .net import TrainConfig
from .operator import QuadratureConfig
from .problem import ExactSolutionSpec, KernelSpec, ProblemSpec

PRESETS = ("example1_paper", "example1_desk", "example2_paper", "example2_desk",
           "desk_kappa20", "desk_kappa50")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    oversample: int = 1
    preset: str = "equal"  # equal | varying | explicit
    width: int = 256
    widths: tuple = ()
    sgdl_depth: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    amgdl: AmgdlConfig = field(default_factory=AmgdlConfig)
    sweep_batch_size: tuple = ()
    sweep_lr_initial: tuple = ()
    seeds: tuple = (0,)
    output_dir: str = "runs"
    validation_points: int = 2048
    validation_seed: int = 0
    parallel: int | None = None

    def grade_widths(self):
        L = self.amgdl.max_grades
        if self.preset == "equal":
            return equal_width(self.width, L)
        if self.preset == "varying":
            return varying_width(L)
        if self.preset == "explicit":
            if not self.widths:
                raise InvalidConfig("explicit architecture needs widths")
            return tuple(self.widths)
        raise InvalidConfig(f"unknown architecture preset {self.preset!r}")

    def amgdl_config(self, batch_size=None, lr_initial=None, seed=None):
        train = self.train
        if batch_size is not None:
            train = replace(train, batch_size=batch_size)
        if lr_initial is not None:
            train = replace(train, lr_initial=lr_initial)
        if seed is not None:
            train = replace(train, seed=seed)
        return replace(self.amgdl, widths=self.grade_widths(), train=train)

    def sgdl_widths(self):
        depth = self.sgdl_depth or self.amgdl.max_grades
        return self.grade_widths()[:depth]

    def sweep_points(self):
        bss = self.sweep_batch_size or (self.train.batch_size,)
        lrs = self.sweep_lr_initial or (self.train.lr_initial,)
        return [(b, lr) for b in bss for lr in lrs]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _list(text, conv):
    text = (text or "").strip()
    if not text:
        return ()
    return tuple(conv(t.strip()) for t in text.split(","))


def _opt(sec, key, conv, default=None):
    raw = sec.get(key, fallback="").strip()
    return conv(raw) if raw else default


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"not a boolean: {text!r}")


def parse_config(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(f"malformed config: {exc}") from exc
    try:
        return _from_parser(cp)
    except (ValueError, KeyError) as exc:
        raise InvalidConfig(f"bad config value: {exc}") from exc


def _from_parser(cp):
    for name in ("problem",):
        if name not in cp:
            raise InvalidConfig(f"missing [{name}] section")
    P = cp["problem"]
    kind = P.get("kernel", "constant").strip()
    if kind == "constant":
        kernel = KernelSpec.constant(P.getfloat("kernel_value", 0.0))
    elif kind == "cosine_product":
        kernel = KernelSpec.cosine_product()
    elif kind == "custom":
        kernel = KernelSpec.custom(P.get("kernel_expr").strip())
    else:
        raise InvalidConfig(f"unknown kernel {kind!r}")

    sol = P.get("solution", "none").strip()
    top = _opt(P, "top_frequency", float)
    if sol == "example1":
        exact = ExactSolutionSpec.example1(top)
    elif sol == "example2":
        exact = ExactSolutionSpec.example2(_opt(P, "epsilon", float, 1.0), top)
    elif sol == "bands":
        def band(t):
            coef, freq = t.rsplit(":", 1)
            return (coef.strip(), float(freq))
        exact = ExactSolutionSpec.frequency_bands(_list(P.get("bands"), band))
    elif sol == "none":
        exact = ExactSolutionSpec.none()
    else:
        raise InvalidConfig(f"unknown solution {sol!r}")
    problem = ProblemSpec(kernel, P.getfloat("kappa"), exact)

    Q = cp["quadrature"] if "quadrature" in cp else {}
    quad = QuadratureConfig(
        Gamma=float(Q.get("Gamma", 2.0)),
        beta=float(Q.get("beta", 1.0)),
        gamma=float(Q.get("gamma", 8.0)),
        q=int(Q.get("q", 1)),
    ).validate()

    A = cp["architecture"] if "architecture" in cp else cp[cp.default_section]
    T = cp["train"] if "train" in cp else cp[cp.default_section]
    G = cp["amgdl"] if "amgdl" in cp else cp[cp.default_section]
    S = cp["sweep"] if "sweep" in cp else cp[cp.default_section]
    R = cp["run"] if "run" in cp else cp[cp.default_section]

    train = TrainConfig(
        epochs=int(T.get("epochs", 100)),
        batch_size=int(T.get("batch_size", 128)),
        lr_initial=float(T.get("lr_initial", 1e-2)),
        lr_final=float(T.get("lr_final", 1e-7)),
        beta1=float(T.get("beta1", 0.9)),
        beta2=float(T.get("beta2", 0.999)),
        eps_adam=float(T.get("eps_adam", 1e-8)),
        seed=int(T.get("seed", 0)),
    )
    stopping = G.get("stopping", "validation_plateau").strip()
    if stopping not in STOPPING_MODES:
        raise InvalidConfig(f"stopping must be one of {STOPPING_MODES}")
    amgdl = AmgdlConfig(
        max_grades=int(G.get("max_grades", 12)),
        min_grades=int(G.get("min_grades", 1)),
        tolerance=_opt(G, "tolerance", float),
        stopping=stopping,
        widths=(1,),  # replaced by the architecture preset
        train=train,
        refit_last_layer=_bool(G.get("refit_last_layer", "true")),
        omega0=float(T.get("omega0", 1.0)),
        omega_hidden=float(T.get("omega_hidden", 1.0)),
        epochs_per_grade=_list(T.get("epochs_per_grade", ""), int) or None,
        eval_every=int(T.get("eval_every", 10)),
    )
    cfg = ExperimentConfig(
        problem=problem,
        quadrature=quad,
        oversample=int(P.get("oversample", 1)),
        preset=A.get("preset", "equal").strip(),
        width=int(A.get("width", 256)),
        widths=_list(A.get("widths", ""), int),
        sgdl_depth=_opt(A, "sgdl_depth", int),
        train=train,
        amgdl=amgdl,
        sweep_batch_size=_list(S.get("batch_size", ""), int),
        sweep_lr_initial=_list(S.get("lr_initial", ""), float),
        seeds=_list(R.get("seeds", "0"), int) or (0,),
        output_dir=R.get("output_dir", "runs").strip(),
        validation_points=int(R.get("validation_points", 2048)),
        validation_seed=int(R.get("validation_seed", 0)),
        parallel=_opt(R, "parallel", int),
    )
    cfg.grade_widths()  # resolve the preset now so errors surface at load
    return replace(cfg, amgdl=replace(amgdl, widths=cfg.grade_widths()))


def _num(v):
    return repr(float(v))


def dump_config(cfg):
    """Serialize ``cfg``; ``parse_config(dump_config(cfg)) == cfg``."""
    p = cfg.problem
    lines = ["[problem]"]
    k = p.kernel
    lines.append(f"kernel = {k.kind}")
    if k.kind == "constant":
        lines.append(f"kernel_value = {_num(k.value)}")
    if k.kind == "custom":
        lines.append(f"kernel_expr = {k.expr}")
    lines.append(f"kappa = {_num(p.kappa)}")
    ex = p.exact
    lines.append(f"solution = {ex.kind}")
    if ex.kind == "example2":
        lines.append(f"epsilon = {_num(ex.epsilon)}")
    if ex.kind in ("example1", "example2") and ex.top_frequency is not None:
        lines.append(f"top_frequency = {_num(ex.top_frequency)}")
    if ex.kind == "bands":
        lines.append("bands = " + ", ".join(f"{c}:{_num(w)}" for c, w in ex.bands))
    lines.append(f"oversample = {cfg.oversample}")
    q = cfg.quadrature
    lines += ["", "[quadrature]", f"Gamma = {_num(q.Gamma)}", f"beta = {_num(q.beta)}",
              f"gamma = {_num(q.gamma)}", f"q = {q.q}"]
    lines += ["", "[architecture]", f"preset = {cfg.preset}", f"width = {cfg.width}"]
    if cfg.widths:
        lines.append("widths = " + ", ".join(str(w) for w in cfg.widths))
    if cfg.sgdl_depth is not None:
        lines.append(f"sgdl_depth = {cfg.sgdl_depth}")
    t, a = cfg.train, cfg.amgdl
    lines += ["", "[train]", f"epochs = {t.epochs}", f"batch_size = {t.batch_size}",
              f"lr_initial = {_num(t.lr_initial)}", f"lr_final = {_num(t.lr_final)}",
              f"beta1 = {_num(t.beta1)}", f"beta2 = {_num(t.beta2)}",
              f"eps_adam = {_num(t.eps_adam)}", f"seed = {t.seed}",
              f"omega0 = {_num(a.omega0)}", f"omega_hidden = {_num(a.omega_hidden)}",
              f"eval_every = {a.eval_every}"]
    if a.epochs_per_grade:
        lines.append("epochs_per_grade = " + ", ".join(str(e) for e in a.epochs_per_grade))
    lines += ["", "[amgdl]", f"max_grades = {a.max_grades}", f"min_grades = {a.min_grades}",
              f"stopping = {a.stopping}", f"refit_last_layer = {str(a.refit_last_layer).lower()}"]
    if a.tolerance is not None:
        lines.append(f"tolerance = {_num(a.tolerance)}")
    if cfg.sweep_batch_size or cfg.sweep_lr_initial:
        lines += ["", "[sweep]"]
        if cfg.sweep_batch_size:
            lines.append("batch_size = " + ", ".join(str(b) for b in cfg.sweep_batch_size))
        if cfg.sweep_lr_initial:
            lines.append("lr_initial = " + ", ".join(_num(v) for v in cfg.sweep_lr_initial))
    lines += ["", "[run]", "seeds = " + ", ".join(str(s) for s in cfg.seeds),
              f"output_dir = {cfg.output_dir}", f"validation_points = {cfg.validation_points}",
              f"validation_seed = {cfg.validation_seed}"]
    if cfg.parallel is not None:
        lines.append(f"parallel = {cfg.parallel}")
    return "\n".join(lines) + "\n"


def preset_text(name):
    return resources.files("oscidal.presets").joinpath(f"{name}.cfg").read_text()


def load_config(path_or_preset):
    """Load a config file, or a shipped preset by bare name."""
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config(path.read_text())
    name = path.name[:-4] if path.name.endswith(".cfg") else path.name
    if str(path_or_preset) in PRESETS or (name in PRESETS and not path.parent.name):
        return parse_config(preset_text(name))
    raise FileNotFoundError(f"no config file or preset named {path_or_preset!r}")
