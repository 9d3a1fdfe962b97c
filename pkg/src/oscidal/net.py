"""Small dense sine networks with hand-written reverse mode and Adam.

Everything is float64 numpy. A network maps ``(n, input_dim)`` inputs to
``(n, 2)`` outputs (real and imaginary channel) through sine-activated hidden
layers and a final affine layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CorruptCheckpoint, DimensionMismatch, InvalidConfig, NonFiniteLoss

CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LayerParams:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)

    @property
    def shape(self):
        return self.weights.shape

    def copy(self):
        return LayerParams(self.weights.copy(), self.biases.copy())


@dataclass(frozen=True)
class Architecture:
    """Hidden ``widths`` between ``input_dim`` inputs and two outputs."""

    widths: tuple
    input_dim: int = 1
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.output_dim != 2:
            raise InvalidConfig("networks emit exactly two channels (re, im)")
        if self.input_dim < 1 or any(w < 1 for w in self.widths):
            raise InvalidConfig(f"non-positive layer size in {self}")

    @property
    def dims(self):
        return (self.input_dim, *self.widths, self.output_dim)

    @property
    def feature_dim(self):
        return self.widths[-1] if self.widths else self.input_dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_initial: float = 1e-2
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.lr_final <= self.lr_initial):
            raise InvalidConfig("need 0 < lr_final <= lr_initial")


def lr_schedule(config, step, total_steps):
    """Learning rate of 0-based ``step`` out of ``total_steps``.

    Exponential interpolation from ``lr_initial`` (step 0) to ``lr_final``
    (the last step).
    """
    if total_steps <= 1:
        return config.lr_initial
    frac = step / (total_steps - 1)
    return config.lr_initial * (config.lr_final / config.lr_initial) ** frac


def init_params(arch, seed, omega0=1.0):
    """Fan-in uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``.

    The first layer is further multiplied by ``omega0`` so sine units can
    reach high frequencies of the input coordinate. Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    dims = arch.dims
    params = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if k == 0:
            w = w * omega0
        params.append(LayerParams(w, np.zeros(fan_out)))
    return params


def _check(params, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != params[0].weights.shape[1]:
        raise DimensionMismatch(
            f"input has {x.shape[1]} columns, first layer expects {params[0].weights.shape[1]}"
        )
    for a, b in zip(params, params[1:]):
        if b.weights.shape[1] != a.weights.shape[0]:
            raise DimensionMismatch("consecutive layer shapes do not chain")
    return x


def features(params, x):
    """Sine features of the hidden layers only (no output layer)."""
    h = _check(params, x) if params else np.asarray(x, dtype=float)
    for layer in params:
        h = np.sin(h @ layer.weights.T + layer.biases)
    return h


def forward(params, x):
    """Return ``(output, feature)`` for inputs ``x`` of shape ``(n, in)``.

    ``feature`` is the last hidden layer's activation (the input itself for
    a network without hidden layers).
    """
    x = _check(params, x)
    h = x
    for layer in params[:-1]:
        h = np.sin(h @ layer.weights.T + layer.biases)
    out = h @ params[-1].weights.T + params[-1].biases
    return out, h


def grad(loss, params, x, frozen=()):
    """Value and reverse-mode gradient of ``loss(forward(params, x)[0])``.

    ``loss`` maps the ``(n, out)`` output array to ``(value, d value/d output)``.
    Layers whose index is in ``frozen`` get exactly zero gradients.
    """
    x = _check(params, x)
    acts = [x]
    pre = []
    h = x
    for layer in params[:-1]:
        z = h @ layer.weights.T + layer.biases
        pre.append(z)
        h = np.sin(z)
        acts.append(h)
    out = h @ params[-1].weights.T + params[-1].biases
    value, d = loss(out)
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    grads = [None] * len(params)
    for k in range(len(params) - 1, -1, -1):
        a = acts[k]
        if k in frozen:
            grads[k] = LayerParams(np.zeros_like(params[k].weights), np.zeros_like(params[k].biases))
        else:
            grads[k] = LayerParams(d.T @ a, d.sum(axis=0))
        if k == 0:
            break
        if all(j in frozen for j in range(k)):
            # nothing below needs a gradient
            for j in range(k):
                grads[j] = LayerParams(np.zeros_like(params[j].weights), np.zeros_like(params[j].biases))
            break
        d = (d @ params[k].weights) * np.cos(pre[k - 1])
    return value, grads


class Adam:
    """Adam with bias correction; one mutable state per trainer."""

    def __init__(self, params, config, total_steps, frozen=()):
        self.config = config
        self.total_steps = total_steps
        self.frozen = frozenset(frozen)
        self.t = 0
        self.m = [LayerParams(np.zeros_like(p.weights), np.zeros_like(p.biases)) for p in params]
        self.v = [LayerParams(np.zeros_like(p.weights), np.zeros_like(p.biases)) for p in params]

    def step(self, params, grads):
        """Apply one update and return the new parameter list."""
        c = self.config
        self.t += 1
        lr = lr_schedule(c, self.t - 1, self.total_steps)
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        new = []
        for k, (p, g) in enumerate(zip(params, grads)):
            if k in self.frozen:
                new.append(p)
                continue
            upd = []
            for name in ("weights", "biases"):
                pv, gv = getattr(p, name), getattr(g, name)
                m = getattr(self.m[k], name)
                v = getattr(self.v[k], name)
                m *= c.beta1
                m += (1.0 - c.beta1) * gv
                v *= c.beta2
                v += (1.0 - c.beta2) * gv * gv
                upd.append(pv - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps_adam))
            new.append(LayerParams(*upd))
        return new


def adam_step(state, params, grads):
    """Functional alias for :meth:`Adam.step`."""
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _param_digest(layers):
    h = hashlib.sha256()
    for layer in layers:
        h.update(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return h.hexdigest()


def checkpoint_dict(layers, omega0, seed, extra=None):
    doc = {
        "format": "oscidal-checkpoint",
        "version": CHECKPOINT_VERSION,
        "architecture": [list(layer.weights.shape) for layer in layers],
        "omega0": omega0,
        "seed": seed,
        "layers": [
            {
                "shape": list(layer.weights.shape),
                "weights": layer.weights.ravel().tolist(),
                "biases": layer.biases.tolist(),
            }
            for layer in layers
        ],
        "sha256": _param_digest(layers),
    }
    if extra:
        doc["extra"] = extra
    return doc


def dumps_checkpoint(layers, omega0, seed, extra=None):
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(checkpoint_dict(layers, omega0, seed, extra), indent=1) + "\n"


def loads_checkpoint(text):
    """Parse a checkpoint; returns ``(layers, meta)``."""
    try:
        doc = json.loads(text)
        if doc.get("format") != "oscidal-checkpoint":
            raise CorruptCheckpoint("not an oscidal checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {doc.get('version')}")
        layers = []
        for entry in doc["layers"]:
            out, inp = entry["shape"]
            w = np.array(entry["weights"], dtype=float).reshape(out, inp)
            b = np.array(entry["biases"], dtype=float).reshape(out)
            layers.append(LayerParams(w, b))
    except CorruptCheckpoint:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from exc
    if _param_digest(layers) != doc.get("sha256"):
        raise CorruptCheckpoint("checkpoint parameters fail their checksum")
    meta = {k: doc.get(k) for k in ("omega0", "seed", "architecture", "extra")}
    return layers, meta
