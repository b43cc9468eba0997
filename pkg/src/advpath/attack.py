"""Projected gradient attacks: single-instance PGD and universal perturbations.

All budgets live on the 0-255 pixel scale.  Perturbed images are clamped to
``[0, 255]`` before every forward pass.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .exceptions import ConfigError, DataError, DimensionError
from .io import atomic_write_text, dumps_json, read_tensor, write_tensor
from .model import logits, predict
from .utils import check_image, check_images, make_rng

KINDS = ("L0", "L1", "L2", "Linf", "none")
_ALIASES = {"l0": "L0", "l1": "L1", "l2": "L2", "linf": "Linf", "l_inf": "Linf", "inf": "Linf",
            "none": "none", "unconstrained": "none"}

NONZERO_THRESHOLD = 1e-6


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str = "none"
    budget: float = 0.0

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"constraint kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        budget = float(self.budget)
        if not budget >= 0:
            raise ConfigError(f"constraint budget must be >= 0, got {self.budget}")
        if kind == "L0" and not 0 < budget <= 1:
            raise ConfigError(f"L0 budget is a pixel fraction in (0, 1], got {self.budget}")
        object.__setattr__(self, "budget", budget)

    @classmethod
    def unconstrained(cls):
        return cls("none", 0.0)


@dataclass
class AttackConfig:
    """PGD hyperparameters.

    ``step_size`` is the RMS size (in pixel units) of each normalized
    gradient step when ``normalize="rms"``; with ``normalize="none"`` the raw
    gradient is scaled by it.
    """

    step_size: float = 1.0
    max_steps: int = 500
    confidence: float = 0.9
    seed: int = 0
    normalize: str = "rms"
    epochs: int = 1

    def validate(self):
        problems = []
        if not self.step_size >= 0:
            problems.append(f"step size must be >= 0, got {self.step_size}")
        if int(self.max_steps) < 1:
            problems.append(f"max steps must be >= 1, got {self.max_steps}")
        if not 0.5 <= self.confidence < 1:
            problems.append(f"confidence threshold must lie in [0.5, 1), got {self.confidence}")
        if self.normalize not in ("rms", "none"):
            problems.append(f"normalize must be 'rms' or 'none', got {self.normalize!r}")
        if int(self.epochs) < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if problems:
            raise ConfigError(problems)
        return self


def energies(delta):
    """Perturbation size under the four readings used for budgets."""
    d = np.asarray(getattr(delta, "data", delta), dtype=np.float64)
    if d.size == 0:
        return {"mad": 0.0, "rmsd": 0.0, "linf": 0.0, "l0_fraction": 0.0}
    a = np.abs(d)
    if d.ndim == 3:
        changed = (a > NONZERO_THRESHOLD).any(axis=0)
    else:
        changed = a > NONZERO_THRESHOLD
    return {
        "mad": float(a.mean()),
        "rmsd": float(np.sqrt((d * d).mean())),
        "linf": float(a.max()),
        "l0_fraction": float(changed.mean()),
    }


@dataclass
class Perturbation:
    delta: np.ndarray
    energies: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_delta(cls, delta, **meta):
        delta = np.ascontiguousarray(np.asarray(delta, dtype=np.float32))
        return cls(delta, energies(delta), meta)

    def save(self, path):
        """Write ``path`` (ADVT1 tensor) plus a ``.json`` sidecar next to it."""
        path = Path(path)
        write_tensor(path, self.delta)
        record = {
            "kind": self.meta.get("kind", "none"),
            "budget": self.meta.get("budget", 0.0),
            "gamma": self.meta.get("gamma"),
            "steps": self.meta.get("steps"),
            "seed": self.meta.get("seed"),
            "energies": self.energies,
        }
        record.update({k: v for k, v in self.meta.items() if k not in record})
        atomic_write_text(path.with_suffix(".json"), dumps_json(record))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        delta = read_tensor(path)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
        meta.pop("energies", None)
        return cls.from_delta(delta, **meta)


@dataclass
class AttackResult:
    success: bool
    steps: int
    predicted: int
    confidence: float
    perturbation: Perturbation
    track: list = None


# ----------------------------------------------------------------------------
# primitive steps
# ----------------------------------------------------------------------------


def _arr(x):
    return np.asarray(getattr(x, "data", x))


def pgd_step(delta, grad, gamma):
    """One ascent step ``delta + gamma * grad``."""
    d, g = _arr(delta), _arr(grad)
    if d.shape != g.shape:
        raise DimensionError(f"pgd_step: delta {d.shape} and gradient {g.shape} differ")
    return d + d.dtype.type(gamma) * g


def _n_selected(c, n):
    # round first: 0.3 * 10 is 3.0000000000000004 in binary
    return min(n, max(1, math.ceil(round(c * n, 9))))


def _top_pixels(magnitude, k):
    order = np.argsort(-magnitude.reshape(-1), kind="stable")
    mask = np.zeros(magnitude.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(magnitude.shape)


def l0_mask(grad, c):
    """Binary ``[H,W]`` mask selecting the ``ceil(c*H*W)`` pixels with largest gradient.

    Pixel magnitude is the L2 norm of the gradient across channels; ties go
    to the earlier pixel in scan order.
    """
    g = _arr(grad)
    if g.ndim != 3:
        raise DimensionError(f"l0_mask expects a [C,H,W] gradient, got {g.shape}")
    if not 0 < c <= 1:
        raise ValueError(f"L0 fraction must lie in (0, 1], got {c}")
    mag = np.sqrt((g.astype(np.float64) ** 2).sum(axis=0))
    return _top_pixels(mag, _n_selected(c, mag.size)).astype(g.dtype)


def project(delta, constraint):
    """Map ``delta`` back into the constraint set (a new array)."""
    d = _arr(delta)
    kind, C = constraint.kind, constraint.budget
    if kind == "none":
        return d.copy()
    if kind == "Linf":
        return np.clip(d, -C, C).astype(d.dtype)
    if kind in ("L1", "L2"):
        d64 = d.astype(np.float64)
        size = np.abs(d64).mean() if kind == "L1" else np.sqrt((d64 * d64).mean())
        if size <= C:
            return d.copy()
        if C == 0:
            return np.zeros_like(d)
        out = (d64 * (C / size)).astype(d.dtype)
        # float32 rounding can leave the statistic a hair above C
        stat = np.abs(out.astype(np.float64)).mean() if kind == "L1" else np.sqrt((out.astype(np.float64) ** 2).mean())
        if stat > C:
            out = (out.astype(np.float64) * (C / stat) * (1 - 1e-7)).astype(d.dtype)
        return out
    if kind == "L0":
        if d.ndim != 3:
            raise DimensionError(f"L0 projection expects a [C,H,W] perturbation, got {d.shape}")
        mag = np.sqrt((d.astype(np.float64) ** 2).sum(axis=0))
        keep = _top_pixels(mag, _n_selected(C, mag.size))
        return (d * keep[None]).astype(d.dtype)
    raise ConfigError(f"unknown constraint kind {kind!r}")


def apply(x, delta):
    """Perturbed image ``clip(x + delta, 0, 255)``."""
    xa = _arr(x).astype(np.float32, copy=False)
    d = _arr(getattr(delta, "delta", delta)).astype(np.float32, copy=False)
    if xa.shape[-d.ndim:] != d.shape:
        raise DimensionError(f"apply: image {xa.shape} and perturbation {d.shape} differ")
    return np.clip(xa + d, 0.0, 255.0)


def _normalized(g, how):
    if how == "none":
        return g
    rms = float(np.sqrt(np.mean(g.astype(np.float64) ** 2)))
    if rms == 0.0 or not np.isfinite(rms):
        return np.zeros_like(g)
    return (g / g.dtype.type(rms)).astype(g.dtype)


def loss_and_grad(model, x, delta, y):
    """Cross-entropy at ``clip(x + delta)`` and its gradient w.r.t. ``delta``.

    Also returns the logits so callers can test the stopping rule without a
    second forward pass.
    """
    xt = E.Tensor._wrap(x)
    d = E.Tensor(delta, requires_grad=True, dtype=x.dtype)
    with E.Tape() as tape:
        z = logits(model, E.clamp(E.add(xt, d), 0.0, 255.0))
        loss = E.softmax_cross_entropy(z, y)
    tape.backward(loss)
    return float(loss.data), d.grad, z.data


# ----------------------------------------------------------------------------
# attacks
# ----------------------------------------------------------------------------


def single_instance_attack(model, x, y, constraint=None, cfg=None, track=False):
    """Untargeted PGD on one image, maximizing cross-entropy at the true label.

    Stops at the first iterate whose prediction differs from ``y`` with
    probability at least ``cfg.confidence``; otherwise gives up after
    ``cfg.max_steps`` steps and reports the last iterate.
    """
    constraint = constraint or ConstraintSpec.unconstrained()
    cfg = (cfg or AttackConfig()).validate()
    x = check_image(x, model.spec.input_shape)
    y = int(y)
    delta = np.zeros_like(x)
    history = [delta.copy()] if track else None
    gamma = float(cfg.step_size)
    steps = 0
    while True:
        _, g, z = loss_and_grad(model, x, delta, y)
        p = E._softmax(z)
        cls = int(np.argmax(p))
        conf = float(p[cls])
        if cls != y and conf >= cfg.confidence:
            success = True
            break
        if steps >= cfg.max_steps:
            success = False
            break
        if constraint.kind == "L0":
            g = g * l0_mask(g, constraint.budget)[None]
        delta = project(pgd_step(delta, _normalized(g, cfg.normalize), gamma), constraint)
        steps += 1
        if track:
            history.append(delta.copy())
    pert = Perturbation.from_delta(delta, kind=constraint.kind, budget=constraint.budget, gamma=gamma,
                                   steps=steps, seed=cfg.seed)
    return AttackResult(success, steps, cls, conf, pert, history)


def is_fooled(model, x, y, delta, confidence):
    _, cls, conf = predict(model, apply(x, delta))
    return cls != int(y) and conf >= confidence


def universal_attack(model, train_set, cfg=None, constraint=None):
    """Single perturbation ascending the summed loss, one example at a time.

    Starts from zero; each epoch visits the examples in a seeded shuffled
    order and applies one (normalized) gradient step per example, followed by
    a projection when ``constraint`` is given.
    """
    cfg = (cfg or AttackConfig()).validate()
    X, y = train_set.arrays() if hasattr(train_set, "arrays") else train_set
    X = check_images(X, model.spec.input_shape)
    y = np.asarray(y)
    if len(X) == 0:
        raise DataError("universal attack needs at least one training example")
    delta = np.zeros_like(X[0])
    gamma = float(cfg.step_size)
    steps = 0
    for epoch in range(int(cfg.epochs)):
        order = make_rng(cfg.seed, "universal", epoch).permutation(len(X))
        for i in order:
            _, g, _ = loss_and_grad(model, X[i], delta, int(y[i]))
            if constraint is not None and constraint.kind == "L0":
                g = g * l0_mask(g, constraint.budget)[None]
            delta = pgd_step(delta, _normalized(g, cfg.normalize), gamma)
            if constraint is not None:
                delta = project(delta, constraint)
            steps += 1
    kind = constraint.kind if constraint is not None else "none"
    budget = constraint.budget if constraint is not None else 0.0
    return Perturbation.from_delta(delta, kind=kind, budget=budget, gamma=gamma, steps=steps,
                                   seed=cfg.seed, epochs=int(cfg.epochs))


def fooling_counts(model, X, y, delta, confidence=0.9, only_correct=True):
    """Count ``(successes, attempts)`` of a fixed perturbation over a set.

    With ``only_correct`` the attempts are the examples the model classifies
    correctly before perturbation.
    """
    X = check_images(X, model.spec.input_shape)
    y = np.asarray(y)
    d = _arr(getattr(delta, "delta", delta))
    succ = att = 0
    for xi, yi in zip(X, y):
        if only_correct and predict(model, xi)[1] != int(yi):
            continue
        att += 1
        succ += is_fooled(model, xi, yi, d, confidence)
    return succ, att


def random_like(delta, rmsd, seed=0):
    """Gaussian noise with the shape of ``delta`` rescaled to an exact RMSD."""
    d = _arr(getattr(delta, "delta", delta))
    noise = make_rng(seed, "noise").normal(size=d.shape)
    r = np.sqrt(np.mean(noise ** 2))
    return (noise * (rmsd / r)).astype(np.float32)
