"""Evaluation artifacts: success curves, saliency, embeddings, loss surfaces, study export."""

import csv
import io as _io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import engine as E
from .attack import AttackConfig, ConstraintSpec, apply, single_instance_attack
from .data import encode_png
from .exceptions import ContractError, DataError, DimensionError
from .io import atomic_write_bytes, atomic_write_text
from .model import dataset_loss, logits, penultimate_features, predict
from .utils import check_image, check_images, make_rng

# ----------------------------------------------------------------------------
# success-rate curves
# ----------------------------------------------------------------------------


@dataclass
class SuccessCurve:
    kind: str
    budgets: list
    successes: list
    attempts: int
    config: dict = field(default_factory=dict)
    records: list = field(default_factory=list, repr=False)

    @property
    def rates(self):
        return [s / self.attempts for s in self.successes]

    def rows(self):
        return [
            {"kind": self.kind, "budget": b, "attempts": self.attempts, "successes": s, "rate": s / self.attempts}
            for b, s in zip(self.budgets, self.successes)
        ]


def correctly_classified(model, X, y):
    """Indices of examples the model already gets right."""
    return np.array([i for i, (xi, yi) in enumerate(zip(X, y)) if predict(model, xi)[1] == int(yi)], dtype=np.int64)


def success_curve(model, test_set, kind, budgets, cfg=None, ids=None, only_correct=True):
    """Attack every (image, budget) pair and tally successes per budget.

    Misclassified inputs are dropped first when ``only_correct`` is set, so
    the attempt count is the same for every budget.
    """
    budgets = [float(b) for b in budgets]
    if not budgets:
        raise ContractError("budget grid is empty")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ContractError(f"budgets must be strictly increasing, got {budgets}")
    cfg = (cfg or AttackConfig()).validate()
    if hasattr(test_set, "arrays"):
        ids = test_set.ids
        X, y = test_set.arrays()
    else:
        X, y = test_set
    X = check_images(X, model.spec.input_shape)
    y = np.asarray(y)
    ids = list(ids) if ids is not None else [f"img-{i:05d}" for i in range(len(X))]
    preds = np.array([predict(model, x)[1] for x in X], dtype=np.int64)
    keep = np.flatnonzero(preds == y) if only_correct else np.arange(len(X))
    if len(keep) == 0:
        raise ContractError("no (correctly classified) examples to attack")
    successes = []
    records = []
    for b in budgets:
        constraint = ConstraintSpec(kind, b)
        count = 0
        for i in keep:
            res = single_instance_attack(model, X[i], y[i], constraint, cfg)
            count += res.success
            records.append(_attack_record(ids[i], int(y[i]), int(preds[i]), constraint, res))
        successes.append(count)
    return SuccessCurve(ConstraintSpec(kind, budgets[-1]).kind, budgets, successes, len(keep), vars(cfg).copy(), records)


def _attack_record(pid, label, pred_before, constraint, res):
    e = res.perturbation.energies
    return {
        "id": pid,
        "true_label": label,
        "pred_before": pred_before,
        "constraint": constraint.kind,
        "budget": constraint.budget,
        "success": int(res.success),
        "steps": res.steps,
        "confidence": res.confidence,
        "mad": e["mad"],
        "rmsd": e["rmsd"],
        "linf": e["linf"],
        "l0_fraction": e["l0_fraction"],
    }


# ----------------------------------------------------------------------------
# saliency
# ----------------------------------------------------------------------------


@dataclass
class SaliencyMap:
    values: np.ndarray
    source_id: str = ""
    target: int = 0


def saliency(model, image, target="predicted", source_id=""):
    """Absolute gradient of one class logit w.r.t. the input pixels.

    ``target`` is ``"predicted"`` or a class index.  Channels are reduced by
    their maximum, giving an ``[H,W]`` map.
    """
    x = check_image(image, model.spec.input_shape)
    if target == "predicted":
        target = predict(model, x)[1]
    target = int(target)
    xt = E.Tensor(x, requires_grad=True, dtype=np.float32)
    with E.Tape() as tape:
        z = logits(model, xt)
        onehot = np.zeros(z.shape, dtype=z.dtype)
        onehot[target] = 1
        score = E.tsum(E.mul(z, E.Tensor._wrap(onehot)))
    tape.backward(score)
    return SaliencyMap(np.abs(xt.grad).max(axis=0), source_id, target)


def region_mass(smap, mask):
    """Mean saliency value over the pixels selected by ``mask``."""
    v = np.asarray(getattr(smap, "values", smap), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if v.shape != mask.shape:
        raise DimensionError(f"saliency {v.shape} and mask {mask.shape} differ")
    if not mask.any():
        raise ContractError("mask selects no pixels")
    return float(v[mask].mean())


def compare_saliency(a, b, top_fraction=0.1):
    """Spearman correlation over pixels and Jaccard overlap of the top pixels."""
    va = np.asarray(getattr(a, "values", a), dtype=np.float64).reshape(-1)
    vb = np.asarray(getattr(b, "values", b), dtype=np.float64).reshape(-1)
    if np.shape(getattr(a, "values", a)) != np.shape(getattr(b, "values", b)):
        raise DimensionError(f"saliency maps differ in shape: {np.shape(getattr(a, 'values', a))} vs {np.shape(getattr(b, 'values', b))}")
    degenerate = bool(np.ptp(va) == 0 or np.ptp(vb) == 0)
    rho = 0.0 if degenerate else float(spearmanr(va, vb).statistic)
    k = max(1, math.ceil(round(top_fraction * va.size, 9)))
    top_a = set(np.argsort(-va, kind="stable")[:k].tolist())
    top_b = set(np.argsort(-vb, kind="stable")[:k].tolist())
    overlap = len(top_a & top_b) / len(top_a | top_b)
    return {"rank_correlation": rho, "top_overlap": float(overlap), "degenerate": degenerate}


# ----------------------------------------------------------------------------
# feature embedding
# ----------------------------------------------------------------------------


def pca_2d(F):
    """Mean and ``[2, D]`` orthonormal basis of the top two principal directions.

    Each direction's largest-magnitude loading is made positive.
    """
    F = np.asarray(F, dtype=np.float64)
    mu = F.mean(axis=0)
    C = F - mu
    _, _, vt = np.linalg.svd(C, full_matrices=False)
    basis = vt[:2].copy()
    if basis.shape[0] < 2:
        pad = np.zeros((2 - basis.shape[0], F.shape[1]))
        basis = np.vstack([basis, pad])
    for row in basis:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1
    return mu, basis


GROUPS = ("true-pos", "true-neg", "adv-pos", "adv-neg", "track")


@dataclass
class Embedding2D:
    points: list
    mean: np.ndarray
    basis: np.ndarray

    def coords(self, group=None):
        pts = [p for p in self.points if group is None or p["group"] == group]
        return np.array([[p["x"], p["y"]] for p in pts]).reshape(-1, 2)

    def rows(self):
        return [dict(p) for p in self.points]


def embed_features(model, images, groups, ids=None, track=None):
    """Project penultimate features onto their top two principal components.

    ``track`` is an optional list of images (attack iterates) projected into
    the same basis and appended in order with group ``"track"``.
    """
    X = check_images(images, model.spec.input_shape)
    if len(X) < 3:
        raise ContractError(f"embedding needs at least 3 images, got {len(X)}")
    if len(groups) != len(X):
        raise DimensionError(f"{len(groups)} groups for {len(X)} images")
    bad = set(groups) - set(GROUPS)
    if bad:
        raise ValueError(f"unknown groups {sorted(bad)}")
    ids = list(ids) if ids is not None else [f"img-{i:05d}" for i in range(len(X))]
    F = np.stack([penultimate_features(model, x) for x in X]).astype(np.float64)
    if len(np.unique(F, axis=0)) < 2:
        raise DataError("fewer than 2 distinct feature vectors; embedding is degenerate")
    mu, basis = pca_2d(F)
    P = (F - mu) @ basis.T
    points = [{"id": i, "x": float(p[0]), "y": float(p[1]), "group": g, "step": -1} for i, p, g in zip(ids, P, groups)]
    if track is not None:
        T = check_images(track, model.spec.input_shape)
        FT = np.stack([penultimate_features(model, x) for x in T]).astype(np.float64)
        for s, p in enumerate((FT - mu) @ basis.T):
            points.append({"id": f"track-{s:04d}", "x": float(p[0]), "y": float(p[1]), "group": "track", "step": s})
    return Embedding2D(points, mu, basis)


# ----------------------------------------------------------------------------
# loss landscape
# ----------------------------------------------------------------------------


@dataclass
class LossSurface:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    trajectory: np.ndarray
    trajectory_losses: np.ndarray
    directions: np.ndarray = field(repr=False)

    def grid_rows(self):
        return [
            {"alpha": float(a), "beta": float(b), "loss": float(self.losses[i, j])}
            for i, a in enumerate(self.alphas)
            for j, b in enumerate(self.betas)
        ]

    def trajectory_rows(self):
        return [
            {"snapshot": s, "alpha": float(p[0]), "beta": float(p[1]), "loss": float(l)}
            for s, (p, l) in enumerate(zip(self.trajectory, self.trajectory_losses))
        ]


def loss_surface(model, snapshots, dataset, grid_radius=None, grid_n=11):
    """Mean dataset loss on the plane spanned by the trajectory's top-2 PCs.

    The plane is centred at the last snapshot (the trained weights).  The
    grid has an odd number of points per axis so its centre is exactly the
    trained model.  ``grid_radius=None`` picks 1.25x the trajectory extent.
    """
    S = np.asarray(snapshots, dtype=np.float64)
    if S.ndim != 2 or len(S) < 3:
        raise ContractError(f"loss surface needs at least 3 snapshots, got {len(S) if S.ndim == 2 else S.shape}")
    grid_n = int(grid_n)
    if grid_n < 3 or grid_n % 2 == 0:
        raise ContractError(f"grid_n must be odd and >= 3 so the grid has a centre, got {grid_n}")
    X, y = dataset.arrays() if hasattr(dataset, "arrays") else dataset
    origin = S[-1]
    _, basis = pca_2d(S - origin)
    traj = (S - origin) @ basis.T
    if grid_radius is None:
        grid_radius = 1.25 * float(np.abs(traj).max()) or 1.0
    half = grid_n // 2
    coords = grid_radius * np.arange(-half, half + 1) / half
    probe = model.copy()
    w0 = model.flat_params()

    def loss_at(a, b):
        if a == 0 and b == 0:
            probe.set_flat_params(w0)
        else:
            probe.set_flat_params(origin + a * basis[0] + b * basis[1])
        return dataset_loss(probe, X, y)

    losses = np.array([[loss_at(a, b) for b in coords] for a in coords])
    traj_losses = []
    for row in S:
        probe.set_flat_params(row)
        traj_losses.append(dataset_loss(probe, X, y))
    return LossSurface(coords, coords.copy(), losses, traj, np.array(traj_losses), basis)


# ----------------------------------------------------------------------------
# blinded perceptibility export
# ----------------------------------------------------------------------------


def blinded_export(pairs, copies, seed, out_path):
    """Write shuffled, anonymised original/perturbed images for a rater.

    ``pairs`` holds ``(source_id, original, perturbed)`` triples.  Images go
    to ``out_path/images`` as 8-bit PNGs under random names, presented in the
    order listed in ``out_path/presentation.csv``.  The answer key,
    ``out_path/answer_key.csv``, maps each file back to its role, source and
    copy index and is meant to be withheld from the rater.
    """
    copies = int(copies)
    if copies < 1:
        raise ContractError(f"copies must be >= 1, got {copies}")
    out = Path(out_path)
    rng = make_rng(seed, "blinded-export")
    items = []
    for sid, orig, pert in pairs:
        for c in range(copies):
            items.append((str(sid), "original", c, check_image(orig)))
            items.append((str(sid), "perturbed", c, check_image(pert)))
    order = rng.permutation(len(items))
    names = set()
    while len(names) < len(items):
        names.add(f"{int(rng.integers(0, 2**48)):012x}.png")
    names = sorted(names)
    names = [names[i] for i in rng.permutation(len(names))]
    key = _io.StringIO()
    kw = csv.writer(key, lineterminator="\n")
    kw.writerow(["filename", "role", "source_id", "copy"])
    pres = _io.StringIO()
    pw = csv.writer(pres, lineterminator="\n")
    pw.writerow(["position", "filename"])
    manifest = []
    for pos, idx in enumerate(order):
        sid, role, c, img = items[idx]
        fname = names[pos]
        atomic_write_bytes(out / "images" / fname, encode_png(img))
        kw.writerow([fname, role, sid, c])
        pw.writerow([pos, fname])
        manifest.append({"filename": fname, "role": role, "source_id": sid, "copy": c})
    atomic_write_text(out / "answer_key.csv", key.getvalue())
    atomic_write_text(out / "presentation.csv", pres.getvalue())
    return {"images_dir": str(out / "images"), "key": str(out / "answer_key.csv"),
            "presentation": str(out / "presentation.csv"), "entries": manifest}


def study_pairs(model, dataset, cfg=None, n=20, label=1, constraint=None):
    """Pick up to ``n`` correctly classified examples of ``label`` that a PGD attack flips."""
    cfg = cfg or AttackConfig()
    pairs = []
    for p in dataset:
        if len(pairs) >= n:
            break
        if p.label != label or predict(model, p.image)[1] != label:
            continue
        res = single_instance_attack(model, p.image, label, constraint, cfg)
        if res.success:
            pairs.append((p.id, p.image, apply(p.image, res.perturbation.delta)))
    return pairs
