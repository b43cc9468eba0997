import csv

import numpy as np
import pytest
from PIL import Image

from advpath import analysis as AN
from advpath import attack as A
from advpath import data as D
from advpath import model as M
from advpath.exceptions import ContractError, DataError

DENSE = M.ModelSpec(input_shape=(2, 3, 3), layers=[{"type": "flatten"}, {"type": "dense", "out_features": 2}], norm=1.0)


def dense_model(seed=0):
    return M.build_model(DENSE, seed)


# --- saliency --------------------------------------------------------------------


def test_saliency_single_dense_layer_is_weight_row(rng):
    m = dense_model()
    x = rng.uniform(0, 255, size=(2, 3, 3))
    W = m.params[0].data
    for k in (0, 1):
        s = AN.saliency(m, x, target=k)
        expected = np.abs(W[k]).reshape(2, 3, 3).max(axis=0)
        np.testing.assert_allclose(s.values, expected, rtol=1e-6)
        assert s.target == k


def test_saliency_shape_and_nonnegative(trained, desk_data):
    _, _, test = desk_data
    p = test[0]
    s = AN.saliency(trained, p.image, source_id=p.id)
    assert s.values.shape == (32, 32) and np.all(s.values >= 0)
    assert s.target == M.predict(trained, p.image)[1] and s.source_id == p.id
    np.testing.assert_array_equal(s.values, AN.saliency(trained, p.image).values)


def test_compare_saliency_identical_and_constant(rng):
    a = AN.SaliencyMap(rng.uniform(size=(8, 8)), "a", 1)
    r = AN.compare_saliency(a, a)
    assert r["rank_correlation"] == pytest.approx(1.0) and r["top_overlap"] == 1.0 and not r["degenerate"]
    c = AN.SaliencyMap(np.ones((8, 8)), "c", 1)
    r = AN.compare_saliency(a, c)
    assert r["rank_correlation"] == 0.0 and r["degenerate"]


def test_compare_saliency_shape_mismatch(rng):
    with pytest.raises(Exception):
        AN.compare_saliency(AN.SaliencyMap(np.ones((4, 4)), "a", 0), AN.SaliencyMap(np.ones((3, 3)), "b", 0))


def test_region_mass():
    s = AN.SaliencyMap(np.arange(4.0).reshape(2, 2), "x", 0)
    assert AN.region_mass(s, np.array([[True, False], [False, True]])) == 1.5


def test_attacked_saliency_differs(trained, desk_data):
    _, _, test = desk_data
    pairs = AN.study_pairs(trained, test, A.AttackConfig(), n=3)
    assert len(pairs) == 3
    for _, orig, pert in pairs:
        a, b = AN.saliency(trained, orig), AN.saliency(trained, pert)
        assert AN.compare_saliency(a, b)["rank_correlation"] < AN.compare_saliency(a, a)["rank_correlation"]


# --- embedding -------------------------------------------------------------------


def test_pca_on_centered_2d_is_rotation(rng):
    F = rng.normal(size=(20, 2)) * [3.0, 1.0]
    F -= F.mean(axis=0)
    mu, basis = AN.pca_2d(F)
    P = (F - mu) @ basis.T
    d0 = np.linalg.norm(F[:, None] - F[None], axis=-1)
    d1 = np.linalg.norm(P[:, None] - P[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-4)


def test_pca_basis_properties(rng):
    F = rng.normal(size=(30, 6)) @ rng.normal(size=(6, 6))
    mu, basis = AN.pca_2d(F)
    np.testing.assert_allclose(basis @ basis.T, np.eye(2), atol=1e-5)
    P = (F - mu) @ basis.T
    assert P[:, 0].var() >= P[:, 1].var()
    for row in basis:
        assert row[np.argmax(np.abs(row))] > 0


def test_embed_features_groups_duplicates_and_track(trained, desk_data):
    _, _, test = desk_data
    X, y = test.arrays()
    imgs = np.concatenate([X[:4], X[:1]])
    groups = ["true-pos" if t else "true-neg" for t in y[:4]] + ["true-pos" if y[0] else "true-neg"]
    track = [X[0], X[1]]
    emb = AN.embed_features(trained, imgs, groups, track=track)
    pts = emb.coords()
    np.testing.assert_array_equal(pts[0], pts[4])
    tr = [p for p in emb.points if p["group"] == "track"]
    assert [p["step"] for p in tr] == [0, 1]
    np.testing.assert_allclose(emb.coords("track")[0], pts[0])


def test_embed_features_errors(trained, desk_data):
    _, _, test = desk_data
    X, _ = test.arrays()
    with pytest.raises(ContractError):
        AN.embed_features(trained, X[:2], ["true-pos"] * 2)
    with pytest.raises(DataError):
        AN.embed_features(trained, np.stack([X[0]] * 3), ["true-pos"] * 3)


# --- loss surface ----------------------------------------------------------------


def test_loss_surface_centre_and_shape(desk_run, desk_data):
    _, train, _ = desk_data
    sub = train.subset(range(40))
    m = desk_run["model"]
    surf = AN.loss_surface(m, desk_run["snapshots"], sub, grid_n=5)
    assert surf.losses.shape == (5, 5) and np.all(np.isfinite(surf.losses))
    X, y = sub.arrays()
    assert surf.losses[2, 2] == M.dataset_loss(m, X, y)
    assert len(surf.trajectory) == len(desk_run["snapshots"])
    assert surf.trajectory_losses[-1] <= surf.trajectory_losses[0]
    assert len(surf.grid_rows()) == 25


def test_loss_surface_errors(desk_run, desk_data):
    _, train, _ = desk_data
    with pytest.raises(ContractError):
        AN.loss_surface(desk_run["model"], desk_run["snapshots"][:2], train)
    with pytest.raises(ContractError):
        AN.loss_surface(desk_run["model"], desk_run["snapshots"], train, grid_n=4)


# --- success curves --------------------------------------------------------------


def test_success_curve_zero_budget_and_attempts(trained, desk_data):
    _, _, test = desk_data
    sub = test.subset(range(6))
    c = AN.success_curve(trained, sub, "Linf", [0.0, 64.0], A.AttackConfig(max_steps=50))
    assert c.successes[0] == 0
    assert all(0 <= r <= 1 for r in c.rates)
    assert len(c.records) == 2 * c.attempts
    assert [r["budget"] for r in c.rows()] == [0.0, 64.0]


def test_success_curve_grid_checks(trained, desk_data):
    _, _, test = desk_data
    for grid in ([], [1.0, 1.0], [2.0, 1.0]):
        with pytest.raises(ContractError):
            AN.success_curve(trained, test.subset(range(2)), "L2", grid)


# --- blinded export --------------------------------------------------------------


def make_pairs(n, rng):
    return [(f"s{i}", rng.uniform(0, 255, size=(3, 8, 8)), rng.uniform(0, 255, size=(3, 8, 8))) for i in range(n)]


def read_key(out):
    with open(out / "answer_key.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_export_minimal(tmp_path, rng):
    AN.blinded_export(make_pairs(1, rng), 1, 0, tmp_path)
    assert len(list((tmp_path / "images").iterdir())) == 2
    assert len(read_key(tmp_path)) == 2


def test_export_bijection(tmp_path, rng):
    pairs = make_pairs(20, rng)
    man = AN.blinded_export(pairs, 2, 5, tmp_path)
    files = sorted(p.name for p in (tmp_path / "images").iterdir())
    key = read_key(tmp_path)
    assert len(files) == 80 and sorted(r["filename"] for r in key) == files
    assert len(man["entries"]) == 80
    source = {sid: (o, p) for sid, o, p in pairs}
    seen = set()
    for r in key:
        img = np.asarray(Image.open(tmp_path / "images" / r["filename"])).transpose(2, 0, 1)
        o, p = source[r["source_id"]]
        ref = o if r["role"] == "original" else p
        np.testing.assert_array_equal(img, D.quantize(ref))
        seen.add((r["source_id"], r["role"], int(r["copy"])))
    assert seen == {(f"s{i}", role, c) for i in range(20) for role in ("original", "perturbed") for c in (0, 1)}


def test_export_seeded(tmp_path, rng):
    pairs = make_pairs(3, rng)
    a = AN.blinded_export(pairs, 2, 1, tmp_path / "a")
    b = AN.blinded_export(pairs, 2, 1, tmp_path / "b")
    c = AN.blinded_export(pairs, 2, 2, tmp_path / "c")
    assert a["entries"] == b["entries"] and a["entries"] != c["entries"]
    assert (tmp_path / "a" / "answer_key.csv").read_bytes() == (tmp_path / "b" / "answer_key.csv").read_bytes()


def test_export_copies_validated(tmp_path, rng):
    with pytest.raises(ContractError):
        AN.blinded_export(make_pairs(1, rng), 0, 0, tmp_path)
