"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints.
"""

import csv
import time

import numpy as np
import pytest

from advpath import analysis as AN
from advpath import attack as A
from advpath import cli
from advpath import engine as E
from advpath import model as M
from advpath import io as IO
from advpath.metrics import accuracy, auc_roc

from conftest import ACCEPTANCE_LINES


def record(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# --- 1: gradient oracle ------------------------------------------------------------


def random_spec(r):
    C = int(r.integers(1, 4))
    H = int(r.choice([4, 6, 8]))
    W = int(r.choice([4, 6, 8]))
    layers, h, w = [], H, W
    for _ in range(int(r.integers(0, 3))):
        k = int(r.choice([1, 3]))
        pad = k // 2 if r.random() < 0.7 else 0
        if h + 2 * pad < k or w + 2 * pad < k:
            break
        layers.append({"type": "conv2d", "out_channels": int(r.integers(1, 5)), "kernel": k, "stride": 1, "pad": pad})
        h, w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if r.random() < 0.8:
            layers.append({"type": "relu"})
        if h % 2 == 0 and w % 2 == 0 and h >= 2 and r.random() < 0.5:
            layers.append({"type": "maxpool2"})
            h, w = h // 2, w // 2
    layers.append({"type": "flatten"})
    if r.random() < 0.6:
        layers += [{"type": "dense", "out_features": int(r.integers(2, 9))}, {"type": "relu"}]
    layers.append({"type": "dense", "out_features": 2})
    norm = float(r.choice([1.0, 255.0]))
    return M.ModelSpec(input_shape=(C, H, W), layers=layers, norm=norm)


def kink_free(zfn, t, h):
    """Coordinates whose +-h segment stays on one affine piece of the logits."""
    flat = t.data.reshape(-1)
    z0 = zfn().copy()
    keep = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        zp = zfn().copy()
        flat[i] = orig - h
        zm = zfn().copy()
        flat[i] = orig
        if np.max(np.abs(zp - 2 * z0 + zm)) <= 1e-9 * (1 + np.max(np.abs(z0))):
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def test_criterion_1_gradient_oracle():
    r = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n_checked, n_skipped = 0.0, 0, 0
    cases = 120
    with E.precision(np.float64):
        for _ in range(cases):
            spec = random_spec(r)
            m = M.build_model(spec, int(r.integers(1 << 30))).astype(np.float64)
            for p in m.params:
                p.data += r.normal(scale=0.1, size=p.shape)
            scale = spec.norm
            x = E.Tensor(r.uniform(0, 1, size=spec.input_shape) * scale)
            y = int(r.integers(0, 2))

            def loss(_):
                return E.softmax_cross_entropy(M.logits(m, x), y)

            for t, h in [(x, 1e-4 * scale)] + [(p, 1e-4) for p in m.params]:
                keep = kink_free(lambda: M.logits(m, x).data, t, h)
                n_skipped += t.size - keep.size
                n_checked += keep.size
                if keep.size:
                    worst = max(worst, E.finite_diff_check(loss, t, h=h, indices=keep))
    secs = time.perf_counter() - t0
    skipped = n_skipped / (n_checked + n_skipped)
    ok = worst < 1e-3 and secs < 60 and skipped < 0.01
    record(1, "gradient oracle", ok,
           f"{cases} random nets, {n_checked} coordinates, max rel err {worst:.2e}, "
           f"{skipped:.2%} on activation switches skipped, {secs:.1f}s")
    assert ok


# --- 2: projection suite -------------------------------------------------------------


def test_criterion_2_projection_suite():
    r = np.random.default_rng(7)
    t0 = time.perf_counter()
    failures = []
    for kind in ("L1", "L2", "Linf", "L0"):
        for case in range(1000):
            shape = (int(r.integers(1, 4)), int(r.integers(1, 17)), int(r.integers(1, 17)))
            d = (r.normal(size=shape) * r.choice([0.1, 1, 10, 100])).astype(np.float32)
            if kind == "L0":
                c = float(r.uniform(0.001, 1.0))
                con = A.ConstraintSpec("L0", c)
                k = int(np.ceil(round(c * shape[1] * shape[2], 9)))
                if int(A.l0_mask(d, c).sum()) != k:
                    failures.append((kind, case, "mask count"))
                p = A.project(d, con)
                if (np.abs(p).sum(axis=0) > 0).sum() > k:
                    failures.append((kind, case, "support"))
            else:
                C = float(r.choice([0.0, r.uniform(0, 5), r.uniform(0, 200)]))
                con = A.ConstraintSpec(kind, C)
                p = A.project(d, con)
                e = A.energies(p)
                val = {"L1": e["mad"], "L2": e["rmsd"], "Linf": e["linf"]}[kind]
                if val > C + 1e-5:
                    failures.append((kind, case, f"bound {val} > {C}"))
            if not np.array_equal(A.project(p, con), p):
                failures.append((kind, case, "idempotence"))
    secs = time.perf_counter() - t0
    ok = not failures
    record(2, "projection suite", ok, f"4000 cases, {len(failures)} failures, {secs:.1f}s")
    assert ok, failures[:5]


# --- 3: desk pipeline --------------------------------------------------------------


def test_criterion_3_desk_pipeline(desk_data, desk_run):
    ds, _, test = desk_data
    t0 = time.perf_counter()
    X, y = test.arrays()
    P = M.predict_proba(desk_run["model"], X)
    acc, auc = accuracy(P.argmax(axis=1), y), auc_roc(P[:, 1], y)
    secs = desk_run["seconds"] + time.perf_counter() - t0
    ok = len(ds) >= 400 and acc >= 0.95 and auc >= 0.98 and secs < 300
    record(3, "desk pipeline", ok, f"{len(ds)} patches, held-out acc {acc:.3f}, AUC {auc:.4f}, {secs:.1f}s")
    assert ok


# --- 4: single-instance attacks and curves --------------------------------------------

GRIDS = {
    "L0": [0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
    "L1": [0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
    "L2": [0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
    "Linf": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
}


def test_criterion_4_attacks_and_curves(trained, desk_data):
    _, _, test = desk_data
    t0 = time.perf_counter()
    X, y = test.arrays()
    correct = AN.correctly_classified(trained, X, y)
    cfg = A.AttackConfig(max_steps=500)
    results = [A.single_instance_attack(trained, X[i], y[i], None, cfg) for i in correct]
    n_ok = sum(r.success for r in results)
    curve_cfg = A.AttackConfig(max_steps=200)
    sub = (X[correct[:30]], y[correct[:30]])
    curves = {k: AN.success_curve(trained, sub, k, g, curve_cfg) for k, g in GRIDS.items()}
    monotone = all(all(b >= a for a, b in zip(c.successes, c.successes[1:])) for c in curves.values())
    zero = all(c.successes[0] == 0 for k, c in curves.items() if k != "L0")
    secs = time.perf_counter() - t0
    ok = n_ok == len(correct) and monotone and zero and secs < 600
    detail = "; ".join(f"{k} {c.successes}/{c.attempts}" for k, c in curves.items())
    record(4, "attacks and curves", ok,
           f"unconstrained {n_ok}/{len(correct)} (max {max(r.steps for r in results)} steps); {detail}; {secs:.0f}s")
    assert ok


# --- 5: universal perturbation ----------------------------------------------------------


def test_criterion_5_universal(trained, desk_data):
    _, train, test = desk_data
    pert = A.universal_attack(trained, train.positives(), A.AttackConfig(step_size=0.2, epochs=2))
    Xte, yte = test.positives().arrays()
    s, n = A.fooling_counts(trained, Xte, yte, pert.delta)
    noise = A.random_like(pert.delta, pert.energies["rmsd"], seed=0)
    sn, nn = A.fooling_counts(trained, Xte, yte, noise)
    rate, nrate = s / n, sn / nn
    ok = rate >= 0.60 and rate - nrate >= 0.30
    record(5, "universal perturbation", ok,
           f"held-out positives {s}/{n} ({rate:.2f}) vs RMSD-matched noise {sn}/{nn} ({nrate:.2f}), "
           f"rmsd {pert.energies['rmsd']:.2f}")
    assert ok


# --- 6: saliency shift and embedding proximity -------------------------------------------


def test_criterion_6_saliency_and_embedding(trained, desk_data):
    _, _, test = desk_data
    attacked = []
    for p in test:
        if p.label != 1 or M.predict(trained, p.image)[1] != 1:
            continue
        res = A.single_instance_attack(trained, p.image, 1)
        if res.success:
            attacked.append((p, A.apply(p.image, res.perturbation.delta)))
    drops = 0
    for p, adv in attacked:
        mask = p.tumour_mask()
        before = AN.region_mass(AN.saliency(trained, p.image), mask)
        after = AN.region_mass(AN.saliency(trained, adv), mask)
        drops += after < before
    X, y = test.arrays()
    images = np.concatenate([X, np.stack([adv for _, adv in attacked])])
    groups = ["true-pos" if t else "true-neg" for t in y] + ["adv-neg"] * len(attacked)
    emb = AN.embed_features(trained, images, groups)
    c_pos, c_neg = emb.coords("true-pos").mean(axis=0), emb.coords("true-neg").mean(axis=0)
    adv = emb.coords("adv-neg")
    nearer = int(np.sum(np.linalg.norm(adv - c_neg, axis=1) < np.linalg.norm(adv - c_pos, axis=1)))
    n = len(attacked)
    ok = n >= 20 and drops >= 0.8 * n and nearer >= 0.8 * n
    record(6, "saliency shift / embedding", ok,
           f"{n} attacked positives; tumour saliency mass fell in {drops}/{n}; "
           f"adv-neg nearer true-neg centroid in {nearer}/{n}")
    assert ok


# --- 7: AUC oracle ----------------------------------------------------------------------


def brute_auc(s, y):
    pos = [a for a, t in zip(s, y) if t == 1]
    neg = [a for a, t in zip(s, y) if t == 0]
    wins = sum(2 if a > b else 1 if a == b else 0 for a in pos for b in neg)
    return wins / (2 * len(pos) * len(neg))


def test_criterion_7_auc_oracle():
    r = np.random.default_rng(99)
    mismatches = 0
    for case in range(1000):
        n = int(r.integers(2, 25))
        y = r.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = r.integers(0, 6, size=n).astype(float) if case % 2 else r.random(n)
        mismatches += auc_roc(s, y) != brute_auc(s.tolist(), y.tolist())
    ok = mismatches == 0
    record(7, "AUC oracle", ok, f"1000 random sets (half with ties), {mismatches} inexact")
    assert ok


# --- 8: determinism and formats ----------------------------------------------------------


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism_and_formats(tmp_path, trained):
    run = lambda *a: cli.main([str(x) for x in a])
    problems = []
    gen = ["generate", "--n-positive", 20, "--n-negative", 16, "--seed", 3]
    for name in ("g1", "g2"):
        assert run(*gen, "--out", tmp_path / name) == 0
    for name in ("t1", "t2"):
        assert run("train", "--data", tmp_path / name.replace("t", "g") / "train", "--epochs", 2,
                   "--seed", 3, "--out", tmp_path / name) == 0
    for name in ("a1", "a2"):
        assert run("attack", "--model", tmp_path / "t1" / "model.advp", "--data", tmp_path / "g1" / "test",
                   "--kind", "L2", "--budgets", "4,16", "--max-steps", 50, "--out", tmp_path / name) == 0
    for a, b in (("g1", "g2"), ("t1", "t2"), ("a1", "a2")):
        ta, tb = tree(tmp_path / a), tree(tmp_path / b)
        ta.pop("report.json"), tb.pop("report.json")
        if ta != tb:
            problems.append(f"{a} vs {b} differ")
    # bit-exact containers
    buf = IO.encode_checkpoint(trained)
    back = IO.decode_checkpoint(buf)
    if back.flat_params().tobytes() != trained.flat_params().tobytes() or IO.encode_checkpoint(back) != buf:
        problems.append("ADVP1 round trip")
    r = np.random.default_rng(0)
    for shape in [(), (5,), (3, 32, 32), (2, 3, 4, 5)]:
        a = r.normal(size=shape).astype(np.float32)
        if IO.decode_tensor(IO.encode_tensor(a)).tobytes() != a.tobytes():
            problems.append(f"ADVT1 round trip {shape}")
    # blinded export bijection
    pairs = [(f"s{i}", r.uniform(0, 255, (3, 8, 8)), r.uniform(0, 255, (3, 8, 8))) for i in range(20)]
    AN.blinded_export(pairs, 2, 11, tmp_path / "study")
    with open(tmp_path / "study" / "answer_key.csv", newline="") as fh:
        key = list(csv.DictReader(fh))
    files = {p.name for p in (tmp_path / "study" / "images").iterdir()}
    triples = {(k["source_id"], k["role"], k["copy"]) for k in key}
    if {k["filename"] for k in key} != files or len(key) != 80 or len(triples) != 80:
        problems.append("blinded export key is not a bijection")
    ok = not problems
    record(8, "determinism and formats", ok,
           "CLI reruns byte-identical, ADVP1/ADVT1 bit-exact, export key bijective" if ok else "; ".join(problems))
    assert ok, problems
