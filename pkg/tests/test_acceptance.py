"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtimes are asserted alongside the numerical checks.  Criterion 8 is soft:
its outcome is printed but never fails the build.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from swaro import diffcore as dc
from swaro.adversarial import (AttackConfig, METHODS, NORMS, contrastive_perturb,
                               instance_perturb, pair_indicator, permute_pairs,
                               reorder_to_original, supervised_attack, swaro_perturb,
                               assign_indicators)
from swaro.cli import cli
from swaro.clustering import assign_pseudo_labels, kmeans_fit
from swaro.contrastive import LossConfig, batch_contrastive_loss, ntxent, pair_loss_rows
from swaro.data import AugmentationSpec, gen_blobs, make_pair_batch
from swaro.encoder import checkpoint_bytes, encode, init_params, load_checkpoint
from swaro.evaluation import black_box_eval, cross_entropy, evaluate
from swaro.harness import eval_attack, fit_probe, load_config, split_dataset, train

from conftest import record


def _naive_ntxent(i, k, z, tau):
    def s(a, b):
        return float(a @ b / (math.sqrt(a @ a + 1e-12) * math.sqrt(b @ b + 1e-12)))

    num = math.exp(s(z[i], z[k]) / tau)
    den = sum(math.exp(s(z[i], z[j]) / tau) for j in range(len(z)) if j not in (i, k))
    return -math.log(num / den)


def _bound(d, norm):
    return {"linf": np.abs(d).max(axis=1), "l2": np.linalg.norm(d, axis=1),
            "l1": np.abs(d).sum(axis=1)}[norm]


# ------------------------------------------------------------------ 1


def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"ntxent": 0.0, "cross_entropy": 0.0, "encoder": 0.0, "attack_loss": 0.0}
    for _ in range(100):
        b, d = rng.integers(3, 6), rng.integers(2, 5)
        z = rng.standard_normal((2 * b, d))
        i = int(rng.integers(b))
        cfg = LossConfig(float(rng.uniform(0.2, 1.5)))
        worst["ntxent"] = max(worst["ntxent"],
                              dc.grad_check(lambda t: ntxent(i, b + i, t, cfg), z))

        c = int(rng.integers(2, 5))
        logits = 3 * rng.standard_normal((b, c))
        y = rng.integers(0, c, b)
        worst["cross_entropy"] = max(worst["cross_entropy"],
                                     dc.grad_check(lambda t: cross_entropy(t, y), logits))

        params = init_params([d, 5, 4], [4, 3], seed=int(rng.integers(1 << 30)), activation="relu")
        x = rng.standard_normal((b, d))
        probe = dc.Tensor(rng.standard_normal((b, 3)))
        worst["encoder"] = max(worst["encoder"], dc.grad_check(
            lambda t: dc.sum(dc.mul(encode(params, t).embedding, probe)), x))

        v1, v2 = rng.random((2, b, d))
        ctx1 = dc.Tensor(encode(params, dc.Tensor(v1)).embedding.data)
        ctx2 = dc.Tensor(encode(params, dc.Tensor(v2)).embedding.data)
        partner = rng.permutation(b)
        beta = dc.Tensor(rng.choice([-1.0, 1.0], b))

        def attack_loss(delta):
            z1 = encode(params, dc.add(dc.Tensor(v1), delta)).embedding
            return dc.sum(dc.mul(beta, pair_loss_rows(z1, ctx1, ctx2, partner, LossConfig())))

        worst["attack_loss"] = max(worst["attack_loss"],
                                   dc.grad_check(attack_loss, 0.01 * rng.standard_normal((b, d))))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, ok, f"max rel err {detail}; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_attack_feasibility():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    params = init_params([6, 10], [10, 6], seed=0)
    w = rng.standard_normal((6, 3))

    def logits_fn(x):
        return dc.matmul(x, dc.Tensor(w))

    radius = {"linf": (0.005, 0.1), "l2": (0.05, 0.6), "l1": (0.1, 1.5)}
    kinds = [("sup", m) for m in METHODS] + [("con", "swaro"), ("con", "instance")]
    worst, calls, domain_ok = -np.inf, 0, True
    for n in range(1000):
        kind, method = kinds[n % len(kinds)]
        norm = NORMS[(n // len(kinds)) % 3]
        eps = float(rng.uniform(*radius[norm]))
        atk = AttackConfig(norm=norm, epsilon=eps, step_size=eps * rng.uniform(0.2, 1.0),
                           steps=int(rng.integers(1, 4)), random_start=bool(rng.random() < 0.5))
        b = int(rng.integers(2, 6))
        # some coordinates sit on the domain boundary
        x = np.clip(rng.uniform(-0.2, 1.2, (b, 6)), 0, 1)
        if kind == "sup":
            adv = supervised_attack(x, rng.integers(0, 3, b), logits_fn, method, atk,
                                    seed=int(rng.integers(1 << 30)))
            delta = adv - x
        else:
            view2 = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
            if method == "swaro":
                delta = contrastive_perturb(params, x, view2, rng.permutation(b),
                                            rng.choice([-1.0, 1.0], b), LossConfig(), atk,
                                            seed=int(rng.integers(1 << 30)))
            else:
                delta = contrastive_perturb(params, x, view2, np.arange(b), 1.0, LossConfig(),
                                            atk, seed=int(rng.integers(1 << 30)))
            adv = x + delta
        worst = max(worst, float(np.max(_bound(delta, norm) - eps)))
        domain_ok &= bool(adv.min() >= 0.0 and adv.max() <= 1.0)
        calls += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and domain_ok and calls == 1000 and elapsed < 60
    record(2, ok, f"{calls} calls, worst norm excess {worst:.2e}, domain ok={domain_ok}; "
                  f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_beta_sign_semantics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    params = init_params([8, 16], [16, 8], seed=3)
    cfg = LossConfig()
    exact = 0
    for _ in range(200):
        v1, v2 = rng.uniform(0.1, 0.9, (2, 4, 8))
        partner = rng.permutation(4)
        atk = AttackConfig(steps=1, random_start=False)
        up = contrastive_perturb(params, v1, v2, partner, 1.0, cfg, atk)
        down = contrastive_perturb(params, v1, v2, partner, -1.0, cfg, atk)
        exact += int(np.array_equal(down, -up))

    def row0_loss(v1, v2, partner, anchor):
        z1 = encode(params, dc.Tensor(np.vstack([anchor[None], v1[1:]]))).embedding
        z2 = encode(params, dc.Tensor(v2)).embedding
        return pair_loss_rows(z1, z1, z2, partner, cfg).data[0]

    good = 0
    small = AttackConfig(epsilon=1e-3, step_size=1e-4, steps=1, random_start=False)
    for _ in range(500):
        v1, v2 = rng.uniform(0.1, 0.9, (2, 4, 8))
        partner = rng.permutation(4)
        beta = float(rng.choice([-1.0, 1.0]))
        d = contrastive_perturb(params, v1, v2, partner, beta, cfg, small)
        before = row0_loss(v1, v2, partner, v1[0])
        after = row0_loss(v1, v2, partner, v1[0] + d[0])
        good += int(after >= before if beta > 0 else after <= before)
    elapsed = time.perf_counter() - t0
    ok = exact == 200 and good >= 475 and elapsed < 120
    record(3, ok, f"antisymmetric {exact}/200, monotone {good}/500; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 4


def test_indicator_and_permutation_oracles():
    t0 = time.perf_counter()
    grid_ok = True
    for k in range(1, 11):
        ids = np.arange(k)
        a, b = np.meshgrid(ids, ids, indexing="ij")
        want = np.where(a == b, 1, -1)
        grid_ok &= bool(np.array_equal(pair_indicator(a.ravel(), b.ravel()), want.ravel()))
        grid_ok &= all(pair_indicator(int(i), int(j)) == (1 if i == j else -1)
                       for i in ids for j in ids)
    rng = np.random.default_rng(4)
    ds = gen_blobs(200, 2, 4, 1.0, seed=0)
    spec = AugmentationSpec(noise_std=0.05)
    trips = 0
    for n in range(1000):
        b = int(rng.integers(1, 33))
        idx = rng.choice(len(ds), b, replace=False)
        batch = make_pair_batch(ds, idx, spec, seed=n)
        p = permute_pairs(batch, rng)
        labels = rng.integers(0, 5, b)
        p = assign_indicators(p, labels, labels)
        back = reorder_to_original(p, np.zeros_like(batch.view1))
        trips += int(np.array_equal(back.partner_source(), batch.source)
                     and np.array_equal(back.view2, batch.view2)
                     and np.array_equal(back.view1, batch.view1)
                     and np.array_equal(p.partner_source(), batch.source[p.sigma]))
    elapsed = time.perf_counter() - t0
    ok = grid_ok and trips == 1000 and elapsed < 30
    record(4, ok, f"grid ok={grid_ok}, round trips {trips}/1000; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 5


def test_kmeans_properties():
    t0 = time.perf_counter()
    mono, exact, recovered = 0, 0, 0
    for s in range(100):
        rng = np.random.default_rng(s)
        z = rng.standard_normal((120, 3)) * rng.uniform(0.5, 2.0, 3)
        m = kmeans_fit(z, int(rng.integers(2, 9)), max_iters=100, tol=0.0, seed=s)
        h = np.array(m.history + (m.inertia,))
        mono += int(np.all(np.diff(h) <= 1e-12 * h[0]))
        lab = assign_pseudo_labels(m, z).labels
        d = ((z[:, None, :] - m.centroids[None]) ** 2).sum(-1)
        brute = np.array([min(range(m.k), key=lambda j: (d[i, j], j)) for i in range(len(z))])
        exact += int(np.array_equal(lab, brute))

        mu = np.array([[-10.0, 0.0], [10.0, 0.0]])
        pts = np.vstack([rng.standard_normal((100, 2)) + mu[0],
                         rng.standard_normal((100, 2)) + mu[1]])
        c = kmeans_fit(pts, 2, seed=s).centroids
        recovered += int(all(min(np.linalg.norm(c - m_, axis=1)) < 0.5 for m_ in mu))
    elapsed = time.perf_counter() - t0
    ok = mono == 100 and exact == 100 and recovered >= 95 and elapsed < 60
    record(5, ok, f"monotone {mono}/100, exact {exact}/100, recovered {recovered}/100; "
                  f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 6


def test_ntxent_closed_forms():
    t0 = time.perf_counter()
    one = LossConfig(1.0)
    cases = [
        ntxent(0, 1, np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]]), one).item() - (-1.0),
        ntxent(0, 1, np.array([[1.0, 0.0], [1.0, 1.0], [1.0, -1.0]]), one).item(),
        batch_contrastive_loss(dc.Tensor(np.eye(6)[:3]), dc.Tensor(np.eye(6)[3:]), one).item()
        - math.log(4),
    ]
    closed = max(abs(c) for c in cases)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        b, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        z1, z2 = rng.standard_normal((2, b, d))
        tau = float(rng.uniform(0.1, 2.0))
        got = batch_contrastive_loss(dc.Tensor(z1), dc.Tensor(z2), LossConfig(tau)).item()
        stacked = np.vstack([z1, z2])
        want = sum(_naive_ntxent(i, b + i, stacked, tau) for i in range(b)) / b
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    ok = closed < 1e-9 and worst < 1e-9 and elapsed < 30
    record(6, ok, f"closed forms err {closed:.1e}, naive oracle err {worst:.1e}; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------ 7 and 9 (shared models)


SEEDS = range(5)


@pytest.fixture(scope="module")
def desk_models():
    """SwARo and attack-free encoders on the desk preset, one pair per seed."""
    base = load_config("preset:desk_blobs")
    t0 = time.perf_counter()
    out = []
    for s in SEEDS:
        cfg = base.with_seed(s)
        tr, te = split_dataset(cfg)
        swaro = train(cfg, tr).params
        plain = train(replace(cfg, adversarial=False), tr).params
        out.append((cfg, tr, te, swaro, plain))
    return out, time.perf_counter() - t0


def test_directional_robustness(desk_models):
    models, train_time = desk_models
    t0 = time.perf_counter()
    acc = {"swaro": [], "plain": []}
    le = {"swaro": [], "plain": []}
    for cfg, tr, te, swaro, plain in models:
        atk = eval_attack(cfg, "linf", 8 / 255)
        for name, params in (("swaro", swaro), ("plain", plain)):
            probe = fit_probe(params, cfg, tr, robust=True)
            acc[name].append((evaluate(params, probe, te).accuracy,
                              evaluate(params, probe, te, atk, "PGD", cfg.seed_attack).accuracy))
            lprobe = fit_probe(params, cfg, tr, robust=False)
            le[name].append(evaluate(params, lprobe, te, atk, "PGD", cfg.seed_attack).accuracy)
    elapsed = train_time + time.perf_counter() - t0
    (sc, sr), (pc, pr) = np.mean(acc["swaro"], axis=0), np.mean(acc["plain"], axis=0)
    gap, drop = 100 * (sr - pr), 100 * (pc - sc)
    ok = gap >= 10 and drop <= 10 and elapsed < 900
    record(7, ok, f"rLE PGD-8/255 SwARo {sr:.3f} vs attack-free {pr:.3f} (gap {gap:+.1f} pts), "
                  f"clean {sc:.3f} vs {pc:.3f} (drop {drop:+.1f} pts), LE robust "
                  f"{np.mean(le['swaro']):.3f} vs {np.mean(le['plain']):.3f}; {elapsed:.0f}s")
    assert ok


def test_black_box_weaker_than_white_box(desk_models):
    models, train_time = desk_models
    t0 = time.perf_counter()
    white, black = [], []
    for cfg, tr, te, swaro, plain in models:
        atk = eval_attack(cfg, "linf", 8 / 255)
        target = (swaro, fit_probe(swaro, cfg, tr))
        source = (plain, fit_probe(plain, cfg, tr))
        white.append(evaluate(*target, te, atk, "PGD", cfg.seed_attack).accuracy)
        black.append(black_box_eval(source, target, te, atk, "PGD", cfg.seed_attack).accuracy)
    elapsed = time.perf_counter() - t0
    ok = np.mean(black) >= np.mean(white) and elapsed + train_time < 600
    record(9, ok, f"transfer {np.mean(black):.3f} >= white-box {np.mean(white):.3f} "
                  f"(source: attack-free encoder); {elapsed:.0f}s + shared training")
    assert ok


# ------------------------------------------------------------------ 8


def test_p_ablation_trend():
    t0 = time.perf_counter()
    base = load_config("preset:desk_blobs")
    clean = {0.1: [], 0.9: []}
    for s in SEEDS:
        cfg = base.with_seed(s)
        tr, te = split_dataset(cfg)
        for p in clean:
            params = train(replace(cfg, p=p), tr).params
            clean[p].append(evaluate(params, fit_probe(params, cfg, tr), te).accuracy)
    elapsed = time.perf_counter() - t0
    lo, hi = np.mean(clean[0.1]), np.mean(clean[0.9])
    ok = hi >= lo
    record(8, ok, f"clean LE p=0.9 {hi:.3f} vs p=0.1 {lo:.3f}; {elapsed:.0f}s (soft)", soft=True)
    assert elapsed < 1200


# ------------------------------------------------------------------ 10


def test_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    cfg = {"n_samples": 150, "dim": 8, "backbone": [16], "head": [16, 8], "epochs": 4,
           "attack_steps": 3, "probe_epochs": 10, "eval_steps": 3, "eval_linf": ["8/255"],
           "checkpoint_every": 2}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    runs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli(["pretrain", str(path), "--out", str(r)]) for r in runs]
    files = ["final.ckpt", "metrics.csv", "summary.json", "checkpoints/epoch_0002.ckpt"]
    same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files)

    ck = load_checkpoint(runs[0] / "final.ckpt")
    roundtrip = checkpoint_bytes(ck.params, ck.metadata, ck.extra) == \
        (runs[0] / "final.ckpt").read_bytes()

    missing = tmp_path / "missing.json"
    err_missing = cli(["pretrain", str(missing), "--out", str(tmp_path / "c")])
    no_partial = not (tmp_path / "c").exists()
    err_flag = cli(["pretrain", str(path), "--no-such-flag"])
    ckpt = str(runs[0] / "final.ckpt")
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        cli(["linear-eval", ckpt, "config"])
        le_clean = buf.getvalue().splitlines()[1].split(",")[4]
        buf.truncate(0)
        buf.seek(0)
        cli(["attack-eval", ckpt, "--eps", "0"])
        at_zero = buf.getvalue().splitlines()[2].split(",")[4]
    elapsed = time.perf_counter() - t0
    contract = err_missing == 1 and no_partial and err_flag == 2 and le_clean == at_zero
    ok = codes == [0, 0] and same and roundtrip and contract and elapsed < 120
    record(10, ok, f"bit-identical={same}, round trip={roundtrip}, cli contracts={contract}; "
                   f"{elapsed:.1f}s")
    assert ok
