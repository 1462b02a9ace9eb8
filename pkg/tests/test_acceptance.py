"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Criteria 5 to 8 share one session fixture that runs the 5-seed ablation on
the default benchmark and reuses its GRT checkpoints for the method
comparison and the attribution experiment.  The three desk-scale ordering
criteria (6, 7, 8) are not met by this implementation; they still run at
their stated thresholds and are marked as strict expected failures.  See the
README for the measured numbers.
"""

import dataclasses
import hashlib
import math
import time

import numpy as np
import pytest

from gtta import tensor as T
from gtta.cli import main
from gtta.config import ExperimentConfig, ModelConfig, TpdConfig
from gtta.grt import grt_loss, init_model, topk_pool
from gtta.harness import disc_attribution_mass, evaluate, roc_auc, run_ablation, run_comparison
from gtta.synthdata import default_benchmark
from gtta.tpd import (bank_init, bank_update, compute_centroids, epd, epd_weights, frozen_epd_weights, init_plm,
                      neighbor_pseudo_label, pseudo_labels, retrieve_neighbors, ttt_loss)

SEEDS = [0, 1, 2, 3, 4]
TINY = ModelConfig(image_size=8, patch=4, feat_dim=4, node_dim=3, out_dim=3)


def _report(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print("\n" + line)
    return ok


# ---------------------------------------------------------------- shared 5-seed experiment


@pytest.fixture(scope="session")
def experiment():
    cfg = ExperimentConfig()
    bench = default_benchmark(0)
    t0 = time.perf_counter()
    ablation = run_ablation(bench, SEEDS, cfg)
    ablation_seconds = time.perf_counter() - t0
    grt_models = {s: ablation.models[s]["grt"] for s in SEEDS}
    comparison = run_comparison(bench, SEEDS, cfg, models=grt_models)
    return dict(cfg=cfg, bench=bench, ablation=ablation, comparison=comparison,
                ablation_seconds=ablation_seconds)


# ---------------------------------------------------------------- 1: gradient integrity


def _op_cases(rng):
    """(name, loss builder, parameters) for every differentiable tensor op."""
    P = T.parameter
    cases = []
    a, b = P(rng.normal(size=(4, 3))), P(rng.normal(size=(3, 5)))
    cases.append(("matmul", lambda: T.reduce("sum", T.matmul(a, b) * T.matmul(a, b)), [a, b]))
    wsum = rng.normal(size=(3, 3))
    for kind in ("relu", "leaky_relu", "elu", "sigmoid", "exp", "log"):
        x0 = rng.normal(size=(3, 3))
        x0 = np.where(np.abs(x0) < 0.1, 0.5, x0)  # away from kinks
        if kind == "log":
            x0 = np.abs(x0) + 0.2
        x = P(x0)
        cases.append((kind, lambda x=x, kind=kind: T.reduce("sum", T.elementwise(kind, x) * wsum), [x]))
    for kind in ("add", "sub", "mul"):
        u, v = P(rng.normal(size=(3, 3))), P(rng.normal(size=(3, 3)))
        cases.append((kind, lambda u=u, v=v, kind=kind: T.reduce("sum", T.elementwise(kind, u, v) * wsum), [u, v]))
    s = P(rng.normal(size=(3, 3)))
    cases.append(("scale", lambda: T.reduce("sum", T.elementwise("scale", s, -1.7) * wsum), [s]))
    x5 = P(rng.normal(size=5))
    w5 = rng.normal(size=5)
    cases.append(("softmax", lambda: T.reduce("sum", T.softmax(x5) * w5), [x5]))
    for kind in ("sum", "mean", "max"):
        for axis in (None, 0, 1):
            r = P(rng.normal(size=(3, 4)))
            wr = rng.normal(size=np.sum(np.zeros((3, 4)), axis=axis).shape)
            cases.append((f"reduce_{kind}_{axis}",
                          lambda r=r, kind=kind, axis=axis, wr=wr: T.reduce("sum", T.reduce(kind, r, axis) * wr), [r]))
    n, wn = P(rng.normal(size=(3, 4))), rng.normal(size=(3, 4))
    cases.append(("l2_normalize", lambda: T.reduce("sum", T.l2_normalize(n, axis=1) * wn), [n]))
    logits = P(rng.normal(size=(4, 2)))
    soft = rng.dirichlet(np.ones(2), size=4)
    cases.append(("cross_entropy_index", lambda: T.cross_entropy(logits, np.array([0, 1, 1, 0])), [logits]))
    cases.append(("cross_entropy_soft", lambda: T.cross_entropy(logits, soft), [logits]))
    zp, zq = P(rng.normal(size=(4, 3))), P(rng.normal(size=(4, 3)))
    cases.append(("kl_divergence",
                  lambda: T.reduce("sum", T.kl_divergence(T.softmax(zp, axis=1), T.softmax(zq, axis=1))), [zp, zq]))
    ze = P(rng.normal(size=(4, 3)))
    cases.append(("entropy", lambda: T.reduce("sum", T.entropy(T.softmax(ze, axis=1))), [ze]))
    return cases


def _full_grt_loss_case(rng):
    model = init_model(TINY, 7)
    for k in ("backbone/patch_b", "backbone/mix1_b", "backbone/mix2_b", "backbone/clf_b", "grt/clf_b"):
        model.params[k].data = rng.normal(0, 0.3, size=model.params[k].shape)
    model.params["grt/W_edge"].data = rng.normal(0, 0.5, size=model.params["grt/W_edge"].shape)
    images = rng.random((3, 3, 8, 8))
    y = np.array([1, 0, 1])

    def loss():
        lb, lg, _ = model.forward(images)
        return grt_loss(lb, lg, y, 0.5)

    return loss, model.parameters()


def _random_bank(rng, f, size, k=2, capacity=256):
    bank = bank_init(rng.normal(size=(f, k)), capacity)
    for t in range(1, size + 1):
        bank_update(bank, rng.normal(size=f), rng.dirichlet(np.ones(k)), t)
    return bank


def _ttt_case(rng):
    f = 4
    cfg = TpdConfig(n_neighbors=4, n_plm=2)
    bank = _random_bank(rng, f, 24)
    plm = init_plm(f, 2, rng, noise=0.3)
    for p in plm.biases:
        p.data = rng.normal(0, 0.2, size=f)
    W, b = T.parameter(rng.normal(size=(f, 2))), T.parameter(rng.normal(size=2))
    Z = rng.normal(size=(5, f))
    votes = pseudo_labels(cfg, Z, plm, bank)
    weights = frozen_epd_weights(cfg, Z, W, b, plm, bank)
    return (lambda: ttt_loss(cfg, Z, W, b, plm, bank, votes, weights)), [W, b, *plm.parameters()]


def test_criterion_1_gradient_integrity():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    errors = {name: T.grad_check(f, params, eps=1e-5) for name, f, params in _op_cases(rng)}
    f, params = _full_grt_loss_case(rng)
    errors["full_grt_loss"] = T.grad_check(f, params, eps=1e-5)
    f, params = _ttt_case(rng)
    errors["ttt_objective_frozen_bank"] = T.grad_check(f, params, eps=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-6 and elapsed < 30
    assert _report(1, ok, f"max rel err {errors[worst]:.2e} ({worst}) over {len(errors)} graphs, {elapsed:.1f}s"), errors


# ---------------------------------------------------------------- 2: oracle equivalence


def _brute_neighbors(bank, z, n):
    rows = [(1.0 - float(np.dot(z, e.embedding)), e.arrival, id(e)) for cls in bank.classes for e in cls]
    gamma = sorted(r[0] for r in rows)[min(n, len(rows)) - 1]
    return [r[2] for r in sorted(r for r in rows if r[0] <= gamma)]


def _auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    win = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return 100.0 * win / (len(pos) * len(neg))


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatches = {"retrieve": 0, "topk": 0, "auc": 0, "votes": 0}

    for trial in range(200):
        f = int(rng.integers(2, 6))
        bank = _random_bank(rng, f, int(rng.integers(0, 63)))
        z = rng.normal(size=f)
        z /= np.linalg.norm(z)
        n = int(rng.integers(1, 12))
        if [id(e) for e in retrieve_neighbors(bank, z, n)] != _brute_neighbors(bank, z, n):
            mismatches["retrieve"] += 1

    for trial in range(500):
        n = int(rng.integers(1, 40))
        nodes = rng.normal(size=(n, 3))
        if trial % 5 == 0:
            nodes = np.round(nodes)
        k = int(rng.integers(1, n + 1))
        _, kept, scores = topk_pool(nodes, rng.normal(size=3), k)
        s = scores.data.tolist()
        oracle = sorted(sorted(range(n), key=lambda i: (-s[i], i))[:k])
        mismatches["topk"] += kept.tolist() != oracle

    worst_auc = 0.0
    for trial in range(20):
        labels = rng.integers(0, 2, 500)
        scores = np.round(rng.random(500), 2)
        worst_auc = max(worst_auc, abs(roc_auc(scores, labels) - _auc_pairs(scores, labels)))
    mismatches["auc"] = int(worst_auc >= 1e-10)

    for trial in range(100):
        f = int(rng.integers(2, 6))
        bank = _random_bank(rng, f, int(rng.integers(8, 50)))
        plm = init_plm(f, 2, rng, noise=0.3)
        cents = compute_centroids(bank, plm)
        z = rng.normal(size=f)
        nbrs = retrieve_neighbors(bank, z / np.linalg.norm(z), int(rng.integers(1, 10)))
        for i in range(2):
            counts = [0, 0]
            for e in nbrs:
                h = e.embedding @ plm.weights[i].data + plm.biases[i].data
                h = h / np.linalg.norm(h)
                counts[0 if h @ cents[i][0] >= h @ cents[i][1] else 1] += 1
            if neighbor_pseudo_label(plm, i, nbrs, cents[i]).tolist() != [c / len(nbrs) for c in counts]:
                mismatches["votes"] += 1

    elapsed = time.perf_counter() - t0
    ok = not any(mismatches.values()) and elapsed < 30
    assert _report(2, ok, f"mismatches {mismatches}, max |AUC diff| {worst_auc:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3: divergence properties


def test_criterion_3_divergence_properties():
    rng = np.random.default_rng(3)
    sum_err = 0.0
    for _ in range(200):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 5))), size=int(rng.integers(1, 40)))
        sum_err = max(sum_err, abs(epd_weights(p, float(rng.uniform(0.1, 5))).sum() - 1))

    equal_err = 0.0
    for _ in range(100):
        row = rng.dirichlet(np.ones(2))
        B = int(rng.integers(1, 10))
        flips = rng.integers(0, 2, B).astype(bool)
        p = np.where(flips[:, None], row[::-1], row)  # same entropy in every row
        q = rng.dirichlet(np.ones(2), size=B)
        mean_kl = T.kl_divergence(p, q).data.mean()
        equal_err = max(equal_err, abs(epd(p, q).item() - mean_kl))

    violations = 0
    for _ in range(1000):
        p = rng.dirichlet(np.ones(2), size=2)
        h = -(p * np.log(p)).sum(axis=1)
        if h[0] == h[1]:
            continue
        w = epd_weights(p, 1.0)
        violations += (w[0] > w[1]) != (h[0] > h[1])

    self_kl = max(T.kl_divergence(p, p).data.max() for p in (rng.dirichlet(np.ones(3), size=50) for _ in range(20)))

    min_loss = math.inf
    for _ in range(100):
        f = int(rng.integers(2, 7))
        cfg = TpdConfig(n_neighbors=int(rng.integers(1, 9)), tau_proto=float(rng.uniform(0.05, 2)),
                        tau_epd=float(rng.uniform(0.1, 3)), n_plm=int(rng.integers(1, 4)))
        bank = _random_bank(rng, f, int(rng.integers(10, 60)))
        plm = init_plm(f, cfg.n_plm, rng, noise=float(rng.uniform(0, 0.5)))
        W, b = T.parameter(rng.normal(0, 3, size=(f, 2))), T.parameter(rng.normal(size=2))
        min_loss = min(min_loss, ttt_loss(cfg, rng.normal(size=(int(rng.integers(1, 10)), f)), W, b, plm, bank).item())

    ok = sum_err <= 1e-9 and equal_err <= 1e-9 and violations == 0 and self_kl <= 1e-10 and min_loss >= -1e-6
    assert _report(3, ok, f"weight-sum err {sum_err:.1e}, equal-entropy err {equal_err:.1e}, "
                          f"monotonicity violations {violations}/1000, max KL(p||p) {self_kl:.1e}, "
                          f"min ttt_loss {min_loss:.2e}")


# ---------------------------------------------------------------- 4: bank contract


def _entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)


def test_criterion_4_bank_contract():
    rng = np.random.default_rng(4)
    cos_err = 0.0
    for _ in range(50):
        W = rng.normal(size=(int(rng.integers(2, 20)), 2))
        bank = bank_init(W)
        for k, cls in enumerate(bank.classes):
            col = W[:, k] / np.linalg.norm(W[:, k])
            cos_err = max(cos_err, abs(float(cls[0].embedding @ col) - 1.0))
            assert len(cls) == 1 and cls[0].arrival == 0

    growth_ok = True
    bank = bank_init(np.eye(4)[:, :2])
    for t in range(1, 60):
        p = rng.dirichlet(np.ones(2))
        k = int(np.argmax(p))
        before = bank.sizes()
        bank_update(bank, rng.normal(size=4), p, t)
        after = bank.sizes()
        growth_ok &= after[k] == before[k] + 1 and after[1 - k] == before[1 - k]
        e = bank.classes[k][-1]
        growth_ok &= e.arrival == t and abs(np.linalg.norm(e.embedding) - 1) <= 1e-9

    eviction_mismatch = 0
    probs = [0.95, 0.8, 0.6, 0.55]
    for _ in range(300):
        capacity = int(rng.integers(1, 9))
        bank = bank_init(np.eye(3)[:, :2], capacity)
        store = {0: [(0.0, 0)], 1: [(0.0, 0)]}
        for t in range(1, int(rng.integers(1, 20)) + 1):
            a = float(rng.choice(probs))
            k = int(rng.integers(0, 2))
            p = [a, 1 - a] if k == 0 else [1 - a, a]
            bank_update(bank, rng.normal(size=3) + 0.1, p, t)
            store[k].append((_entropy(p), t))
            if len(store[k]) > capacity:
                # enumerate every candidate: highest entropy, then oldest
                top = max(h for h, _ in store[k])
                store[k].remove(min((e for e in store[k] if e[0] == top), key=lambda e: e[1]))
        for k in (0, 1):
            got = [(round(e.entropy, 12), e.arrival) for e in bank.classes[k]]
            eviction_mismatch += got != [(round(h, 12), t) for h, t in store[k]]

    ok = cos_err <= 1e-12 and growth_ok and eviction_mismatch == 0
    assert _report(4, ok, f"max |cos-1| {cos_err:.1e}, growth semantics {'ok' if growth_ok else 'BROKEN'}, "
                          f"eviction mismatches {eviction_mismatch}/300 banks (size <= 8)")


# ---------------------------------------------------------------- 5: no-op safety


@pytest.mark.slow
def test_criterion_5_zero_lr_is_a_noop(experiment):
    cfg = experiment["cfg"]
    zero = dataclasses.replace(cfg, tpd=dataclasses.replace(cfg.tpd, clf_lr=0.0, plm_lr=0.0))
    _, targets = experiment["bench"]
    diffs = []
    for seed in SEEDS:
        model = experiment["ablation"].models[seed]["grt"]
        adapted = evaluate(model, targets, "tpd", zero, seed).domains
        frozen = experiment["ablation"].rows["grt"][seed].domains
        diffs += [d for d in frozen if adapted[d] != frozen[d]]
    ok = not diffs
    assert _report(5, ok, f"{len(targets)} domains x {len(SEEDS)} seeds, mismatching: {diffs or 'none'}")


# ---------------------------------------------------------------- 6-8: desk-scale orderings


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="on this benchmark GRT adds about 0.3 points and TPD none; see README")
def test_criterion_6_ablation_ordering(experiment):
    grid = experiment["ablation"]
    m = {label: grid.mean_avg_acc(label) for label in grid.rows}
    secs = experiment["ablation_seconds"]
    ok = (m["grt+tpd"] > m["grt"] and m["grt+tpd"] > m["tpd"] and m["grt+tpd"] - m["vanilla"] >= 5.0
          and secs < 600)
    detail = ", ".join(f"{k} {v:.2f}" for k, v in m.items())
    assert _report(6, ok, f"mean avg ACC {detail}; GRT+TPD - vanilla {m['grt+tpd'] - m['vanilla']:+.2f} "
                          f"(need >= 5); {secs:.0f}s")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="T3A beats TPD from the shared GRT checkpoint; see README")
def test_criterion_7_method_comparison(experiment):
    grid = experiment["comparison"]
    m = {label: grid.mean_avg_acc(label) for label in grid.rows}
    others = [k for k in m if k != "tpd"]
    close = all(m["tpd"] >= m[k] - 0.5 for k in others)
    wins = sum(all(grid.avg_acc("tpd", s) > grid.avg_acc(k, s) for k in others) for s in SEEDS)
    ok = close and wins >= 3
    detail = ", ".join(f"{k} {v:.2f}" for k, v in m.items())
    assert _report(7, ok, f"mean avg ACC {detail}; TPD strictly best in {wins}/5 seeds (need >= 3)")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="GRT and vanilla models put similar attribution mass on the disc; see README")
def test_criterion_8_disc_attribution(experiment):
    _, targets = experiment["bench"]
    samples = targets[0].samples[:100]
    rows = []
    for seed in SEEDS:
        models = experiment["ablation"].models[seed]
        rows.append((disc_attribution_mass(models["vanilla"], samples), disc_attribution_mass(models["grt"], samples)))
    wins = sum(g > v for v, g in rows)
    ok = wins >= 4
    detail = ", ".join(f"{v:.3f}/{g:.3f}" for v, g in rows)
    assert _report(8, ok, f"disc mass vanilla/GRT per seed on {targets[0].name}[:100]: {detail}; "
                          f"GRT higher in {wins}/5 (need >= 4)")


# ---------------------------------------------------------------- 9: determinism


@pytest.mark.slow
def test_criterion_9_ablate_is_byte_deterministic(tmp_path):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["ablate", "--seed", "0", "--seeds", "2", "--epochs", "2", "--out", str(out)]) == 0
        digests.append(hashlib.sha256((out / "ablation.csv").read_bytes()).hexdigest())
    ok = digests[0] == digests[1]
    assert _report(9, ok, f"ablation.csv sha256 {digests[0][:16]} vs {digests[1][:16]} (2 seeds, 2 epochs)")
