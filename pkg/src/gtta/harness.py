"""Source training, ACC/AUC evaluation, ablation / comparison grids, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from gtta import tensor as T
from gtta.backbone import classifier_logits, extract_features
from gtta.baselines import LinearHead, T3ASupportSet, plclf_step, t3a_predict, tent_step
from gtta.config import ExperimentConfig
from gtta.errors import EmptyEval, SingleClassEval, SingleClassSource
from gtta.grt import SourceModel, grt_loss, init_model, region_attribution
from gtta.synthdata import disc_patch_mask
from gtta.tpd import adapt_features, tpd_init

log = logging.getLogger(__name__)

METHODS = ("none", "tent", "plclf", "t3a", "tpd")
ABLATION_CELLS = (("vanilla", False, False), ("grt", True, False), ("tpd", False, True), ("grt+tpd", True, True))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def accuracy(pred_labels, true_labels) -> float:
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.size == 0:
        raise EmptyEval("accuracy of an empty set")
    if pred.shape != true.shape:
        raise ValueError("prediction / label length mismatch")
    return 100.0 * float(np.mean(pred == true))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC in percent; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassEval("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


@dataclass
class EvalResult:
    domains: dict  # name -> {"acc": float, "auc": float}

    @property
    def avg(self) -> dict:
        names = list(self.domains)
        return {
            "acc": float(np.mean([self.domains[d]["acc"] for d in names])),
            "auc": float(np.mean([self.domains[d]["auc"] for d in names])),
        }

    def to_dict(self) -> dict:
        return {"domains": self.domains, "avg": self.avg}


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------


def train_source(cfg: ExperimentConfig, source, seed: int | None = None, grt_enabled: bool | None = None) -> SourceModel:
    """Mini-batch Adam on the GRT loss (or plain CE without GRT).

    The learning rate drops by ``decay_factor`` every ``decay_every`` epochs.
    Data order comes from its own seeded stream, shared by the GRT and
    non-GRT runs of one seed.
    """
    seed = cfg.seed if seed is None else seed
    tc = cfg.train
    grt_enabled = tc.grt_enabled if grt_enabled is None else grt_enabled
    labels = np.asarray(source.labels)
    if len(np.unique(labels)) < 2:
        raise SingleClassSource("source domain must contain both classes")
    images = source.images
    model = init_model(cfg.model, seed, grt_enabled)
    params = model.parameters()
    opt = T.AdamState()
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n = len(labels)
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        perm = order_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, tc.batch):
            idx = perm[start:start + tc.batch]
            with T.new_tape():
                logits_b, logits_g, _ = model.forward(images[idx])
                if grt_enabled:
                    loss = grt_loss(logits_b, logits_g, labels[idx], tc.lam)
                else:
                    loss = T.cross_entropy(logits_b, labels[idx])
                T.backward(loss)
            T.adam_step(params, opt, lr)
            total += loss.item() * len(idx)
            count += len(idx)
        model.trace.append(total / count)
        log.info("seed %d grt=%s epoch %d lr %.0e loss %.4f", seed, grt_enabled, epoch + 1, lr, total / count)
    return model


def model_digest(model: SourceModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# test-time methods
# ---------------------------------------------------------------------------


class Adapter:
    """Consumes one batch of frozen features, returns [B x K] probabilities."""

    def process(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FrozenAdapter(Adapter):
    def __init__(self, W, b):
        self.head = LinearHead.from_arrays(W, b)

    def process(self, Z):
        return self.head.probs(Z)


class TentAdapter(Adapter):
    def __init__(self, W, b, lr):
        self.head, self.lr = LinearHead.from_arrays(W, b), lr

    def process(self, Z):
        tent_step(self.head, Z, self.lr)
        return self.head.probs(Z)


class PlclfAdapter(Adapter):
    def __init__(self, W, b, threshold, lr):
        self.head, self.threshold, self.lr = LinearHead.from_arrays(W, b), threshold, lr

    def process(self, Z):
        plclf_step(self.head, Z, self.threshold, self.lr)
        return self.head.probs(Z)


class T3AAdapter(Adapter):
    def __init__(self, W, b, filter_size):
        self.support = T3ASupportSet(np.array(W), np.array(b), filter_size)

    def process(self, Z):
        return np.stack([t3a_predict(self.support, z) for z in Z])


class TpdAdapter(Adapter):
    def __init__(self, W, b, cfg, seed):
        self.state = tpd_init(W, b, cfg, seed)

    def process(self, Z):
        return adapt_features(self.state, Z)


def make_adapter(method: str, model: SourceModel, cfg: ExperimentConfig, seed: int = 0) -> Adapter:
    W = model.params["backbone/clf_W"].data
    b = model.params["backbone/clf_b"].data
    bc = cfg.baselines
    if method == "none":
        return FrozenAdapter(W, b)
    if method == "tent":
        return TentAdapter(W, b, bc.tent_lr)
    if method == "plclf":
        return PlclfAdapter(W, b, bc.plclf_threshold, bc.plclf_lr)
    if method == "t3a":
        return T3AAdapter(W, b, bc.t3a_filter)
    if method == "tpd":
        return TpdAdapter(W, b, cfg.tpd, seed)
    raise ValueError(f"unknown method {method!r}")


def run_stream(adapter: Adapter, Z: np.ndarray, batch: int) -> np.ndarray:
    return np.concatenate([adapter.process(Z[i:i + batch]) for i in range(0, len(Z), batch)])


class FeatureCache:
    """Frozen pooled features per (model, domain)."""

    def __init__(self):
        self._store = {}

    def get(self, model: SourceModel, ds) -> np.ndarray:
        key = (id(model), ds.name, len(ds))
        if key not in self._store:
            self._store[key] = extract_features(model.params, ds.images, model.cfg)
        return self._store[key]


def evaluate(model: SourceModel, targets, method: str, cfg: ExperimentConfig, seed: int = 0,
             cache: FeatureCache | None = None) -> EvalResult:
    """Adapt a fresh copy of the method per target domain, in stream order."""
    cache = cache or FeatureCache()
    out = {}
    for ds in targets:
        Z = cache.get(model, ds)
        probs = run_stream(make_adapter(method, model, cfg, seed), Z, cfg.tpd.batch)
        y = ds.labels
        out[ds.name] = {"acc": accuracy(np.argmax(probs, axis=1), y), "auc": roc_auc(probs[:, 1], y)}
    return EvalResult(out)


def frozen_probs(model: SourceModel, images) -> np.ndarray:
    with T.no_grad():
        logits = classifier_logits(model.params, extract_features(model.params, images, model.cfg))
        return T.softmax(logits, axis=-1).data


# ---------------------------------------------------------------------------
# experiment grids
# ---------------------------------------------------------------------------


@dataclass
class GridResult:
    """rows[label][seed] -> EvalResult, plus the models each seed trained."""

    kind: str
    rows: dict
    seeds: list
    models: dict = field(default_factory=dict, repr=False)

    def mean_avg_acc(self, label: str) -> float:
        return float(np.mean([self.rows[label][s].avg["acc"] for s in self.seeds]))

    def avg_acc(self, label: str, seed: int) -> float:
        return self.rows[label][seed].avg["acc"]


def train_pair(cfg: ExperimentConfig, source, seed: int) -> dict:
    return {
        "vanilla": train_source(cfg, source, seed, grt_enabled=False),
        "grt": train_source(cfg, source, seed, grt_enabled=True),
    }


def _ablation_seed(args):
    cfg, benchmark, seed, models = args
    source, targets = benchmark
    models = models or train_pair(cfg, source, seed)
    cache = FeatureCache()
    rows = {}
    for label, use_grt, use_tpd in ABLATION_CELLS:
        model = models["grt" if use_grt else "vanilla"]
        rows[label] = evaluate(model, targets, "tpd" if use_tpd else "none", cfg, seed, cache)
    return seed, rows, models


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def run_ablation(benchmark, seeds, cfg: ExperimentConfig = ExperimentConfig(), models: dict | None = None,
                 jobs: int = 1) -> GridResult:
    """The {GRT} x {TPD} grid: per seed, two source trainings shared by the cells."""
    seeds = list(seeds)
    models = models or {}
    results = _map(_ablation_seed, [(cfg, benchmark, s, models.get(s)) for s in seeds], jobs)
    rows = {label: {} for label, _, _ in ABLATION_CELLS}
    trained = {}
    for seed, seed_rows, seed_models in results:
        trained[seed] = seed_models
        for label, res in seed_rows.items():
            rows[label][seed] = res
    return GridResult("ablation", rows, seeds, trained)


def _comparison_seed(args):
    cfg, benchmark, seed, model, methods = args
    source, targets = benchmark
    model = model or train_source(cfg, source, seed, grt_enabled=True)
    cache = FeatureCache()
    return seed, {m: evaluate(model, targets, m, cfg, seed, cache) for m in methods}, model


def run_comparison(benchmark, seeds, cfg: ExperimentConfig = ExperimentConfig(), models: dict | None = None,
                   methods=METHODS, jobs: int = 1) -> GridResult:
    """Every method adapts from the same GRT-trained checkpoint per seed."""
    seeds = list(seeds)
    models = models or {}
    results = _map(_comparison_seed, [(cfg, benchmark, s, models.get(s), tuple(methods)) for s in seeds], jobs)
    rows = {m: {} for m in methods}
    trained = {}
    for seed, seed_rows, model in results:
        trained[seed] = model
        for m, res in seed_rows.items():
            rows[m][seed] = res
    return GridResult("comparison", rows, seeds, trained)


def disc_attribution_mass(model: SourceModel, samples) -> float:
    """Mean heatmap mass on patches that overlap the optic disc."""
    masses = []
    for s in samples:
        heat = region_attribution(model, s.image)
        masses.append(float(heat[disc_patch_mask(s, model.cfg.patch)].sum()))
    return float(np.mean(masses))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _table_rows(grid: GridResult) -> list:
    """(row label, stat, EvalResult-like dict) with per-seed, mean and std rows."""
    out = []
    for label, per_seed in grid.rows.items():
        results = [per_seed[s] for s in grid.seeds]
        domains = list(results[0].domains)
        for s in grid.seeds:
            out.append((label, f"seed{s}", _flat(per_seed[s].domains, per_seed[s].avg)))
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {d: {m: float(fn([r.domains[d][m] for r in results])) for m in ("acc", "auc")} for d in domains}
            avg = {m: float(fn([r.avg[m] for r in results])) for m in ("acc", "auc")}
            out.append((label, stat, _flat(agg, avg)))
    return out


def _flat(domains: dict, avg: dict) -> dict:
    flat = {}
    for d, v in domains.items():
        flat[f"{d}_acc"] = v["acc"]
        flat[f"{d}_auc"] = v["auc"]
    flat["avg_acc"] = avg["acc"]
    flat["avg_auc"] = avg["auc"]
    return flat


def render_csv(grid: GridResult) -> str:
    rows = _table_rows(grid)
    if not rows:
        raise EmptyEval("no results to report")
    cols = list(rows[0][2])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "stat", *cols])
    for label, stat, vals in rows:
        writer.writerow([label, stat, *(f"{vals[c]:.2f}" for c in cols)])
    return buf.getvalue()


def render_markdown(grid: GridResult) -> str:
    rows = [r for r in _table_rows(grid) if r[1] in ("mean", "std")]
    if not rows:
        raise EmptyEval("no results to report")
    domains = [c[:-4] for c in rows[0][2] if c.endswith("_acc")]
    title = "Ablation (GRT x TPD)" if grid.kind == "ablation" else "Comparison of test-time methods"
    lines = [f"## {title}", "", f"Seeds: {', '.join(str(s) for s in grid.seeds)}. Cells are ACC/AUC (%).", ""]
    lines.append("| " + " | ".join(["Row", "Stat", *domains]) + " |")
    lines.append("|" + "---|" * (len(domains) + 2))
    for label, stat, vals in rows:
        cells = [f"{vals[f'{d}_acc']:.2f}/{vals[f'{d}_auc']:.2f}" for d in domains]
        lines.append("| " + " | ".join([label, stat, *cells]) + " |")
    return "\n".join(lines) + "\n"


def write_report(grid: GridResult, out_dir, stem: str | None = None) -> list:
    """Write <stem>.md, <stem>.csv and per-run JSON logs; nothing on failure."""
    if not grid.rows or not grid.seeds:
        raise EmptyEval("no results to report")
    stem = stem or grid.kind
    md, text = render_markdown(grid), render_csv(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for suffix, payload in ((".md", md), (".csv", text)):
        path = out_dir / f"{stem}{suffix}"
        tmp = path.with_suffix(suffix + ".tmp")
        tmp.write_text(payload)
        os.replace(tmp, path)
        paths.append(path)
    runs = out_dir / "runs"
    runs.mkdir(exist_ok=True)
    for label, per_seed in grid.rows.items():
        for s, res in per_seed.items():
            p = runs / f"{stem}_{label}_seed{s}.json"
            p.write_text(json.dumps(res.to_dict(), indent=1))  # domain order is column order
    return paths


def parse_csv(text: str) -> dict:
    """Inverse of render_csv: {(row, stat): {column: float}}."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return {(r[0], r[1]): {c: float(v) for c, v in zip(header[2:], r[2:])} for r in reader}
