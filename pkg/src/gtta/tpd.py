"""Test-time prediction disambiguation.

An online memory bank stores unit-norm target embeddings routed by the
classifier's argmax.  For every incoming sample, its nearest bank entries
(cosine distance, all classes pooled) vote through a set of parallel linear
maps whose class centroids come from the bank; the vote histogram is the
pseudo-label.  The classifier and the linear maps are then updated with an
entropy-weighted KL objective.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from gtta import tensor as T
from gtta.config import TpdConfig
from gtta.errors import (
    EmptyBank,
    EmptyClass,
    EmptyNeighborSet,
    InvalidDistribution,
    ZeroWeightColumn,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# memory bank
# ---------------------------------------------------------------------------


@dataclass
class BankEntry:
    embedding: np.ndarray
    logits: np.ndarray
    entropy: float
    arrival: int


@dataclass
class MemoryBank:
    num_classes: int
    capacity: int = 256
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = [[] for _ in range(self.num_classes)]

    def __len__(self):
        return sum(len(c) for c in self.classes)

    def sizes(self) -> list:
        return [len(c) for c in self.classes]

    def entries(self) -> list:
        """All (class, entry) pairs, class-major."""
        return [(k, e) for k, cls in enumerate(self.classes) for e in cls]

    def matrix(self):
        """(embeddings [M x F], arrivals [M], classes [M])."""
        pairs = self.entries()
        if not pairs:
            raise EmptyBank("memory bank is empty")
        emb = np.stack([e.embedding for _, e in pairs])
        arr = np.array([e.arrival for _, e in pairs], dtype=np.int64)
        cls = np.array([k for k, _ in pairs], dtype=np.int64)
        return emb, arr, cls

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "capacity": self.capacity,
            "classes": [
                [{"embedding": e.embedding.tolist(), "logits": e.logits.tolist(),
                  "entropy": e.entropy, "arrival": e.arrival} for e in cls]
                for cls in self.classes
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MemoryBank":
        bank = cls(doc["num_classes"], doc["capacity"])
        bank.classes = [
            [BankEntry(np.array(e["embedding"]), np.array(e["logits"]), e["entropy"], e["arrival"])
             for e in entries]
            for entries in doc["classes"]
        ]
        return bank


def _row_entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def bank_init(classifier_W, capacity: int = 256, confidence: float = 10.0) -> MemoryBank:
    """One entry per class: the normalised classifier column, entropy 0."""
    W = np.asarray(getattr(classifier_W, "data", classifier_W), dtype=np.float64)
    fb, k = W.shape
    bank = MemoryBank(k, capacity)
    for c in range(k):
        col = W[:, c]
        norm = np.linalg.norm(col)
        if norm < 1e-12:
            raise ZeroWeightColumn(f"classifier column {c} has zero norm")
        bank.classes[c].append(BankEntry(col / norm, confidence * np.eye(k)[c], 0.0, 0))
    return bank


def bank_update(bank: MemoryBank, z_raw, p, t: int, logits=None) -> MemoryBank:
    """Route a sample to the bank of its predicted class (in place).

    Over capacity, the entry with the highest entropy leaves (oldest first
    among equal entropies).  Zero-norm embeddings are skipped with a warning.
    """
    z = np.asarray(z_raw, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < -1e-12):
        raise InvalidDistribution("bank_update needs a probability vector")
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        log.warning("zero-norm embedding at t=%d skipped", t)
        return bank
    k = int(np.argmax(p))
    if logits is None:
        logits = np.log(np.clip(p, 1e-12, 1.0))
    entries = bank.classes[k]
    entries.append(BankEntry(z / norm, np.asarray(logits, dtype=np.float64), _row_entropy(p), int(t)))
    if len(entries) > bank.capacity:
        # list order is arrival order, so the first maximum is the oldest
        worst = max(range(len(entries)), key=lambda i: (entries[i].entropy, -i))
        del entries[worst]
    return bank


def _neighbor_indices(emb, arrivals, zn, n: int) -> list:
    """Per query row, bank indices with distance <= the n-th smallest,
    ordered by (distance, arrival)."""
    dist = 1.0 - zn @ emb.T
    out = []
    n_eff = min(n, emb.shape[0])
    for row in np.atleast_2d(dist):
        gamma = np.partition(row, n_eff - 1)[n_eff - 1]
        idx = np.flatnonzero(row <= gamma)
        out.append(idx[np.lexsort((arrivals[idx], row[idx]))])
    return out


def retrieve_neighbors(bank: MemoryBank, z, n: int) -> list:
    """Bank entries within the n-th smallest cosine distance of unit vector z."""
    if len(bank) == 0:
        raise EmptyBank("cannot search an empty bank")
    emb, arr, _ = bank.matrix()
    pairs = bank.entries()
    idx = _neighbor_indices(emb, arr, np.asarray(z, dtype=np.float64)[None], n)[0]
    return [pairs[i][1] for i in idx]


# ---------------------------------------------------------------------------
# parallel linear module
# ---------------------------------------------------------------------------


@dataclass
class Plm:
    weights: list  # Tensor [F_b x F_p] each
    biases: list  # Tensor [F_p] each
    centroids: list | None = None  # cache, list of [K x F_p]

    def __len__(self):
        return len(self.weights)

    def parameters(self) -> list:
        return [*self.weights, *self.biases]

    def invalidate(self):
        self.centroids = None


def init_plm(feat_dim: int, n_modules: int, rng: np.random.Generator, noise: float = 0.01,
             out_dim: int | None = None) -> Plm:
    """Near-identity maps so the initial prototypes live in feature space."""
    out_dim = out_dim or feat_dim
    eye = np.eye(feat_dim, out_dim)
    weights = [T.parameter(eye + rng.normal(0.0, noise, size=(feat_dim, out_dim))) for _ in range(n_modules)]
    biases = [T.parameter(np.zeros(out_dim)) for _ in range(n_modules)]
    return Plm(weights, biases)


def plm_map(plm: Plm, i: int, z):
    return T.as_tensor(z) @ plm.weights[i] + plm.biases[i]


def plm_average(plm: Plm, z):
    """Ensemble mean of the linear maps."""
    total = plm_map(plm, 0, z)
    for i in range(1, len(plm)):
        total = total + plm_map(plm, i, z)
    return T.scale(total, 1.0 / len(plm))


def _class_embeddings(bank: MemoryBank) -> list:
    out = []
    for k, entries in enumerate(bank.classes):
        if not entries:
            raise EmptyClass(f"class {k} has no bank entries")
        out.append(np.stack([e.embedding for e in entries]))
    return out


def _centroids_tensor(plm: Plm, i: int, class_emb: list) -> T.Tensor:
    rows = [T.reduce("mean", plm_map(plm, i, e), axis=0, keepdims=True) for e in class_emb]
    return T.l2_normalize(T.concat(rows, axis=0), axis=1)


def compute_centroids(bank: MemoryBank, plm: Plm) -> list:
    """Per module, the normalised mean projection of each class's entries."""
    class_emb = _class_embeddings(bank)
    with T.no_grad():
        cents = [_centroids_tensor(plm, i, class_emb).data for i in range(len(plm))]
    plm.centroids = cents
    return cents


def _proto_logits(h, centroids, tau: float):
    """-(1 - cos(h, mu_k)) / tau for rows of h (Tensor)."""
    hn = T.l2_normalize(h, axis=-1)
    cos = hn @ T.transpose(T.as_tensor(centroids))
    return T.scale(cos - 1.0, 1.0 / tau)


def proto_probs(plm: Plm, i: int, z, centroids, tau_proto: float):
    """Softmax over classes of negative cosine distance to module-i centroids."""
    z = np.asarray(getattr(z, "data", z), dtype=np.float64)
    single = z.ndim == 1
    with T.no_grad():
        p = T.softmax(_proto_logits(plm_map(plm, i, np.atleast_2d(z)), centroids, tau_proto), axis=-1).data
    return p[0] if single else p


def _proto_argmax(plm: Plm, i: int, emb: np.ndarray, centroids) -> np.ndarray:
    with T.no_grad():
        scores = _proto_logits(plm_map(plm, i, emb), centroids, 1.0).data
    return np.argmax(scores, axis=1)


def neighbor_pseudo_label(plm: Plm, i: int, neighbors, centroids) -> np.ndarray:
    """Fraction of neighbours whose module-i prototype argmax is each class."""
    if len(neighbors) == 0:
        raise EmptyNeighborSet("no neighbours to vote")
    emb = np.stack([getattr(e, "embedding", e) for e in neighbors])
    votes = _proto_argmax(plm, i, emb, centroids)
    k = np.asarray(centroids).shape[0]
    return np.bincount(votes, minlength=k) / len(votes)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def epd_weights(p: np.ndarray, tau_epd: float) -> np.ndarray:
    """Batch softmax of per-row entropy / tau."""
    h = T.entropy(p).data / tau_epd
    e = np.exp(h - h.max())
    return e / e.sum()


def epd(p, y_hat, tau_epd: float = 1.0, eps: float = 1e-4, weights=None) -> T.Tensor:
    """Entropy-weighted KL(p_b || y_hat_b) summed over the batch.

    The weights are constants in backward.  Passing ``weights`` pins them
    to values computed elsewhere (finite-difference checks need this).
    """
    p = T.as_tensor(p)
    w = epd_weights(p.data, tau_epd) if weights is None else np.asarray(weights, dtype=np.float64)
    kl = T.kl_divergence(p, y_hat, eps)
    return T.reduce("sum", kl * w)


@dataclass
class NeighborVotes:
    """Detached per-batch targets: p_hat[i] is [B x K] for module i."""

    p_hat: list
    neighbor_idx: list


def pseudo_labels(cfg: TpdConfig, Z: np.ndarray, plm: Plm, bank: MemoryBank, centroids=None) -> NeighborVotes:
    zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    emb, arr, _ = bank.matrix()
    nbrs = _neighbor_indices(emb, arr, zn, cfg.n_neighbors)
    if any(len(ix) == 0 for ix in nbrs):
        raise EmptyNeighborSet("a query found no neighbours")
    if centroids is None:
        centroids = compute_centroids(bank, plm)
    k = bank.num_classes
    p_hat = []
    for i in range(len(plm)):
        votes = _proto_argmax(plm, i, emb, centroids[i])
        rows = np.stack([np.bincount(votes[ix], minlength=k) / len(ix) for ix in nbrs])
        p_hat.append(rows)
    return NeighborVotes(p_hat, nbrs)


def ttt_loss(cfg: TpdConfig, Z, clf_W, clf_b, plm: Plm, bank: MemoryBank, votes: NeighborVotes | None = None,
             weights: list | None = None):
    """Mean over PLM modules of

    EPD[p_proto || p_hat] + lambda1*EPD[p_clf || p_hat] + lambda2*mean KL[p_clf || p_proto]

    with centroids rebuilt on the tape from the bank so gradients reach the
    linear maps through them.  ``weights`` (from :func:`frozen_epd_weights`)
    fixes the EPD batch weights; by default they follow the current point.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise EmptyNeighborSet("ttt_loss needs a non-empty batch")
    if votes is None:
        votes = pseudo_labels(cfg, Z, plm, bank)
    zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    class_emb = _class_embeddings(bank)
    p_clf = T.softmax(T.Tensor(Z) @ clf_W + clf_b, axis=-1)
    eps = cfg.label_smooth_eps
    total = None
    for i in range(len(plm)):
        cents = _centroids_tensor(plm, i, class_emb)
        p_proto = T.softmax(_proto_logits(plm_map(plm, i, zn), cents, cfg.tau_proto), axis=-1)
        target = votes.p_hat[i]
        w_proto, w_clf = weights[i] if weights is not None else (None, None)
        term = epd(p_proto, target, cfg.tau_epd, eps, w_proto)
        if cfg.lambda1:
            term = term + T.scale(epd(p_clf, target, cfg.tau_epd, eps, w_clf), cfg.lambda1)
        if cfg.lambda2:
            kl = T.reduce("mean", T.kl_divergence(p_clf, p_proto, eps))
            term = term + T.scale(kl, cfg.lambda2)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(plm))


def frozen_epd_weights(cfg: TpdConfig, Z, clf_W, clf_b, plm: Plm, bank: MemoryBank) -> list:
    """Per module, the (prototype, classifier) EPD weights at the current point."""
    Z = np.asarray(Z, dtype=np.float64)
    zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    class_emb = _class_embeddings(bank)
    with T.no_grad():
        p_clf = T.softmax(T.Tensor(Z @ T.as_tensor(clf_W).data + T.as_tensor(clf_b).data), axis=-1).data
        w_clf = epd_weights(p_clf, cfg.tau_epd)
        out = []
        for i in range(len(plm)):
            cents = _centroids_tensor(plm, i, class_emb)
            p_proto = T.softmax(_proto_logits(plm_map(plm, i, zn), cents, cfg.tau_proto), axis=-1).data
            out.append((epd_weights(p_proto, cfg.tau_epd), w_clf))
    return out


# ---------------------------------------------------------------------------
# online adaptation
# ---------------------------------------------------------------------------


@dataclass
class TpdState:
    cfg: TpdConfig
    clf_W: T.Tensor
    clf_b: T.Tensor
    plm: Plm
    bank: MemoryBank
    clf_opt: T.AdamState = field(default_factory=T.AdamState)
    plm_opt: T.AdamState = field(default_factory=T.AdamState)
    t: int = 0
    losses: list = field(default_factory=list)

    def clone(self) -> "TpdState":
        return copy.deepcopy(self)

    def logits(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.clf_W.data + self.clf_b.data

    def probs(self, Z) -> np.ndarray:
        with T.no_grad():
            return T.softmax(T.Tensor(self.logits(Z)), axis=-1).data

    def tensors(self) -> dict:
        out = {"tpd/clf_W": self.clf_W.data, "tpd/clf_b": self.clf_b.data}
        for i, (w, b) in enumerate(zip(self.plm.weights, self.plm.biases)):
            out[f"tpd/plm{i}_W"] = w.data
            out[f"tpd/plm{i}_b"] = b.data
        return out


def tpd_init(clf_W, clf_b, cfg: TpdConfig = TpdConfig(), seed: int = 0) -> TpdState:
    W = np.array(getattr(clf_W, "data", clf_W), dtype=np.float64)
    b = np.array(getattr(clf_b, "data", clf_b), dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    plm = init_plm(W.shape[0], cfg.n_plm, rng, cfg.plm_init_noise)
    return TpdState(cfg, T.parameter(W), T.parameter(b), plm, bank_init(W, cfg.capacity))


def _adapt_step(state: TpdState, Z: np.ndarray, votes: NeighborVotes) -> float:
    cfg = state.cfg
    with T.new_tape():
        loss = ttt_loss(cfg, Z, state.clf_W, state.clf_b, state.plm, state.bank, votes)
        T.backward(loss)
    T.adam_step([state.clf_W, state.clf_b], state.clf_opt, cfg.clf_lr)
    T.adam_step(state.plm.parameters(), state.plm_opt, cfg.plm_lr)
    state.plm.invalidate()
    return loss.item()


def adapt_features(state: TpdState, Z) -> np.ndarray:
    """One online round on a batch of frozen features; returns [B x K] probs."""
    cfg = state.cfg
    Z = np.asarray(Z, dtype=np.float64)
    if not cfg.update_before_predict:
        probs = state.probs(Z)
    votes = None
    if len(state.bank) < cfg.n_neighbors:
        # the n-th neighbour distance is undefined on a bank this small
        log.info("adaptation skipped: bank holds %d < %d entries", len(state.bank), cfg.n_neighbors)
    else:
        try:
            votes = pseudo_labels(cfg, Z, state.plm, state.bank)
        except (EmptyBank, EmptyNeighborSet) as exc:
            log.info("adaptation skipped: %s", exc)
    if votes is not None:
        for _ in range(cfg.steps_per_batch):
            state.losses.append(_adapt_step(state, Z, votes))
    if cfg.update_before_predict:
        probs = state.probs(Z)
    logits = state.logits(Z)
    for z, p, lg in zip(Z, probs, logits):
        state.t += 1
        bank_update(state.bank, z, p, state.t, lg)
    state.plm.invalidate()
    return probs


def adapt_batch(model, state: TpdState, images):
    """Extract frozen features for ``images`` and run :func:`adapt_features`."""
    from gtta.backbone import extract_features

    Z = extract_features(model.params, np.asarray(images), model.cfg)
    return adapt_features(state, Z), state


def tpd_predict_scores(model, state: TpdState, images) -> np.ndarray:
    """Glaucoma probability under the current adapted classifier; no mutation."""
    from gtta.backbone import extract_features

    images = np.asarray(images)
    single = images.ndim == 3
    Z = extract_features(model.params, images[None] if single else images, model.cfg)
    scores = state.probs(Z)[:, 1]
    return float(scores[0]) if single else scores


def save_snapshot(state: TpdState, ckpt_path, bank_path) -> None:
    """Adapted classifier and linear maps as a checkpoint, bank as JSON."""
    T.save_checkpoint(ckpt_path, state.tensors())
    with open(bank_path, "w") as fh:
        json.dump(state.bank.to_json(), fh)
