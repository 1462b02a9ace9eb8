"""Reference test-time baselines on frozen features: Tent, PLClf, T3A."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gtta import tensor as T


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


@dataclass
class LinearHead:
    """A trainable copy of g_omega."""

    W: T.Tensor
    b: T.Tensor
    opt: T.AdamState = field(default_factory=T.AdamState)

    @classmethod
    def from_arrays(cls, W, b) -> "LinearHead":
        return cls(T.parameter(np.array(W, dtype=np.float64)), T.parameter(np.array(b, dtype=np.float64)))

    def logits(self, Z):
        return T.Tensor(np.asarray(Z, dtype=np.float64)) @ self.W + self.b

    def probs(self, Z) -> np.ndarray:
        return _softmax(np.asarray(Z) @ self.W.data + self.b.data)


def entropy_objective(head: LinearHead, Z) -> T.Tensor:
    return T.reduce("mean", T.entropy(T.softmax(head.logits(Z), axis=-1)))


def tent_step(head: LinearHead, Z, lr: float = 1e-4) -> LinearHead:
    """One Adam step on the mean prediction entropy of the batch."""
    with T.new_tape():
        T.backward(entropy_objective(head, Z))
    T.adam_step([head.W, head.b], head.opt, lr)
    return head


def plclf_mask(head: LinearHead, Z, threshold: float) -> np.ndarray:
    return head.probs(Z).max(axis=1) >= threshold


def plclf_step(head: LinearHead, Z, threshold: float = 0.9, lr: float = 1e-4) -> LinearHead:
    """Cross-entropy step on confident samples against their own argmax."""
    Z = np.asarray(Z, dtype=np.float64)
    mask = plclf_mask(head, Z, threshold)
    if not mask.any():
        return head
    sel = Z[mask]
    labels = np.argmax(head.probs(sel), axis=1)
    with T.new_tape():
        T.backward(T.cross_entropy(head.logits(sel), labels))
    T.adam_step([head.W, head.b], head.opt, lr)
    return head


@dataclass
class T3ASupportSet:
    """Per-class (unit embedding, entropy) lists, seeded with classifier columns."""

    W: np.ndarray  # source classifier, used only for routing
    b: np.ndarray
    filter_size: int = 64
    embeddings: list = field(default_factory=list)
    entropies: list = field(default_factory=list)

    def __post_init__(self):
        if not self.embeddings:
            k = self.W.shape[1]
            cols = self.W / np.linalg.norm(self.W, axis=0, keepdims=True)
            own = _softmax(cols.T @ self.W + self.b)
            self.embeddings = [[cols[:, c]] for c in range(k)]
            self.entropies = [[float(_entropy_rows(own[c]))] for c in range(k)]

    def centroids(self) -> np.ndarray:
        means = np.stack([np.mean(e, axis=0) for e in self.embeddings])
        return means / np.linalg.norm(means, axis=1, keepdims=True)

    def filter(self):
        for c in range(len(self.embeddings)):
            order = np.argsort(self.entropies[c], kind="stable")[: self.filter_size]
            self.embeddings[c] = [self.embeddings[c][i] for i in order]
            self.entropies[c] = [self.entropies[c][i] for i in order]


def t3a_scores(support: T3ASupportSet, z) -> np.ndarray:
    """Softmax of cosine similarity to the current centroids; no insertion."""
    z = np.asarray(z, dtype=np.float64)
    zn = z / max(np.linalg.norm(z), 1e-12)
    return _softmax(support.centroids() @ zn)


def t3a_predict(support: T3ASupportSet, z) -> np.ndarray:
    """Insert z by the source prediction, filter, and classify by cosine
    similarity to the support centroids."""
    z = np.asarray(z, dtype=np.float64)
    p_src = _softmax(z @ support.W + support.b)
    c = int(np.argmax(p_src))
    zn = z / max(np.linalg.norm(z), 1e-12)
    support.embeddings[c].append(zn)
    support.entropies[c].append(float(_entropy_rows(p_src)))
    support.filter()
    return t3a_scores(support, z)
