"""Graph-assisted relation-aware training head.

Region features become graph nodes (linear projection + learned positional
embedding).  Edge weights come from a learned bilinear form
``A = nodes @ W_edge @ nodes.T`` and enter single-head graph attention as an
additive bias on the pairwise logits.  Top-k pooling keeps the
highest-scoring nodes, gated by their sigmoid scores, and a linear layer
over the flattened survivors produces the auxiliary logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from gtta import tensor as T
from gtta.backbone import backbone_forward, classifier_logits, init_backbone
from gtta.config import ModelConfig
from gtta.errors import BadK, CheckpointError, InvalidLambda, ShapeMismatch


def init_grt(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    fb, f, fo, n, k = cfg.feat_dim, cfg.node_dim, cfg.out_dim, cfg.num_regions, cfg.num_classes
    keep = cfg.keep
    if not 1 <= keep <= n:
        raise BadK(f"k_keep={keep} outside [1, {n}]")

    def normal(std, *shape):
        return T.parameter(rng.normal(0.0, std, size=shape))

    return {
        "grt/W_proj": normal(1.0 / np.sqrt(fb), fb, f),
        "grt/pos_embed": normal(0.02, n, f),
        "grt/W_edge": normal(0.1 / f, f, f),
        "grt/W_att": normal(1.0 / np.sqrt(f), f, fo),
        "grt/a_src": normal(0.1, fo),
        "grt/a_dst": normal(0.1, fo),
        "grt/a_pool": normal(0.1, fo),
        "grt/clf_W": normal(1.0 / np.sqrt(keep * fo), keep * fo, k),
        "grt/clf_b": T.parameter(np.zeros(k)),
    }


def project_nodes(params: dict, regions) -> T.Tensor:
    """nodes = regions @ W_proj + pos_embed."""
    regions = T.as_tensor(getattr(regions, "features", regions))
    w = params["grt/W_proj"]
    if regions.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"region dim {regions.shape[-1]} != {w.shape[0]}")
    if regions.shape[-2] != params["grt/pos_embed"].shape[0]:
        raise ShapeMismatch("region count does not match the positional embedding")
    return regions @ w + params["grt/pos_embed"]


def edge_matrix(nodes, W_edge) -> T.Tensor:
    nodes, W_edge = T.as_tensor(nodes), T.as_tensor(W_edge)
    if nodes.shape[-1] != W_edge.shape[0] or W_edge.shape[0] != W_edge.shape[1]:
        raise ShapeMismatch(f"nodes {nodes.shape} incompatible with W_edge {W_edge.shape}")
    return (nodes @ W_edge) @ T.transpose(nodes)


def attention_weights(nodes, A, params: dict):
    """(alpha [.. N x N], transformed t [.. N x F'])."""
    nodes, A = T.as_tensor(nodes), T.as_tensor(A)
    n = nodes.shape[-2]
    if A.shape[-2:] != (n, n):
        raise ShapeMismatch(f"edge matrix {A.shape} does not match {n} nodes")
    t = nodes @ params["grt/W_att"]
    fo = t.shape[-1]
    src = t @ T.reshape(params["grt/a_src"], (fo, 1))  # [.. N x 1]
    dst = t @ T.reshape(params["grt/a_dst"], (fo, 1))
    e = T.leaky_relu(src + T.transpose(dst), 0.2) + A
    return T.softmax(e, axis=-1), t


def graph_attention(nodes, A, params: dict) -> T.Tensor:
    alpha, t = attention_weights(nodes, A, params)
    return T.elu(alpha @ t)


def topk_pool(nodes, a_pool, k_keep: int):
    """Keep the k_keep best-scoring rows (ties -> lower index), gated by score.

    Returns (pooled [.. k x F'], kept_indices [.. k] ascending, scores [.. N]).
    """
    nodes, a_pool = T.as_tensor(nodes), T.as_tensor(a_pool)
    n, fo = nodes.shape[-2], nodes.shape[-1]
    if not 1 <= k_keep <= n:
        raise BadK(f"k_keep={k_keep} outside [1, {n}]")
    scores = T.reshape(T.sigmoid(nodes @ T.reshape(a_pool, (fo, 1))), nodes.shape[:-1])
    s = scores.data
    # stable sort on -score keeps lower indices first among equal scores
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k_keep]
    kept = np.sort(order, axis=-1)
    if nodes.ndim == 2:
        rows = nodes[kept]
        gate = T.reshape(scores[kept], (k_keep, 1))
    else:
        bidx = np.arange(nodes.shape[0])[:, None]
        rows = nodes[bidx, kept]
        gate = T.reshape(scores[bidx, kept], (nodes.shape[0], k_keep, 1))
    return rows * gate, kept, scores


def grt_logits(params: dict, pooled) -> T.Tensor:
    pooled = T.as_tensor(pooled)
    w = params["grt/clf_W"]
    fo = pooled.shape[-1]
    if pooled.shape[-2] * fo != w.shape[0]:
        raise ShapeMismatch(f"expected {w.shape[0] // fo} pooled rows, got {pooled.shape[-2]}")
    if pooled.ndim == 2:
        return T.reshape(T.reshape(pooled, (1, -1)) @ w + params["grt/clf_b"], (-1,))
    flat = T.reshape(pooled, (pooled.shape[0], -1))
    return flat @ w + params["grt/clf_b"]


def grt_head(params: dict, regions, cfg: ModelConfig) -> T.Tensor:
    nodes = project_nodes(params, regions)
    A = edge_matrix(nodes, params["grt/W_edge"])
    h1 = graph_attention(nodes, A, params)
    pooled, _, _ = topk_pool(h1, params["grt/a_pool"], cfg.keep)
    return grt_logits(params, pooled)


def grt_loss(p_b_logits, p_grt_logits, y, lam: float) -> T.Tensor:
    """CE(p_B, y) + lam*CE(p_GRT, y) + (1-lam)*CE(p_GRT, onehot(argmax p_B)).

    The hard backbone label is a constant: no gradient reaches p_B through it.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidLambda(f"lambda must lie in [0, 1], got {lam}")
    p_b_logits, p_grt_logits = T.as_tensor(p_b_logits), T.as_tensor(p_grt_logits)
    y = np.asarray(y, dtype=np.int64)
    loss = T.cross_entropy(p_b_logits, y)
    if lam > 0:
        loss = loss + T.scale(T.cross_entropy(p_grt_logits, y), lam)
    if lam < 1:
        hard = np.argmax(p_b_logits.data, axis=1)  # first index on ties
        loss = loss + T.scale(T.cross_entropy(p_grt_logits, hard), 1.0 - lam)
    return loss


# ---------------------------------------------------------------------------
# source model
# ---------------------------------------------------------------------------


@dataclass
class SourceModel:
    cfg: ModelConfig
    params: dict
    grt_enabled: bool = True
    trace: list = field(default_factory=list)

    def parameters(self) -> list:
        if self.grt_enabled:
            return [self.params[k] for k in sorted(self.params)]
        return [self.params[k] for k in sorted(self.params) if k.startswith("backbone/")]

    def clone(self) -> "SourceModel":
        return copy.deepcopy(self)

    def forward(self, images):
        """(backbone logits, grt logits or None, pooled features)."""
        regions, pooled = backbone_forward(self.params, images, self.cfg)
        logits = classifier_logits(self.params, pooled)
        grt = grt_head(self.params, regions, self.cfg) if self.grt_enabled else None
        return logits, grt, pooled

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict):
        for k, v in arrays.items():
            if k in self.params:
                if self.params[k].shape != np.shape(v):
                    raise ShapeMismatch(f"{k}: checkpoint shape {np.shape(v)} != {self.params[k].shape}")
                self.params[k].data = np.array(v, dtype=np.float64)


def init_model(cfg: ModelConfig, seed: int, grt_enabled: bool = True) -> SourceModel:
    """Backbone and GRT parameters drawn from independent streams, so the
    backbone init is identical with or without the GRT head."""
    root = np.random.SeedSequence([seed, cfg.init_seed_offset])
    bb_seq, grt_seq = root.spawn(2)
    params = init_backbone(cfg, np.random.default_rng(bb_seq))
    params.update(init_grt(cfg, np.random.default_rng(grt_seq)))
    return SourceModel(cfg, params, grt_enabled)


def save_model(model: SourceModel, path) -> None:
    """Checkpoint of the parameters in use; ``grt/*`` only when the head was trained."""
    keep = {k: v.data for k, v in model.params.items() if model.grt_enabled or k.startswith("backbone/")}
    T.save_checkpoint(path, keep)


def load_model(path, cfg: ModelConfig = ModelConfig()) -> SourceModel:
    arrays = T.load_checkpoint(path)
    grt_enabled = any(k.startswith("grt/") for k in arrays)
    model = init_model(cfg, 0, grt_enabled)
    missing = [k for k in model.params if k not in arrays and (grt_enabled or k.startswith("backbone/"))]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {', '.join(missing)}")
    model.load_state_dict(arrays)
    return model


# ---------------------------------------------------------------------------
# attribution
# ---------------------------------------------------------------------------


def region_attribution(model: SourceModel, image, cls: int | None = None) -> np.ndarray:
    """Gradient x activation per region for a backbone logit.

    a_r = |d logit / d region_r . region_r|, normalised to sum 1 and laid
    out on the patch grid.  An all-zero map becomes uniform.  ``cls=None``
    uses the predicted class.
    """
    cfg = model.cfg
    with T.no_grad():
        regions, _ = backbone_forward(model.params, image, cfg)
    leaf = T.Tensor(regions.features.data, requires_grad=True)
    frozen = {k: T.Tensor(v.data) for k, v in model.params.items()}
    with T.new_tape():
        logits = classifier_logits(frozen, T.reduce("mean", leaf, axis=-2))
        if cls is None:
            cls = int(np.argmax(logits.data))
        T.backward(logits[cls])
    contrib = np.abs((leaf.grad * leaf.data).sum(axis=-1))
    total = contrib.sum()
    n = cfg.num_regions
    heat = contrib / total if total > 0 else np.full(n, 1.0 / n)
    return heat.reshape(cfg.grid, cfg.grid)


def heatmap_csv(heat: np.ndarray) -> str:
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in np.asarray(heat))


def heatmap_pgm(heat: np.ndarray, scale: int = 1) -> str:
    """Plain (P2) greyscale image, max value 255, brightest = largest mass."""
    heat = np.asarray(heat, dtype=np.float64)
    top = heat.max()
    grey = np.zeros_like(heat) if top <= 0 else np.rint(255.0 * heat / top)
    grey = np.kron(grey, np.ones((scale, scale))).astype(int)
    h, w = grey.shape
    rows = "".join(" ".join(str(v) for v in row) + "\n" for row in grey)
    return f"P2\n{w} {h}\n255\n{rows}"
