"""Context encoder: semantic gating, mask extraction, identity-value
cross-attention, spatial features, and the posterior heads.

The attention here is deliberately value-projection-free: outputs are
attention-weighted averages of the raw patch features, which makes the
weight rows directly interpretable as localization heatmaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, matmul, softmax
from .dataio import BBox, ContextInput, EmbeddingTable
from .features import BinaryMask, ImageFeatureMap, bbox_to_mask
from .nnet import Linear, collect_params

__all__ = [
    "AttentionResult", "PosteriorParams", "LatentCode",
    "AttentionalPool", "CrossAttentionIdentity", "Encoder",
    "spatial_features", "mask_extract", "reparameterize",
    "LOGVAR_MIN", "LOGVAR_MAX", "SPATIAL_DIM",
]

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
SPATIAL_DIM = 14


@dataclass
class AttentionResult:
    """Attention outputs plus the weight rows that produced them."""

    outputs: np.ndarray   # [n_queries, C]
    heatmaps: np.ndarray  # [n_queries, P], rows sum to 1


@dataclass
class PosteriorParams:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class LatentCode:
    z: np.ndarray


def spatial_features(b_s: BBox, b_o: BBox, image_size: tuple[int, int]) -> np.ndarray:
    """14 scale-invariant geometry features for a subject/object box pair.

    Layout: subject (cx, cy, w, h) normalized by image dims, object same,
    center delta over the image diagonal, log width/height ratios, IoU,
    and normalized union-box area.
    """
    width, height = image_size
    if b_s.area <= 0 or b_o.area <= 0:
        raise ValueError("degenerate bbox")
    diag = math.sqrt(width * width + height * height)

    def norm4(b: BBox) -> list[float]:
        cx, cy = b.center
        return [cx / width, cy / height, b.width / width, b.height / height]

    union = b_s.union_box(b_o)
    feats = norm4(b_s) + norm4(b_o) + [
        (b_s.center[0] - b_o.center[0]) / diag,
        (b_s.center[1] - b_o.center[1]) / diag,
        math.log(b_s.width / b_o.width),
        math.log(b_s.height / b_o.height),
        b_s.iou(b_o),
        union.area / (width * height),
    ]
    return np.array(feats, dtype=np.float64)


def mask_extract(featmap: ImageFeatureMap, mask: BinaryMask) -> np.ndarray:
    """Mean feature over the mask's set cells."""
    if (mask.grid_h, mask.grid_w) != (featmap.grid_h, featmap.grid_w):
        raise ValueError(f"mask grid {(mask.grid_h, mask.grid_w)} does not match "
                         f"feature grid {(featmap.grid_h, featmap.grid_w)}")
    flat = mask.flat()
    n = flat.sum()
    if n == 0:
        raise ValueError("mask has no set cells")
    return (flat @ featmap.patches()) / n


def _batched_mask_extract(patches: Tensor, masks: np.ndarray) -> Tensor:
    """[B,P,C] patches, [B,P] {0,1} masks -> [B,C] mean over set cells."""
    b, p = masks.shape
    counts = masks.sum(axis=1, keepdims=True)  # [B,1]
    weights = (masks / counts).astype(patches.dtype)
    mixed = matmul(Tensor(weights.reshape(b, 1, p)), patches)  # [B,1,C]
    return mixed.reshape(b, patches.shape[2])


class AttentionalPool:
    """Gates a patch map by compatibility with an entity's label embedding.

    Gate per patch is sigmoid of the scaled dot product between learned
    projections of the embedding and the patch feature; the output keeps
    the map shape so masking can follow.
    """

    def __init__(self, d_emb: int, channels: int, d_att: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.d_att = d_att
        self.proj_emb = Linear(d_emb, d_att, rng, dtype)
        self.proj_feat = Linear(channels, d_att, rng, dtype)

    def forward(self, patches: Tensor, emb: Tensor) -> Tensor:
        """[B,P,C] patches, [B,D_emb] embeddings -> gated [B,P,C]."""
        q = self.proj_emb(emb)                          # [B,d]
        k = self.proj_feat(patches)                     # [B,P,d]
        b, d = q.shape
        scores = (k * q.reshape(b, 1, d)).sum(axis=-1) / math.sqrt(self.d_att)  # [B,P]
        gates = scores.sigmoid()
        p = patches.shape[1]
        return patches * gates.reshape(b, p, 1)

    def parameters(self) -> dict[str, Tensor]:
        return collect_params({"emb": self.proj_emb, "feat": self.proj_feat})


class CrossAttentionIdentity:
    """Cross-attention whose value path is the identity on patch features.

    Queries and keys go through learned projections; the softmax weights
    mix the *raw* patch features, so ``outputs == heatmaps @ patches``
    holds exactly. With multiple heads the per-head weights are averaged
    before the mix, preserving that identity.
    """

    def __init__(self, d_query_in: int, channels: int, d_att: int,
                 rng: np.random.Generator, n_heads: int = 1, dtype=np.float32):
        self.d_att = d_att
        self.n_heads = n_heads
        self.proj_q = Linear(d_query_in, n_heads * d_att, rng, dtype)
        self.proj_k = Linear(channels, n_heads * d_att, rng, dtype)

    def forward(self, queries: Tensor, patches: Tensor) -> tuple[Tensor, Tensor]:
        """[B,n,Dq] queries, [B,P,C] patches -> (outputs [B,n,C], weights [B,n,P])."""
        b, n, _ = queries.shape
        p = patches.shape[1]
        h, d = self.n_heads, self.d_att
        q = self.proj_q(queries).reshape(b, n, h, d).transpose(0, 2, 1, 3)  # [B,h,n,d]
        k = self.proj_k(patches).reshape(b, p, h, d).transpose(0, 2, 3, 1)  # [B,h,d,P]
        logits = matmul(q, k) / math.sqrt(d)                                # [B,h,n,P]
        weights = softmax(logits, axis=-1).mean(axis=1)                     # [B,n,P]
        outputs = matmul(weights, patches)                                  # [B,n,C]
        return outputs, weights

    def __call__(self, queries: np.ndarray, patches: np.ndarray) -> AttentionResult:
        """Numpy convenience wrapper over :meth:`forward` for a single item."""
        out, w = self.forward(Tensor(queries[None].astype(self.proj_q.w.dtype)),
                              Tensor(patches[None].astype(self.proj_q.w.dtype)))
        return AttentionResult(outputs=out.data[0], heatmaps=w.data[0])

    def parameters(self) -> dict[str, Tensor]:
        return collect_params({"q": self.proj_q, "k": self.proj_k})


class Encoder:
    """Full context encoder producing posterior parameters and heatmaps."""

    def __init__(self, d_emb: int, channels: int, d_z: int, d_att: int = 32,
                 fusion_hidden: int = 128, n_heads: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_emb = d_emb
        self.channels = channels
        self.d_z = d_z
        self.dtype = dtype
        self.pool = AttentionalPool(d_emb, channels, d_att, rng, dtype)
        # queries carry the entity feature plus its own normalized box coords
        self.attn = CrossAttentionIdentity(channels + 4, channels, d_att, rng, n_heads, dtype)
        self.fuse1 = Linear(2 * channels + 2 * d_emb + SPATIAL_DIM, fusion_hidden, rng, dtype)
        self.fuse2 = Linear(fusion_hidden, fusion_hidden, rng, dtype)
        self.head_mu = Linear(fusion_hidden, d_z, rng, dtype)
        self.head_logvar = Linear(fusion_hidden, d_z, rng, dtype)

    def forward(self, patches: Tensor, emb_s: Tensor, emb_o: Tensor,
                mask_s: np.ndarray, mask_o: np.ndarray, spatial: np.ndarray
                ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Batched pipeline.

        patches [B,P,C]; emb_* [B,D_emb]; mask_* [B,P] in {0,1};
        spatial [B,14]. Returns (mu [B,Dz], logvar [B,Dz], heatmaps
        [B,2,P], entity_feats [B,2,C]); entity_feats are the pooled
        mask-extracted features that later serve as visual targets.
        """
        b = patches.shape[0]
        pooled_s = self.pool.forward(patches, emb_s)
        pooled_o = self.pool.forward(patches, emb_o)
        f_s = _batched_mask_extract(pooled_s, mask_s)  # [B,C]
        f_o = _batched_mask_extract(pooled_o, mask_o)
        spatial = spatial.astype(self.dtype)
        spat_t = Tensor(spatial)
        q_s = concat([f_s, Tensor(spatial[:, 0:4])], axis=1).reshape(b, 1, self.channels + 4)
        q_o = concat([f_o, Tensor(spatial[:, 4:8])], axis=1).reshape(b, 1, self.channels + 4)
        queries = concat([q_s, q_o], axis=1)           # [B,2,C+4]
        enriched, heat = self.attn.forward(queries, patches)  # [B,2,C], [B,2,P]
        fused_in = concat([
            enriched.reshape(b, 2 * self.channels), emb_s, emb_o, spat_t,
        ], axis=1)
        hid = self.fuse2(self.fuse1(fused_in).tanh()).tanh()
        mu = self.head_mu(hid)
        logvar = self.head_logvar(hid).clip(LOGVAR_MIN, LOGVAR_MAX)
        feats = concat([f_s.reshape(b, 1, self.channels), f_o.reshape(b, 1, self.channels)], axis=1)
        return mu, logvar, heat, feats

    def encode(self, ctx: ContextInput, featmap: ImageFeatureMap, table: EmbeddingTable
               ) -> tuple[PosteriorParams, np.ndarray]:
        """Single-context convenience path; returns (params, heatmaps [2,P])."""
        image_size = (ctx.scene.width, ctx.scene.height)
        grid = (featmap.grid_h, featmap.grid_w)
        mask_s = bbox_to_mask(ctx.subject.bbox, image_size, grid).flat()[None]
        mask_o = bbox_to_mask(ctx.object.bbox, image_size, grid).flat()[None]
        spatial = spatial_features(ctx.subject.bbox, ctx.object.bbox, image_size)[None]
        patches = Tensor(featmap.patches()[None].astype(self.dtype))
        emb_s = Tensor(table.vector(ctx.subject.label)[None].astype(self.dtype))
        emb_o = Tensor(table.vector(ctx.object.label)[None].astype(self.dtype))
        mu, logvar, heat, _ = self.forward(patches, emb_s, emb_o, mask_s, mask_o, spatial)
        return PosteriorParams(mu=mu.data[0].copy(), logvar=logvar.data[0].copy()), heat.data[0].copy()

    def parameters(self) -> dict[str, Tensor]:
        return collect_params({
            "pool": self.pool, "attn": self.attn,
            "fuse1": self.fuse1, "fuse2": self.fuse2,
            "head_mu": self.head_mu, "head_logvar": self.head_logvar,
        })


def reparameterize(p: PosteriorParams, rng: np.random.Generator) -> LatentCode:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) from the given rng."""
    eps = rng.standard_normal(p.mu.shape)
    z = p.mu + np.exp(0.5 * p.logvar) * eps
    return LatentCode(z=z.astype(p.mu.dtype))
