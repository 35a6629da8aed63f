"""Latent decoder: semantic embedding heads (image-independent), visual
query heads, and identity-value grounding attention over a target image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .dataio import EmbeddingTable
from .encoder import CrossAttentionIdentity, LatentCode
from .features import ImageFeatureMap
from .nnet import MLP, collect_params

__all__ = ["DecodedContext", "Decoder", "nearest_label", "cosine_distance"]


@dataclass
class DecodedContext:
    """Decoder outputs for one context on one image."""

    sem_s: np.ndarray   # [D_emb], image-independent
    sem_o: np.ndarray   # [D_emb], image-independent
    vis_s: np.ndarray   # [C], heatmap-weighted patch average
    vis_o: np.ndarray   # [C]
    heat_s: np.ndarray  # [P], sums to 1
    heat_o: np.ndarray  # [P]


class Decoder:
    """Two semantic heads on z alone, two query heads grounded by attention."""

    def __init__(self, d_z: int, d_emb: int, channels: int, d_att: int = 32,
                 hidden: int = 128, n_heads: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_emb = d_emb
        self.channels = channels
        self.dtype = dtype
        self.sem_s_net = MLP([d_z, hidden, d_emb], rng, dtype)
        self.sem_o_net = MLP([d_z, hidden, d_emb], rng, dtype)
        self.query_s_net = MLP([d_z, hidden, channels], rng, dtype)
        self.query_o_net = MLP([d_z, hidden, channels], rng, dtype)
        self.attn = CrossAttentionIdentity(channels, channels, d_att, rng, n_heads, dtype)

    def forward(self, z: Tensor, patches: Tensor
                ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """z [B,Dz], patches [B,P,C] -> (sem_s, sem_o [B,D_emb], vis [B,2,C], heat [B,2,P]).

        The semantic heads see only z; nothing on that path touches the
        patch features, so the same z decodes to identical embeddings on
        every image.
        """
        b = z.shape[0]
        sem_s = self.sem_s_net(z)
        sem_o = self.sem_o_net(z)
        q_s = self.query_s_net(z).reshape(b, 1, self.channels)
        q_o = self.query_o_net(z).reshape(b, 1, self.channels)
        queries = concat([q_s, q_o], axis=1)
        vis, heat = self.attn.forward(queries, patches)
        return sem_s, sem_o, vis, heat

    def decode(self, z: LatentCode, featmap: ImageFeatureMap) -> DecodedContext:
        """Single-context convenience path on numpy arrays."""
        zt = Tensor(np.asarray(z.z, dtype=self.dtype)[None])
        patches = Tensor(featmap.patches()[None].astype(self.dtype))
        sem_s, sem_o, vis, heat = self.forward(zt, patches)
        return DecodedContext(
            sem_s=sem_s.data[0].copy(), sem_o=sem_o.data[0].copy(),
            vis_s=vis.data[0, 0].copy(), vis_o=vis.data[0, 1].copy(),
            heat_s=heat.data[0, 0].copy(), heat_o=heat.data[0, 1].copy(),
        )

    def parameters(self) -> dict[str, Tensor]:
        return collect_params({
            "sem_s": self.sem_s_net, "sem_o": self.sem_o_net,
            "query_s": self.query_s_net, "query_o": self.query_o_net,
            "attn": self.attn,
        })


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero vector")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def nearest_label(sem: np.ndarray, table: EmbeddingTable) -> tuple[str, float]:
    """Label whose embedding minimizes cosine distance; ties go lexicographic."""
    if not table.entries:
        raise ValueError("embedding table is empty")
    if float(np.linalg.norm(sem)) == 0.0:
        raise ValueError("zero-norm prediction has no nearest label")
    best: tuple[float, str] | None = None
    for label in sorted(table.entries):
        d = cosine_distance(sem, table.entries[label])
        if best is None or d < best[0]:
            best = (d, label)
    return best[1], best[0]
