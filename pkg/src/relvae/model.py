"""Full model assembly: backbone + encoder + decoder, batch collation,
and the differentiable loss graph used by the trainer and by gradient
verification tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .dataio import ContextInput, EmbeddingTable, scene_image
from .decoder import DecodedContext, Decoder
from .encoder import Encoder, LatentCode, PosteriorParams, spatial_features
from .features import ConvBackbone, ImageFeatureMap, PrecomputedFeatureSource, bbox_to_mask
from .losses import LossWeights, bbox_heatmap_loss, cosine_loss, kl_loss, mse_loss, total_loss

__all__ = ["ModelConfig", "RelVAE", "CollatedBatch", "collate_contexts"]


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 32
    d_emb: int = 50
    conv_channels: tuple[int, ...] = (16, 32, 64)
    d_att: int = 32
    fusion_hidden: int = 128
    decoder_hidden: int = 128
    n_heads: int = 1
    dtype: str = "float32"

    @property
    def channels(self) -> int:
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class CollatedBatch:
    """Constant per-context arrays for one training or embedding batch."""

    images: np.ndarray | None      # [B,3,H,W] or None when patches precomputed
    patches: np.ndarray | None     # [B,P,C] when images is None
    emb_s: np.ndarray              # [B,D_emb]
    emb_o: np.ndarray              # [B,D_emb]
    mask_s: np.ndarray             # [B,P]
    mask_o: np.ndarray             # [B,P]
    spatial: np.ndarray            # [B,14]
    scene_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.emb_s.shape[0]


class RelVAE:
    """The conditional VAE over relation contexts."""

    def __init__(self, config: ModelConfig, seed: int = 0, trainable_backbone: bool = True):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.backbone = ConvBackbone(rng, config.conv_channels, dtype=self.dtype) \
            if trainable_backbone else None
        self.encoder = Encoder(config.d_emb, config.channels, config.d_z, config.d_att,
                               config.fusion_hidden, config.n_heads, rng, self.dtype)
        self.decoder = Decoder(config.d_z, config.d_emb, config.channels, config.d_att,
                               config.decoder_hidden, config.n_heads, rng, self.dtype)

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.backbone is not None:
            for k, v in self.backbone.parameters().items():
                out[f"backbone.{k}"] = v
        for k, v in self.encoder.parameters().items():
            out[f"encoder.{k}"] = v
        for k, v in self.decoder.parameters().items():
            out[f"decoder.{k}"] = v
        return out

    # -- forward passes --------------------------------------------------------

    def patch_sequence(self, batch: CollatedBatch) -> Tensor:
        if batch.images is not None:
            if self.backbone is None:
                raise ValueError("batch carries raw images but the model has no backbone")
            return self.backbone.forward(Tensor(batch.images.astype(self.dtype)))
        return Tensor(batch.patches.astype(self.dtype))

    def forward_losses(self, batch: CollatedBatch, noise: np.ndarray,
                       weights: LossWeights) -> dict[str, Tensor]:
        """Full training graph for one batch with fixed reparameterization noise.

        ``noise`` is [B, D_z]; passing it explicitly keeps the whole loss a
        deterministic function of the parameters, which the finite-difference
        gradient checks rely on.
        """
        b = batch.size
        patches = self.patch_sequence(batch)
        emb_s = Tensor(batch.emb_s.astype(self.dtype))
        emb_o = Tensor(batch.emb_o.astype(self.dtype))
        mu, logvar, _, feats = self.encoder.forward(
            patches, emb_s, emb_o, batch.mask_s, batch.mask_o, batch.spatial)
        eps = Tensor(noise.astype(self.dtype))
        z = mu + (logvar * 0.5).exp() * eps
        sem_s, sem_o, vis, heat = self.decoder.forward(z, patches)
        d_emb = self.config.d_emb
        y_sem = concat([emb_s.reshape(b, 1, d_emb), emb_o.reshape(b, 1, d_emb)], axis=1)
        y_hat = concat([sem_s.reshape(b, 1, d_emb), sem_o.reshape(b, 1, d_emb)], axis=1)
        masks = np.stack([batch.mask_s, batch.mask_o], axis=1)  # [B,2,P]
        l_cos = cosine_loss(y_sem, y_hat)
        l_bbox = bbox_heatmap_loss(heat, masks)
        l_mse = mse_loss(feats, vis)
        l_kl = kl_loss(mu, logvar)
        return {
            "l_cos": l_cos, "l_bbox": l_bbox, "l_mse": l_mse, "l_kl": l_kl,
            "total": total_loss(l_cos, l_bbox, l_mse, l_kl, weights),
        }

    # -- single-context paths ---------------------------------------------------

    def feature_map_for(self, ctx: ContextInput,
                        feature_source: PrecomputedFeatureSource | None = None
                        ) -> ImageFeatureMap:
        if feature_source is not None:
            return feature_source.feature_map(ctx.scene)
        if self.backbone is None:
            raise ValueError("no backbone and no precomputed feature source")
        return self.backbone.feature_map(ctx.scene)

    def encode_context(self, ctx: ContextInput, table: EmbeddingTable,
                       featmap: ImageFeatureMap | None = None
                       ) -> tuple[PosteriorParams, np.ndarray]:
        if featmap is None:
            featmap = self.feature_map_for(ctx)
        return self.encoder.encode(ctx, featmap, table)

    def decode_on(self, z: LatentCode, featmap: ImageFeatureMap) -> DecodedContext:
        return self.decoder.decode(z, featmap)


def collate_contexts(contexts: list[ContextInput], table: EmbeddingTable,
                     grid: tuple[int, int],
                     feature_source: PrecomputedFeatureSource | None = None,
                     image_cache: dict[str, np.ndarray] | None = None) -> CollatedBatch:
    """Build the constant arrays for a batch of contexts.

    With a precomputed source the patch sequences are loaded per scene;
    otherwise rasters are stacked (cached per image id across calls via
    ``image_cache``) for the trainable backbone. All contexts in a batch
    must share one image size.
    """
    if not contexts:
        raise ValueError("empty batch")
    sizes = {(c.scene.width, c.scene.height) for c in contexts}
    if len(sizes) != 1:
        raise ValueError(f"mixed image sizes in one batch: {sorted(sizes)}")
    image_size = next(iter(sizes))
    emb_s = np.stack([table.vector(c.subject.label) for c in contexts])
    emb_o = np.stack([table.vector(c.object.label) for c in contexts])
    mask_s = np.stack([bbox_to_mask(c.subject.bbox, image_size, grid).flat() for c in contexts])
    mask_o = np.stack([bbox_to_mask(c.object.bbox, image_size, grid).flat() for c in contexts])
    spatial = np.stack([spatial_features(c.subject.bbox, c.object.bbox, image_size)
                        for c in contexts])
    scene_ids = [c.scene.image_id for c in contexts]
    if feature_source is not None:
        patches = np.stack([feature_source.feature_map(c.scene).patches() for c in contexts])
        return CollatedBatch(images=None, patches=patches, emb_s=emb_s, emb_o=emb_o,
                             mask_s=mask_s, mask_o=mask_o, spatial=spatial, scene_ids=scene_ids)
    images = []
    for c in contexts:
        if image_cache is not None and c.scene.image_id in image_cache:
            images.append(image_cache[c.scene.image_id])
        else:
            img = scene_image(c.scene)
            if image_cache is not None:
                image_cache[c.scene.image_id] = img
            images.append(img)
    return CollatedBatch(images=np.stack(images), patches=None, emb_s=emb_s, emb_o=emb_o,
                         mask_s=mask_s, mask_o=mask_o, spatial=spatial, scene_ids=scene_ids)
