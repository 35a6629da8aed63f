"""Latent-space diagnostics as reproducible artifacts: latent exports
with colorization metadata, deterministic 2D projection, cross-image
reconstruction overlays, and the semantics-vs-location perturbation probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import BBox, ContextInput, EmbeddingTable, SceneRecord, iter_contexts, scene_image
from .decoder import DecodedContext, nearest_label
from .encoder import LatentCode
from .features import ImageFeatureMap, bbox_to_mask
from .model import RelVAE
from .trainer import Checkpoint, build_model

__all__ = ["LatentRecord", "export_latents", "project_2d", "cross_reconstruct",
           "perturbed_probe", "heatmap_mass", "render_heatmap_overlay"]


@dataclass
class LatentRecord:
    feature: np.ndarray
    predicate: str
    subject_label: str
    object_label: str
    norm_subject_cx: float
    image_id: str
    relation_index: int


def export_latents(model: RelVAE | Checkpoint, scenes: list[SceneRecord],
                   table: EmbeddingTable, out_csv: str | Path | None = None
                   ) -> list[LatentRecord]:
    """One latent record per annotated relation, with colorization fields.

    CSV columns: image_id, relation_index, predicate, subject_label,
    object_label, norm_subject_cx, z0..z{D-1}.
    """
    if isinstance(model, Checkpoint):
        model = build_model(model)
    records = []
    fmap_cache: dict[str, ImageFeatureMap] = {}
    for ctx, predicate in iter_contexts(scenes, include_predicates=True):
        sid = ctx.scene.image_id
        if sid not in fmap_cache:
            fmap_cache[sid] = model.feature_map_for(ctx)
        params, _ = model.encode_context(ctx, table, fmap_cache[sid])
        records.append(LatentRecord(
            feature=params.mu,
            predicate=predicate,
            subject_label=ctx.subject.label,
            object_label=ctx.object.label,
            norm_subject_cx=ctx.subject.bbox.center[0] / ctx.scene.width,
            image_id=sid,
            relation_index=ctx.relation_index,
        ))
    if out_csv is not None:
        d_z = len(records[0].feature) if records else 0
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "relation_index", "predicate", "subject_label",
                             "object_label", "norm_subject_cx"] + [f"z{i}" for i in range(d_z)])
            for r in records:
                writer.writerow([r.image_id, r.relation_index, r.predicate, r.subject_label,
                                 r.object_label, repr(r.norm_subject_cx)]
                                + [repr(float(v)) for v in r.feature])
    return records


def project_2d(features: np.ndarray, method: str = "pca",
               out_path: str | Path | None = None) -> np.ndarray | None:
    """Project [n, d] features to 2D.

    ``pca`` returns the top-2 principal component scores, with each
    component's sign fixed so its largest-magnitude loading is positive.
    ``external`` writes the raw features as TSV for an outside t-SNE tool
    and returns None.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected [n, d] features, got shape {x.shape}")
    if method == "external":
        if out_path is None:
            raise ValueError("method='external' needs out_path")
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in x:
                fh.write("\t".join(repr(float(v)) for v in row) + "\n")
        return None
    if method != "pca":
        raise ValueError(f"unknown projection method {method!r}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to project")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    if np.allclose(cov, 0.0):
        raise ValueError("zero-variance features cannot be projected")
    evals, evecs = np.linalg.eigh(cov)
    comps = evecs[:, ::-1][:, :2].T  # [2, d], descending eigenvalue order
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    points = centered @ comps.T
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in points:
                fh.write("\t".join(repr(float(v)) for v in row) + "\n")
    return points


def heatmap_mass(heat: np.ndarray, mask_flat: np.ndarray) -> float:
    """Total heatmap probability inside a flattened {0,1} cell mask."""
    return float((heat * mask_flat).sum())


def render_heatmap_overlay(image: np.ndarray, heat: np.ndarray,
                           grid: tuple[int, int], path: str | Path) -> None:
    """Overlay a patch-grid heatmap on a [3,H,W] image and write a PNG.

    Upscaling is nearest-neighbor so each pixel's tint maps back to
    exactly one grid cell.
    """
    gh, gw = grid
    h, w = image.shape[1], image.shape[2]
    cell = heat.reshape(gh, gw)
    peak = cell.max()
    norm = cell / peak if peak > 0 else cell
    up = np.repeat(np.repeat(norm, h // gh, axis=0), w // gw, axis=1)
    base = image.transpose(1, 2, 0)
    overlay = base * 0.5
    overlay[:, :, 0] = np.clip(overlay[:, :, 0] + 0.5 * up, 0.0, 1.0)
    Image.fromarray((overlay * 255).astype(np.uint8)).save(path)


def cross_reconstruct(model: RelVAE | Checkpoint, source_ctx: ContextInput,
                      target_scene: SceneRecord, table: EmbeddingTable,
                      out_dir: str | Path | None = None, overlay_id: str = "cross"
                      ) -> dict:
    """Encode a context from its source image and decode it on a target image.

    Returns the decoded context, the predicted nearest labels, and (when
    ``out_dir`` is given) the paths of the subject/object heatmap
    overlays ``{id}_subj.png`` / ``{id}_obj.png``.
    """
    if isinstance(model, Checkpoint):
        model = build_model(model)
    src_map = model.feature_map_for(source_ctx)
    params, _ = model.encode_context(source_ctx, table, src_map)
    tgt_ctx = ContextInput(target_scene, source_ctx.subject, source_ctx.object)
    tgt_map = model.feature_map_for(tgt_ctx)
    decoded = model.decode_on(LatentCode(z=params.mu), tgt_map)
    result = {
        "decoded": decoded,
        "subject_label": nearest_label(decoded.sem_s, table),
        "object_label": nearest_label(decoded.sem_o, table),
        "overlays": {},
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        grid = (tgt_map.grid_h, tgt_map.grid_w)
        img = scene_image(target_scene)
        for entity, heat in (("subj", decoded.heat_s), ("obj", decoded.heat_o)):
            path = out_dir / f"{overlay_id}_{entity}.png"
            render_heatmap_overlay(img, heat, grid, path)
            result["overlays"][entity] = str(path)
    return result


def perturbed_probe(model: RelVAE | Checkpoint, ctx: ContextInput,
                    bbox_override: BBox, table: EmbeddingTable) -> dict:
    """Tamper the object's box, re-encode, and measure where the decoder looks.

    Reports the decoder object-heatmap mass inside the override box
    versus inside the original (semantics-consistent) box, which is the
    quantity behind the which-modality-prevails analysis.
    """
    if isinstance(model, Checkpoint):
        model = build_model(model)
    scene = ctx.scene
    bbox_override.validate(scene.image_id, scene.width, scene.height)
    from .dataio import ObjectInstance

    tampered_obj = ObjectInstance(id=ctx.object.id, label=ctx.object.label, bbox=bbox_override)
    tampered = ContextInput(scene, ctx.subject, tampered_obj, ctx.relation_index)
    fmap = model.feature_map_for(ctx)
    params, _ = model.encode_context(tampered, table, fmap)
    decoded = model.decode_on(LatentCode(z=params.mu), fmap)
    grid = (fmap.grid_h, fmap.grid_w)
    image_size = (scene.width, scene.height)
    override_mask = bbox_to_mask(bbox_override, image_size, grid).flat()
    original_mask = bbox_to_mask(ctx.object.bbox, image_size, grid).flat()
    return {
        "object_mass_in_override_box": heatmap_mass(decoded.heat_o, override_mask),
        "object_mass_in_original_box": heatmap_mass(decoded.heat_o, original_mask),
        "subject_mass_in_subject_box": heatmap_mass(
            decoded.heat_s, bbox_to_mask(ctx.subject.bbox, image_size, grid).flat()),
        "predicted_subject_label": nearest_label(decoded.sem_s, table)[0],
        "predicted_object_label": nearest_label(decoded.sem_o, table)[0],
    }
