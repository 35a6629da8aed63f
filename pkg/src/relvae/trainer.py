"""Pretraining loop over predicate-free contexts, plus checkpoint I/O.

Everything is seed-deterministic: model init, batch order, and the
reparameterization noise each draw from streams derived from the config
seed, so a (dataset, config) pair fixes every logged loss value.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam
from .dataio import ContextInput, EmbeddingTable, SceneRecord, iter_contexts
from .features import PrecomputedFeatureSource
from .losses import LossBreakdown, LossWeights
from .model import CollatedBatch, ModelConfig, RelVAE, collate_contexts

__all__ = [
    "TrainConfig", "Checkpoint", "TrainingDivergedError", "CheckpointError",
    "pretrain", "save_checkpoint", "load_checkpoint", "build_model", "read_loss_csv",
]

CHECKPOINT_VERSION = "1"
_CKPT_MAGIC = b"RVCK"

LOSS_CSV_COLUMNS = ["step", "l_cos", "l_bbox", "l_mse", "l_kl", "total"]


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    alpha: float = 10.0
    beta: float = 0.1
    beta_warmup_frac: float = 0.2
    backbone: str = "conv"          # "conv" | "precomputed"
    feature_dir: str = ""           # used when backbone == "precomputed"
    d_z: int = 32
    eval_every: int = 0             # 0 disables periodic logging
    conv_channels: tuple[int, ...] = (16, 32, 64)
    d_att: int = 32
    fusion_hidden: int = 128
    decoder_hidden: int = 128
    n_heads: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.backbone not in ("conv", "precomputed"):
            raise ValueError(f"unknown backbone choice {self.backbone!r}")
        if not 0.0 <= self.beta_warmup_frac <= 1.0:
            raise ValueError("beta_warmup_frac must be in [0, 1]")

    def model_config(self, d_emb: int) -> ModelConfig:
        return ModelConfig(d_z=self.d_z, d_emb=d_emb, conv_channels=tuple(self.conv_channels),
                           d_att=self.d_att, fusion_hidden=self.fusion_hidden,
                           decoder_hidden=self.decoder_hidden, n_heads=self.n_heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class Checkpoint:
    version: str
    params: dict[str, np.ndarray]
    config: dict
    rng_state: dict
    step: int


def _beta_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up of the KL weight over the first warmup fraction of steps."""
    warmup = int(cfg.beta_warmup_frac * cfg.steps)
    if warmup <= 0:
        return cfg.beta
    return cfg.beta * min(1.0, (step + 1) / warmup)


def pretrain(scenes: list[SceneRecord], table: EmbeddingTable, cfg: TrainConfig,
             loss_csv: str | Path | None = None) -> Checkpoint:
    """Train the cVAE on contexts only; no predicate string is ever read."""
    contexts = [ctx for ctx, _ in iter_contexts(scenes, include_predicates=False)]
    if not contexts:
        raise ValueError("empty pretraining dataset (no annotated relations)")
    for ctx in contexts:
        table.vector(ctx.subject.label)
        table.vector(ctx.object.label)

    feature_source = None
    if cfg.backbone == "precomputed":
        if not cfg.feature_dir:
            raise ValueError("backbone='precomputed' requires feature_dir")
        feature_source = PrecomputedFeatureSource(cfg.feature_dir)

    model_cfg = cfg.model_config(d_emb=table.dim)
    model = RelVAE(model_cfg, seed=cfg.seed, trainable_backbone=(cfg.backbone == "conv"))
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)

    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    if model.backbone is not None:
        grid = model.backbone.grid_for((contexts[0].scene.width, contexts[0].scene.height))
    else:
        fmap = feature_source.feature_map(contexts[0].scene)
        grid = (fmap.grid_h, fmap.grid_w)

    image_cache: dict[str, np.ndarray] = {}
    n = len(contexts)
    history: list[LossBreakdown] = []
    for step in range(cfg.steps):
        idx = batch_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = collate_contexts([contexts[int(i)] for i in idx], table, grid,
                                 feature_source, image_cache)
        noise = noise_rng.standard_normal((batch.size, cfg.d_z))
        weights = LossWeights(alpha=cfg.alpha, beta=_beta_at(step, cfg))
        opt.zero_grad()
        parts = model.forward_losses(batch, noise, weights)
        breakdown = LossBreakdown.from_parts(
            parts["l_cos"].item(), parts["l_bbox"].item(), parts["l_mse"].item(),
            parts["l_kl"].item(), weights, batch.size)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: {breakdown} "
                f"(batch scenes: {batch.scene_ids})")
        history.append(breakdown)
        parts["total"].backward()
        opt.step()
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            print(f"step {step + 1}/{cfg.steps}  total={breakdown.total:.4f}  "
                  f"cos={breakdown.l_cos:.4f}  bbox={breakdown.l_bbox:.4f}  "
                  f"mse={breakdown.l_mse:.4f}  kl={breakdown.l_kl:.4f}")

    if loss_csv is not None:
        write_loss_csv(history, loss_csv)

    return Checkpoint(
        version=CHECKPOINT_VERSION,
        params={k: p.data.copy() for k, p in params.items()},
        config={
            "train": cfg.to_dict(),
            "model": model_cfg.to_dict(),
            "trainable_backbone": cfg.backbone == "conv",
        },
        rng_state={
            "batch": batch_rng.bit_generator.state,
            "noise": noise_rng.bit_generator.state,
        },
        step=cfg.steps,
    )


def write_loss_csv(history: list[LossBreakdown], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_COLUMNS)
        for step, row in enumerate(history):
            writer.writerow([step, repr(row.l_cos), repr(row.l_bbox),
                             repr(row.l_mse), repr(row.l_kl), repr(row.total)])


def read_loss_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Checkpoint container: magic, u32 header length, JSON header, raw tensor data.


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = sorted(ckpt.params)
    tensors = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name])
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "version": ckpt.version,
        "step": ckpt.step,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise CheckpointError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header JSON") from exc
        version = header.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version!r} not supported "
                f"(expected {CHECKPOINT_VERSION!r})")
        params = {}
        for meta in header["tensors"]:
            blob = fh.read(meta["nbytes"])
            if len(blob) < meta["nbytes"]:
                raise CheckpointError(f"{path}: truncated tensor data for {meta['name']!r}")
            params[meta["name"]] = np.frombuffer(blob, dtype=meta["dtype"]) \
                .reshape(meta["shape"]).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return Checkpoint(version=version, params=params, config=header["config"],
                      rng_state=header["rng_state"], step=header["step"])


def build_model(ckpt: Checkpoint) -> RelVAE:
    """Reconstruct a model from a checkpoint; outputs match the saved model bit-for-bit."""
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    model = RelVAE(model_cfg, seed=0, trainable_backbone=ckpt.config["trainable_backbone"])
    from .nnet import load_params

    load_params(model.parameters(), ckpt.params)
    return model
