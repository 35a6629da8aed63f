"""Few-shot predicate classifiers over frozen cVAE features.

The context representation is the posterior mean (no sampling), so
embedding is deterministic and the encoder stays untouched. Three
classifier routes: a 3-layer feed-forward head, nearest-neighbor in
latent space, and the language+spatial baseline featurizer trained with
the identical head for fairness.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, log_softmax, softmax
from .dataio import ContextInput, EmbeddingTable
from .encoder import SPATIAL_DIM, spatial_features
from .features import PrecomputedFeatureSource
from .model import RelVAE
from .nnet import Linear, collect_params
from .trainer import Checkpoint, build_model

__all__ = [
    "ContextFeature", "HeadConfig", "ClassifierHead", "KNNIndex",
    "embed_contexts", "train_head", "predict", "predict_scores",
    "knn1_predict", "knn_score_map", "baseline_features",
    "save_head", "load_head", "HeadFileError",
]


class HeadFileError(IOError):
    pass


@dataclass
class ContextFeature:
    vector: np.ndarray
    image_id: str
    relation_index: int | None


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 128
    steps: int = 500
    learning_rate: float = 1e-2
    seed: int = 0


class ClassifierHead:
    """Three affine layers with tanh between, mapping features to predicate scores."""

    def __init__(self, d_in: int, vocab: list[str], cfg: HeadConfig,
                 feature_kind: str = "latent"):
        if not vocab:
            raise ValueError("empty predicate vocabulary")
        self.vocab = list(vocab)
        self.cfg = cfg
        self.feature_kind = feature_kind
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        self.l1 = Linear(d_in, cfg.hidden, rng)
        self.l2 = Linear(cfg.hidden, cfg.hidden, rng)
        self.l3 = Linear(cfg.hidden, len(vocab), rng)

    @property
    def d_in(self) -> int:
        return self.l1.w.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return self.l3(self.l2(self.l1(x).tanh()).tanh())

    def parameters(self) -> dict[str, Tensor]:
        return collect_params({"l1": self.l1, "l2": self.l2, "l3": self.l3})


def embed_contexts(model: RelVAE | Checkpoint, contexts: list[ContextInput],
                   table: EmbeddingTable,
                   feature_source: PrecomputedFeatureSource | None = None
                   ) -> list[ContextFeature]:
    """Posterior means for a list of contexts, order preserved, encoder frozen.

    Feature maps are computed once per scene and shared across that
    scene's contexts.
    """
    if isinstance(model, Checkpoint):
        model = build_model(model)
    fmap_cache: dict[str, object] = {}
    out = []
    for ctx in contexts:
        sid = ctx.scene.image_id
        if sid not in fmap_cache:
            fmap_cache[sid] = model.feature_map_for(ctx, feature_source)
        params, _ = model.encode_context(ctx, table, fmap_cache[sid])
        out.append(ContextFeature(vector=params.mu, image_id=sid,
                                  relation_index=ctx.relation_index))
    return out


def train_head(features: list[ContextFeature] | np.ndarray, labels: list[str],
               cfg: HeadConfig = HeadConfig(), vocab: list[str] | None = None,
               feature_kind: str = "latent") -> ClassifierHead:
    """Fit the head by full-batch cross-entropy to a fixed step budget."""
    x = np.stack([f.vector for f in features]) if not isinstance(features, np.ndarray) \
        else np.asarray(features)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty [n, d] feature matrix")
    if len(labels) != x.shape[0]:
        raise ValueError("features and labels length mismatch")
    if vocab is None:
        vocab = sorted(set(labels))
    index = {p: i for i, p in enumerate(vocab)}
    try:
        y = np.array([index[l] for l in labels])
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} outside vocabulary") from None
    head = ClassifierHead(x.shape[1], vocab, cfg, feature_kind)
    onehot = np.zeros((len(y), len(vocab)), dtype=np.float32)
    onehot[np.arange(len(y)), y] = 1.0
    xt = Tensor(x.astype(np.float32))
    oh = Tensor(onehot)
    opt = Adam(head.parameters(), lr=cfg.learning_rate)
    for _ in range(cfg.steps):
        opt.zero_grad()
        logits = head.forward(xt)
        loss = -(oh * log_softmax(logits, axis=-1)).sum(axis=-1).mean()
        loss.backward()
        opt.step()
    return head


def predict(head: ClassifierHead, feature: np.ndarray) -> np.ndarray:
    """Raw score vector over the head's vocabulary (ranking-equivalent to softmax)."""
    f = np.asarray(feature, dtype=np.float32)
    if f.shape != (head.d_in,):
        raise ValueError(f"feature shape {f.shape} does not match head input {head.d_in}")
    return head.forward(Tensor(f[None])).data[0].copy()


def predict_scores(head: ClassifierHead, feature: np.ndarray) -> dict[str, float]:
    scores = predict(head, feature)
    return {p: float(s) for p, s in zip(head.vocab, scores)}


@dataclass
class KNNIndex:
    """Support set for nearest-neighbor prediction in latent space."""

    features: np.ndarray           # [n, d]
    labels: list[str]
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ValueError("support features/labels mismatch")
        if not self.vocab:
            self.vocab = sorted(set(self.labels))


def knn1_predict(support: KNNIndex, query: np.ndarray) -> str:
    """Label of the Euclidean-nearest support point, ties lexicographic."""
    if support.features.shape[0] == 0:
        raise ValueError("empty support set")
    d = np.linalg.norm(support.features - np.asarray(query)[None], axis=1)
    dmin = d.min()
    candidates = [support.labels[i] for i in np.flatnonzero(d == dmin)]
    return min(candidates)


def knn_score_map(support: KNNIndex, query: np.ndarray) -> dict[str, float]:
    """Per-predicate score = negative distance to that predicate's nearest support.

    The argmax equals :func:`knn1_predict` (up to the same lexicographic
    tie rule); predicates with no support score -inf is avoided by using
    the worst observed distance minus 1.
    """
    d = np.linalg.norm(support.features - np.asarray(query)[None], axis=1)
    per: dict[str, float] = {}
    for dist, label in zip(d, support.labels):
        if label not in per or -dist > per[label]:
            per[label] = -float(dist)
    floor = min(per.values()) - 1.0
    return {p: per.get(p, floor) for p in support.vocab}


def baseline_features(ctx: ContextInput, table: EmbeddingTable) -> np.ndarray:
    """Language+spatial featurizer: [emb_s, emb_o, spatial(b_s, b_o)]."""
    emb_s = table.vector(ctx.subject.label)
    emb_o = table.vector(ctx.object.label)
    spat = spatial_features(ctx.subject.bbox, ctx.object.bbox,
                            (ctx.scene.width, ctx.scene.height))
    return np.concatenate([emb_s, emb_o, spat.astype(np.float32)])


# ---------------------------------------------------------------------------
# Head files: same container idea as checkpoints (JSON header + raw tensors).

_HEAD_MAGIC = b"RVHD"
HEAD_VERSION = "1"


def save_head(head: ClassifierHead | KNNIndex, path) -> None:
    if isinstance(head, ClassifierHead):
        arrays = {k: p.data for k, p in head.parameters().items()}
        meta = {
            "kind": "ffn",
            "feature_kind": head.feature_kind,
            "vocab": head.vocab,
            "config": {"hidden": head.cfg.hidden, "steps": head.cfg.steps,
                       "learning_rate": head.cfg.learning_rate, "seed": head.cfg.seed},
            "d_in": head.d_in,
        }
    elif isinstance(head, KNNIndex):
        arrays = {"features": head.features}
        meta = {"kind": "knn1", "labels": head.labels, "vocab": head.vocab}
    else:
        raise TypeError(f"cannot save head of type {type(head).__name__}")
    names = sorted(arrays)
    tensors = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        tensors.append({"name": name, "shape": list(arr.shape), "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
    header = json.dumps({"version": HEAD_VERSION, "meta": meta, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_head(path) -> ClassifierHead | KNNIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != _HEAD_MAGIC:
            raise HeadFileError(f"{path}: not a head file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len))
        if header.get("version") != HEAD_VERSION:
            raise HeadFileError(f"{path}: unsupported head version {header.get('version')!r}")
        arrays = {}
        for meta in header["tensors"]:
            blob = fh.read(meta["nbytes"])
            if len(blob) < meta["nbytes"]:
                raise HeadFileError(f"{path}: truncated tensor {meta['name']!r}")
            arrays[meta["name"]] = np.frombuffer(blob, dtype=np.float32) \
                .reshape(meta["shape"]).copy()
    info = header["meta"]
    if info["kind"] == "knn1":
        return KNNIndex(features=arrays["features"], labels=list(info["labels"]),
                        vocab=list(info["vocab"]))
    cfg = HeadConfig(**info["config"])
    head = ClassifierHead(info["d_in"], list(info["vocab"]), cfg, info["feature_kind"])
    from .nnet import load_params

    load_params(head.parameters(), arrays)
    return head
