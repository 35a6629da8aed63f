"""Patch-grid image features and bbox-to-grid binary masks.

Feature sources implement one of two strategies: a small trainable CNN
(stride 8 overall) for end-to-end runs, or a loader of precomputed
feature-map files for real datasets where the backbone ran elsewhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, conv2d
from .dataio import BBox, SceneRecord, scene_image
from .nnet import collect_params

__all__ = [
    "ImageFeatureMap", "BinaryMask", "ConvBackbone", "PrecomputedFeatureSource",
    "extract_features", "bbox_to_mask", "write_feature_map", "read_feature_map",
    "FeatureFileError",
]


class FeatureFileError(IOError):
    pass


@dataclass
class ImageFeatureMap:
    """Patch-grid feature map [grid_h, grid_w, C] for one image."""

    data: np.ndarray
    image_size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be [grid_h, grid_w, C], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def patches(self) -> np.ndarray:
        """Flattened [P, C] patch sequence, row-major over the grid."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass
class BinaryMask:
    """{0,1} occupancy over the patch grid, derived from a bbox."""

    data: np.ndarray  # [grid_h, grid_w]

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def count(self) -> int:
        return int(self.data.sum())


def bbox_to_mask(bbox: BBox, image_size: tuple[int, int], grid: tuple[int, int]) -> BinaryMask:
    """Cell is set iff the bbox covers more than half of it.

    If no cell clears the threshold the cell containing the bbox center is
    set, so a valid bbox always yields at least one cell.
    """
    width, height = image_size
    grid_h, grid_w = grid
    cell_w = width / grid_w
    cell_h = height / grid_h
    cols = np.arange(grid_w)
    rows = np.arange(grid_h)
    overlap_x = np.minimum(bbox.x2, (cols + 1) * cell_w) - np.maximum(bbox.x1, cols * cell_w)
    overlap_y = np.minimum(bbox.y2, (rows + 1) * cell_h) - np.maximum(bbox.y1, rows * cell_h)
    frac = np.outer(np.clip(overlap_y, 0, None), np.clip(overlap_x, 0, None)) / (cell_w * cell_h)
    mask = (frac > 0.5).astype(np.float32)
    if not mask.any():
        cx, cy = bbox.center
        col = min(int(cx / cell_w), grid_w - 1)
        row = min(int(cy / cell_h), grid_h - 1)
        mask[row, col] = 1.0
    return BinaryMask(mask)


class ConvBackbone:
    """Three tanh conv stages, stride 2 each (8 overall), NCHW in, grid map out."""

    def __init__(self, rng: np.random.Generator, channels: tuple[int, ...] = (16, 32, 64),
                 in_channels: int = 3, dtype=np.float32):
        self.channels = tuple(channels)
        self.stride = 2 ** len(self.channels)
        self.out_channels = self.channels[-1]
        self.dtype = dtype
        self._weights = []
        self._biases = []
        cin = in_channels
        for cout in self.channels:
            w = (rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)).astype(dtype)
            self._weights.append(Tensor(w, requires_grad=True))
            self._biases.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
            cin = cout

    def forward(self, images: Tensor) -> Tensor:
        """[B, 3, H, W] -> patch sequence [B, P, C]."""
        x = images
        for w, b in zip(self._weights, self._biases):
            x = conv2d(x, w, b, stride=2, pad=1).tanh()
        batch, c, gh, gw = x.shape
        return x.reshape(batch, c, gh * gw).transpose(0, 2, 1)

    def grid_for(self, image_size: tuple[int, int]) -> tuple[int, int]:
        width, height = image_size
        if width % self.stride or height % self.stride:
            raise ValueError(f"image dims {image_size} not divisible by backbone stride {self.stride}")
        return (height // self.stride, width // self.stride)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out

    def feature_map(self, scene: SceneRecord, image: np.ndarray | None = None) -> ImageFeatureMap:
        """Deterministic eval-mode extraction for one scene."""
        if image is None:
            image = scene_image(scene)
        return extract_features(image, self)


class PrecomputedFeatureSource:
    """Loads per-image feature maps from ``<dir>/<image_id>.rvfm`` files."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def feature_map(self, scene: SceneRecord, image: np.ndarray | None = None) -> ImageFeatureMap:
        path = self.directory / f"{scene.image_id}.rvfm"
        if not path.exists():
            raise FeatureFileError(f"no precomputed feature map for {scene.image_id!r} at {path}")
        return read_feature_map(path)

    def parameters(self) -> dict[str, Tensor]:
        return {}


def extract_features(image: np.ndarray, backbone: ConvBackbone) -> ImageFeatureMap:
    """Run the backbone on one [3, H, W] raster; deterministic in eval use."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got shape {image.shape}")
    h, w = image.shape[1], image.shape[2]
    grid_h, grid_w = backbone.grid_for((w, h))
    x = Tensor(image[None].astype(backbone.dtype))
    patches = backbone.forward(x).data[0]  # [P, C]
    return ImageFeatureMap(patches.reshape(grid_h, grid_w, backbone.out_channels), image_size=(w, h))


# ---------------------------------------------------------------------------
# Precomputed feature map container: little-endian header + raw float32 data.

_MAGIC = b"RVFM"
_HEADER = struct.Struct("<4sHHHHHB")  # magic, grid_h, grid_w, C, img_w, img_h, dtype code


def write_feature_map(fmap: ImageFeatureMap, path: str | Path) -> None:
    data = np.ascontiguousarray(fmap.data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, fmap.grid_h, fmap.grid_w, fmap.channels,
                              fmap.image_size[0], fmap.image_size[1], 0))
        fh.write(data.tobytes())


def read_feature_map(path: str | Path) -> ImageFeatureMap:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        magic, gh, gw, c, img_w, img_h, dtype_code = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        if dtype_code != 0:
            raise FeatureFileError(f"{path}: unsupported dtype code {dtype_code}")
        raw = fh.read()
    expected = gh * gw * c * 4
    if len(raw) != expected:
        raise FeatureFileError(f"{path}: expected {expected} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(gh, gw, c)
    return ImageFeatureMap(data.copy(), image_size=(img_w, img_h))
