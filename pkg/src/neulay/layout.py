"""Neural layout assembly.

Extract -> project -> nearest-neighbor upsample to image resolution ->
normalize into [-1, 1], plus an RGB visualization and a binary file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, ParameterError, ShapeError
from .features import (
    BackboneConvention,
    DenseFeatureMap,
    ToyBackbone,
    _read_exact,
    _read_str,
    _write_str,
    extract_dense_features,
    nearest_indices,
)
from .pca import CoefficientMap, PcaProjector, project

_LAYOUT_MAGIC = b"NLLO"
_LAYOUT_VERSION = 1


@dataclass
class NeuralLayout:
    """Image-resolution, N-channel conditioning map in [-1, 1]."""

    height_px: int
    width_px: int
    n_components: int
    values: np.ndarray  # (H, W, N) float32
    normalization: np.ndarray  # (N, 2) per-channel (shift, scale)
    projector_id: str = ""

    def __post_init__(self):
        expected = (self.height_px, self.width_px, self.n_components)
        if self.values.shape != expected:
            raise ShapeError(f"values shape {self.values.shape} != {expected}")
        self.normalization = np.asarray(self.normalization, dtype=np.float32)
        if self.normalization.shape != (self.n_components, 2):
            raise ShapeError("normalization must hold one (shift, scale) per channel")


def upsample_nearest(
    coeffs: CoefficientMap, height_px: int, width_px: int
) -> np.ndarray:
    """Exact nearest-neighbor upsample: dst (y, x) copies
    src (floor(y*h_p/H), floor(x*w_p/W))."""
    if height_px <= 0 or width_px <= 0:
        raise ParameterError("target resolution must be positive")
    if height_px < coeffs.height_patches or width_px < coeffs.width_patches:
        raise ParameterError(
            f"target {height_px}x{width_px} smaller than source grid "
            f"{coeffs.height_patches}x{coeffs.width_patches}"
        )
    rows = nearest_indices(coeffs.height_patches, height_px)
    cols = nearest_indices(coeffs.width_patches, width_px)
    return coeffs.values[rows][:, cols]


def compute_normalization_stats(
    coeff_maps: Sequence[CoefficientMap],
    lo_percentile: float = 1.0,
    hi_percentile: float = 99.0,
) -> np.ndarray:
    """Per-channel (shift, scale) from robust percentiles over a corpus."""
    if not coeff_maps:
        raise ParameterError("need at least one coefficient map")
    stacked = np.concatenate([m.flatten() for m in coeff_maps], axis=0)
    lo = np.percentile(stacked, lo_percentile, axis=0)
    hi = np.percentile(stacked, hi_percentile, axis=0)
    shift = (lo + hi) / 2.0
    scale = np.maximum((hi - lo) / 2.0, 1e-6)
    return np.stack([shift, scale], axis=1).astype(np.float32)


def normalize_layout(raw: np.ndarray, stats: np.ndarray) -> np.ndarray:
    """clamp((raw - shift) / scale, -1, 1) per channel."""
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 2 or stats.shape[0] != raw.shape[-1]:
        raise ShapeError("stats must provide (shift, scale) per channel")
    shift, scale = stats[:, 0], stats[:, 1]
    if np.any(scale <= 0):
        raise ParameterError("normalization scale must be positive")
    return np.clip((raw - shift) / scale, -1.0, 1.0)


def build_neural_layout(
    image: np.ndarray,
    convention: BackboneConvention,
    backend: ToyBackbone,
    projector: PcaProjector,
    target_resolution: tuple,
    stats: np.ndarray,
) -> NeuralLayout:
    """Full conditioning path for one image."""
    fmap = extract_dense_features(image, convention, backend)
    if projector.source_id and fmap.source_id != projector.source_id:
        raise ConsistencyError(
            f"projector was fit on {projector.source_id!r} features, backend "
            f"produces {fmap.source_id!r}"
        )
    coeffs = project(fmap, projector)
    h, w = target_resolution
    raw = upsample_nearest(coeffs, h, w)
    values = normalize_layout(raw, stats).astype(np.float32)
    return NeuralLayout(
        height_px=h,
        width_px=w,
        n_components=projector.n_components,
        values=values,
        normalization=stats,
        projector_id=projector.source_id,
    )


def layout_to_rgb(layout: NeuralLayout) -> np.ndarray:
    """First three channels min-max scaled to 8-bit, for figures."""
    n = min(3, layout.n_components)
    chans = []
    for i in range(n):
        ch = layout.values[:, :, i].astype(np.float64)
        lo, hi = ch.min(), ch.max()
        if hi - lo < 1e-12:
            chans.append(np.full(ch.shape, 128, dtype=np.uint8))
        else:
            chans.append(
                np.round((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)
            )
    if n < 3:
        chans = [chans[0]] * 3  # grayscale fallback
    return np.stack(chans, axis=2)


def save_layout(layout: NeuralLayout, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_LAYOUT_MAGIC)
        fh.write(struct.pack("<H", _LAYOUT_VERSION))
        fh.write(
            struct.pack(
                "<III", layout.height_px, layout.width_px, layout.n_components
            )
        )
        _write_str(fh, layout.projector_id)
        fh.write(np.ascontiguousarray(layout.normalization, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(layout.values, dtype="<f4").tobytes())


def load_layout(path) -> NeuralLayout:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _LAYOUT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a layout file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _LAYOUT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        h, w, n = struct.unpack("<III", _read_exact(fh, 12))
        projector_id = _read_str(fh)
        norm = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f4").reshape(n, 2).copy()
        values = (
            np.frombuffer(_read_exact(fh, 4 * h * w * n), dtype="<f4")
            .reshape(h, w, n)
            .copy()
        )
    return NeuralLayout(
        height_px=h,
        width_px=w,
        n_components=n,
        values=values,
        normalization=norm,
        projector_id=projector_id,
    )
