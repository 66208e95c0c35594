"""Semantic separation via PCA.

Fits a linear projector on sampled feature vectors and projects dense
feature maps onto the top N principal components, discarding nuisance
appearance variation. Fitting is an exact eigendecomposition of the
(small) channel covariance; no iterative solver.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    FormatError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .features import DenseFeatureMap, _read_exact, _read_str, _write_str

DEFAULT_SAMPLE_COUNT = 40_000

_PROJECTOR_MAGIC = b"NLPC"
_PROJECTOR_VERSION = 1

# eigenvalues below this fraction of the largest count as numerically zero
_RANK_EPS = 1e-10


@dataclass
class PcaProjector:
    """Mean vector plus orthonormal component rows, by descending variance."""

    mean: np.ndarray  # (C,)
    components: np.ndarray  # (N, C), rows orthonormal
    explained_variance: np.ndarray  # (N,), non-increasing
    sample_count: int
    source_id: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_channels(self) -> int:
        return self.components.shape[1]

    def validate(self, ortho_tol: float = 1e-4):
        n, c = self.components.shape
        if n > c:
            raise ValidationError(f"n_components {n} exceeds channels {c}")
        if self.mean.shape != (c,):
            raise ShapeError(f"mean shape {self.mean.shape} != ({c},)")
        if self.explained_variance.shape != (n,):
            raise ShapeError("explained_variance length must equal n_components")
        gram = self.components @ self.components.T
        dev = np.abs(gram - np.eye(n)).max()
        if dev > ortho_tol:
            raise ValidationError(
                f"components not orthonormal (max deviation {dev:.3g})"
            )
        ev = self.explained_variance
        if np.any(ev < -1e-12) or np.any(np.diff(ev) > 1e-12):
            raise ValidationError(
                "explained_variance must be non-negative and non-increasing"
            )


@dataclass
class CoefficientMap:
    """Patch-resolution PCA coefficients, the layout before upsampling."""

    height_patches: int
    width_patches: int
    n_components: int
    values: np.ndarray  # (h, w, N)
    projector_id: str = ""

    def __post_init__(self):
        expected = (self.height_patches, self.width_patches, self.n_components)
        if self.values.shape != expected:
            raise ShapeError(f"values shape {self.values.shape} != {expected}")

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1, self.n_components)


def sample_feature_vectors(
    dataset: Iterable[DenseFeatureMap],
    count: int = DEFAULT_SAMPLE_COUNT,
    seed: int = 0,
) -> np.ndarray:
    """Uniform sample without replacement over all (image, cell) positions."""
    maps = list(dataset)
    if not maps:
        raise ParameterError("dataset is empty")
    channels = {m.channels for m in maps}
    if len(channels) > 1:
        raise ConsistencyError(f"maps disagree on channel count: {sorted(channels)}")
    stacked = np.concatenate([m.flatten() for m in maps], axis=0)
    total = stacked.shape[0]
    rng = np.random.default_rng(seed)
    if total <= count:
        if total < count:
            warnings.warn(
                f"only {total} feature vectors available, requested {count}; "
                "using all of them"
            )
        order = rng.permutation(total)
        return stacked[order]
    idx = rng.choice(total, size=count, replace=False)
    return stacked[idx]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Largest-magnitude entry of each row made positive; ties: lowest index."""
    out = components.copy()
    for i, row in enumerate(out):
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            out[i] = -row
    return out


def _complete_basis(
    components: np.ndarray, n_needed: int, dim: int, seed: int
) -> np.ndarray:
    """Gram-Schmidt completion with a seeded deterministic candidate basis."""
    rng = np.random.default_rng(seed)
    rows = [c for c in components]
    while len(rows) < n_needed:
        cand = rng.standard_normal(dim)
        for r in rows:
            cand -= (cand @ r) * r
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            rows.append(cand / norm)
    return np.array(rows)


def fit_pca(
    samples: np.ndarray, n_components: int, seed: int = 0, source_id: str = ""
) -> PcaProjector:
    """Exact covariance eigendecomposition, unbiased (M-1) normalization."""
    samples = np.asarray(samples, dtype=np.float64)
    m, c = samples.shape
    if m < 2:
        raise ParameterError(f"need at least 2 samples, got {m}")
    if n_components > min(m, c):
        raise ParameterError(
            f"n_components {n_components} exceeds min(samples, channels) "
            f"= {min(m, c)}"
        )
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order].T  # rows are components

    rank_floor = _RANK_EPS * max(eigvals[0], 1e-30)
    n_valid = int(np.sum(eigvals >= rank_floor))
    components = eigvecs[: min(n_components, n_valid)]
    if n_components > n_valid:
        components = _complete_basis(components, n_components, c, seed)
        eigvals = eigvals.copy()
        eigvals[n_valid:] = 0.0
    components = _fix_signs(components)
    explained = eigvals[:n_components]
    explained = np.minimum.accumulate(explained)  # guard fp ordering noise
    # quantize through float32 so the 32-bit file format round-trips bit-exactly
    return PcaProjector(
        mean=mean.astype(np.float32).astype(np.float64),
        components=np.ascontiguousarray(components, dtype=np.float32).astype(
            np.float64
        ),
        explained_variance=explained.astype(np.float32).astype(np.float64),
        sample_count=m,
        source_id=source_id,
    )


def project(fmap: DenseFeatureMap, projector: PcaProjector) -> CoefficientMap:
    """Per cell: a = components @ (f - mean)."""
    if fmap.channels != projector.n_channels:
        raise ShapeError(
            f"map has {fmap.channels} channels, projector expects "
            f"{projector.n_channels}"
        )
    flat = fmap.flatten().astype(np.float64) - projector.mean
    coeffs = flat @ projector.components.T
    return CoefficientMap(
        height_patches=fmap.height_patches,
        width_patches=fmap.width_patches,
        n_components=projector.n_components,
        values=coeffs.reshape(
            fmap.height_patches, fmap.width_patches, projector.n_components
        ),
        projector_id=projector.source_id,
    )


def reconstruct(coeffs: CoefficientMap, projector: PcaProjector) -> DenseFeatureMap:
    """Per cell: f_hat = components.T @ a + mean."""
    if coeffs.n_components != projector.n_components:
        raise ShapeError(
            f"coefficient map has {coeffs.n_components} components, projector "
            f"has {projector.n_components}"
        )
    flat = coeffs.flatten() @ projector.components + projector.mean
    return DenseFeatureMap(
        height_patches=coeffs.height_patches,
        width_patches=coeffs.width_patches,
        channels=projector.n_channels,
        stride_px=1,
        values=flat.reshape(
            coeffs.height_patches, coeffs.width_patches, projector.n_channels
        ).astype(np.float32),
        source_id=projector.source_id,
    )


def save_projector(projector: PcaProjector, path) -> None:
    c = projector.n_channels
    n = projector.n_components
    with open(path, "wb") as fh:
        fh.write(_PROJECTOR_MAGIC)
        fh.write(struct.pack("<H", _PROJECTOR_VERSION))
        fh.write(struct.pack("<III", c, n, projector.sample_count))
        _write_str(fh, projector.source_id)
        fh.write(np.ascontiguousarray(projector.mean, dtype="<f4").tobytes())
        fh.write(
            np.ascontiguousarray(projector.explained_variance, dtype="<f4").tobytes()
        )
        fh.write(np.ascontiguousarray(projector.components, dtype="<f4").tobytes())


def load_projector(path) -> PcaProjector:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _PROJECTOR_MAGIC:
            raise FormatError(f"{path}: bad magic, not a projector file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _PROJECTOR_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        c, n, sample_count = struct.unpack("<III", _read_exact(fh, 12))
        source_id = _read_str(fh)
        mean = np.frombuffer(_read_exact(fh, 4 * c), dtype="<f4").astype(np.float64)
        explained = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").astype(
            np.float64
        )
        comps = (
            np.frombuffer(_read_exact(fh, 4 * n * c), dtype="<f4")
            .reshape(n, c)
            .astype(np.float64)
        )
    return PcaProjector(
        mean=mean,
        components=comps,
        explained_variance=explained,
        sample_count=sample_count,
        source_id=source_id,
    )
