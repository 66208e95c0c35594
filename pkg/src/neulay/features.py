"""Dense feature extraction.

A deterministic toy transformer backbone stands in for real foundation
models: a seeded patch embedder followed by a stack of self-attention
blocks. Per-backbone selection conventions (which layer, which attention
feature, CLS handling) are declarative records, and precomputed features
from real backbones can be imported from disk through the same interface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    ShapeError,
    UnavailableFeatureError,
    ValidationError,
)

FEATURE_KINDS = ("key", "query", "value", "token", "activation")

_FEATURE_MAGIC = b"NLFM"
_FEATURE_VERSION = 1


@dataclass
class AttentionBlockOutput:
    """Per-layer attention features, rows are tokens (CLS first if present)."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    tokens: np.ndarray
    has_cls: bool
    cross_input: Optional[np.ndarray] = None
    activations: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.tokens.shape[0]
        for name in ("queries", "keys", "values"):
            m = getattr(self, name)
            if m.shape[0] != n:
                raise ShapeError(
                    f"{name} has {m.shape[0]} tokens, tokens matrix has {n}"
                )

    @property
    def n_patch_tokens(self) -> int:
        return self.tokens.shape[0] - (1 if self.has_cls else 0)


@dataclass
class DenseFeatureMap:
    """Per-patch feature grid with spatial stride metadata."""

    height_patches: int
    width_patches: int
    channels: int
    stride_px: int
    values: np.ndarray  # (h, w, c) float32
    source_id: str

    def __post_init__(self):
        expected = (self.height_patches, self.width_patches, self.channels)
        if self.values.shape != expected:
            raise ShapeError(
                f"values shape {self.values.shape} != declared {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            idx = tuple(int(i) for i in np.argwhere(~np.isfinite(self.values))[0])
            raise ValidationError(f"non-finite feature value at cell {idx}")

    @property
    def image_height_px(self) -> int:
        return self.height_patches * self.stride_px

    @property
    def image_width_px(self) -> int:
        return self.width_patches * self.stride_px

    def flatten(self) -> np.ndarray:
        """Row-major (h, w) -> (tokens, channels) flattening."""
        return self.values.reshape(-1, self.channels)


@dataclass(frozen=True)
class BackboneConvention:
    """Declarative record of how features are pulled from a backbone."""

    backbone_id: str
    layer_selector: tuple
    feature_kind: str
    exclude_cls: bool = True
    concat_layers: bool = False
    caption_required: bool = False

    def __post_init__(self):
        if len(self.layer_selector) == 0:
            raise ConfigurationError("layer_selector must be non-empty")
        if self.concat_layers and len(self.layer_selector) < 2:
            raise ConfigurationError("concat_layers requires more than one layer")
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigurationError(f"unknown feature kind {self.feature_kind!r}")


# The four documented extraction conventions. "sd" indexes the denoising
# U-Net's activation stack; on the toy backend that requires >= 9 blocks.
CONVENTIONS = {
    "dino": BackboneConvention("dino", (-1,), "key", exclude_cls=True),
    "dinov2": BackboneConvention("dinov2", (-1,), "token", exclude_cls=True),
    "clip": BackboneConvention("clip", (-1,), "token", exclude_cls=True),
    "sd": BackboneConvention(
        "sd", (2, 5, 8), "activation", exclude_cls=True,
        concat_layers=True, caption_required=True,
    ),
}


@dataclass(frozen=True)
class ToyBackboneParams:
    """Seeded configuration of the deterministic toy backbone."""

    seed: int = 0
    patch_size_px: int = 4
    channels_per_layer: tuple = (16, 16, 16)
    has_cls: bool = True
    input_channels: int = 3


def _toy_weights(params: ToyBackboneParams) -> dict:
    """All weights are a pure function of the seed."""
    rng = np.random.default_rng(params.seed)
    p = params.patch_size_px
    in_dim = p * p * params.input_channels
    dims = list(params.channels_per_layer)
    w = {
        "embed": rng.standard_normal((in_dim, dims[0])).astype(np.float32)
        / np.sqrt(in_dim),
        "cls": rng.standard_normal(dims[0]).astype(np.float32),
    }
    prev = dims[0]
    for l, c in enumerate(dims):
        scale = 1.0 / np.sqrt(prev)
        for name in ("q", "k", "v", "skip"):
            w[f"{name}{l}"] = rng.standard_normal((prev, c)).astype(np.float32) * scale
        w[f"h{l}"] = rng.standard_normal((c, c)).astype(np.float32) / np.sqrt(c)
        w[f"o{l}"] = rng.standard_normal((c, c)).astype(np.float32) / np.sqrt(c)
        prev = c
    return w


def _positional_encoding(hp: int, wp: int, channels: int) -> np.ndarray:
    """Low-amplitude sinusoidal position code so attention is spatially aware."""
    ys, xs = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    freqs = np.arange(1, channels + 1)
    phase = (
        ys.reshape(-1, 1) * freqs / max(hp, 1)
        + xs.reshape(-1, 1) * freqs**2 / max(wp, 1)
    )
    return (0.1 * np.sin(2 * np.pi * phase)).astype(np.float32)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def image_to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def toy_backbone_forward(
    image: np.ndarray, params: ToyBackboneParams
) -> list[AttentionBlockOutput]:
    """Run the toy backbone, returning one AttentionBlockOutput per layer."""
    img = image_to_float(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    p = params.patch_size_px
    if h % p != 0 or w % p != 0:
        raise ShapeError(
            f"image dims {h}x{w} not divisible by patch size {p}"
        )
    if c != params.input_channels:
        raise ShapeError(f"image has {c} channels, expected {params.input_channels}")

    weights = _toy_weights(params)
    hp, wp = h // p, w // p
    patches = (
        img.reshape(hp, p, wp, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(hp * wp, p * p * c)
    )
    tokens = (patches - 0.5) @ weights["embed"]
    tokens += _positional_encoding(hp, wp, tokens.shape[1])
    if params.has_cls:
        tokens = np.vstack([weights["cls"][None, :], tokens])

    outputs = []
    for l in range(len(params.channels_per_layer)):
        q = tokens @ weights[f"q{l}"]
        k = tokens @ weights[f"k{l}"]
        v = tokens @ weights[f"v{l}"]
        attn = _softmax(q @ k.T / np.sqrt(k.shape[1]))
        pre = attn @ v + tokens @ weights[f"skip{l}"]
        hidden = np.tanh(pre @ weights[f"h{l}"])
        out = pre + hidden @ weights[f"o{l}"]
        # per-token RMS normalization keeps deep stacks numerically tame
        out = out / np.sqrt((out**2).mean(axis=1, keepdims=True) + 1e-6)
        outputs.append(
            AttentionBlockOutput(
                queries=q.astype(np.float32),
                keys=k.astype(np.float32),
                values=v.astype(np.float32),
                tokens=out.astype(np.float32),
                has_cls=params.has_cls,
                activations=hidden.astype(np.float32),
            )
        )
        tokens = out
    return outputs


def select_attention_features(
    block: AttentionBlockOutput,
    kind: str,
    exclude_cls: bool,
    cross_derived: bool = False,
) -> np.ndarray:
    """Pick one feature matrix from a block, optionally dropping the CLS row."""
    if kind not in FEATURE_KINDS:
        raise ConfigurationError(f"unknown feature kind {kind!r}")
    if cross_derived and block.cross_input is None:
        raise UnavailableFeatureError(
            f"cross-attention {kind} features requested but the block has no "
            "conditioning input"
        )
    mat = {
        "key": block.keys,
        "query": block.queries,
        "value": block.values,
        "token": block.tokens,
        "activation": block.activations,
    }[kind]
    if mat is None:
        raise UnavailableFeatureError(f"block carries no {kind!r} features")
    if exclude_cls and block.has_cls:
        mat = mat[1:]
    return mat


def reshape_to_grid(
    features: np.ndarray,
    height_patches: int,
    width_patches: int,
    stride_px: int,
    source_id: str = "",
) -> DenseFeatureMap:
    """Row-major token -> grid cell placement."""
    n, c = features.shape
    if n != height_patches * width_patches:
        raise ShapeError(
            f"{n} tokens cannot fill a {height_patches}x{width_patches} grid"
        )
    return DenseFeatureMap(
        height_patches=height_patches,
        width_patches=width_patches,
        channels=c,
        stride_px=stride_px,
        values=np.ascontiguousarray(
            features.reshape(height_patches, width_patches, c), dtype=np.float32
        ),
        source_id=source_id,
    )


def nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Floor-rule source index for each destination index."""
    if dst_len <= 0:
        raise ShapeError("destination extent must be positive")
    return (np.arange(dst_len) * src_len // dst_len).astype(np.int64)


def concat_multilayer(
    maps: Sequence[DenseFeatureMap], target: Optional[tuple] = None
) -> DenseFeatureMap:
    """Upsample all maps to the target grid and concatenate channels."""
    if len(maps) == 0:
        raise ShapeError("need at least one feature map")
    image_sizes = {(m.image_height_px, m.image_width_px) for m in maps}
    if len(image_sizes) > 1:
        raise ConsistencyError(
            f"maps imply different source image sizes: {sorted(image_sizes)}"
        )
    if target is None:
        target = max(
            ((m.height_patches, m.width_patches) for m in maps),
            key=lambda hw: hw[0] * hw[1],
        )
    if target not in {(m.height_patches, m.width_patches) for m in maps}:
        raise ConsistencyError(
            f"target grid {target} is not the resolution of any input map"
        )
    th, tw = target
    img_h = next(iter(image_sizes))[0]
    parts = []
    for m in maps:
        vals = m.values
        if (m.height_patches, m.width_patches) != target:
            vals = vals[nearest_indices(m.height_patches, th)][
                :, nearest_indices(m.width_patches, tw)
            ]
        parts.append(vals)
    values = np.concatenate(parts, axis=2)
    return DenseFeatureMap(
        height_patches=th,
        width_patches=tw,
        channels=values.shape[2],
        stride_px=img_h // th,
        values=values,
        source_id=maps[0].source_id,
    )


class ToyBackbone:
    """Callable backend wrapping ToyBackboneParams."""

    def __init__(self, params: ToyBackboneParams = ToyBackboneParams()):
        self.params = params

    @property
    def n_layers(self) -> int:
        return len(self.params.channels_per_layer)

    @property
    def source_id(self) -> str:
        return f"toy-s{self.params.seed}-p{self.params.patch_size_px}"

    def forward(self, image: np.ndarray) -> list[AttentionBlockOutput]:
        return toy_backbone_forward(image, self.params)


def extract_dense_features(
    image: np.ndarray, convention: BackboneConvention, backend: ToyBackbone
) -> DenseFeatureMap:
    """Forward -> select -> reshape -> (optional) concat, per the convention."""
    blocks = backend.forward(image)
    n = len(blocks)
    maps = []
    p = backend.params.patch_size_px
    hp = image.shape[0] // p
    wp = image.shape[1] // p
    source_id = f"{backend.source_id}:{convention.backbone_id}"
    for layer in convention.layer_selector:
        if not (-n <= layer < n):
            raise ConfigurationError(
                f"layer {layer} out of range for a {n}-layer backend"
            )
        feats = select_attention_features(
            blocks[layer], convention.feature_kind, convention.exclude_cls
        )
        maps.append(reshape_to_grid(feats, hp, wp, p, source_id))
    if convention.concat_layers:
        return concat_multilayer(maps)
    return maps[0]


def _write_str(fh, s: str):
    data = s.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def export_features(fmap: DenseFeatureMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<H", _FEATURE_VERSION))
        fh.write(
            struct.pack(
                "<IIII",
                fmap.height_patches,
                fmap.width_patches,
                fmap.channels,
                fmap.stride_px,
            )
        )
        _write_str(fh, fmap.source_id)
        fh.write(np.ascontiguousarray(fmap.values, dtype="<f4").tobytes())


def import_features(path) -> DenseFeatureMap:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic, not a feature file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != _FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        h, w, c, stride = struct.unpack("<IIII", _read_exact(fh, 16))
        source_id = _read_str(fh)
        raw = _read_exact(fh, h * w * c * 4)
        values = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()
    return DenseFeatureMap(
        height_patches=h,
        width_patches=w,
        channels=c,
        stride_px=stride,
        values=values,
        source_id=source_id,
    )
