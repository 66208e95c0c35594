"""Toy conditional denoising diffusion.

A small convolutional U-shaped denoiser trained to predict the noise added
by the closed-form forward process. Layout conditioning enters through a
trainable copy of the encoder path whose outputs are injected into the
base decoder via zero-initialized 1x1 coupling convolutions, so that at
initialization the conditioned model is exactly the unconditioned one.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError
from .layout import NeuralLayout

CAPTION_DIM = 32
_VOCAB_SEED = 0x5EED
_VOCAB_WORDS = (
    "a", "on", "background", "gradient",
    "circle", "square", "triangle",
    "red", "green", "blue", "yellow", "purple", "orange", "cyan",
    "plain", "foggy", "night", "winter",
)


@dataclass
class NoiseSchedule:
    """Linear beta schedule with cumulative-product alphas."""

    steps: int
    betas: np.ndarray
    alphas_cumprod: np.ndarray


def make_schedule(
    steps: int, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    if steps < 2:
        raise ParameterError(f"need at least 2 steps, got {steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(
            f"betas must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )
    betas = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    return NoiseSchedule(
        steps=steps, betas=betas, alphas_cumprod=np.cumprod(1.0 - betas)
    )


def forward_noise(z_0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps, t is 1-based."""
    t_arr = np.atleast_1d(np.asarray(t))
    if np.any(t_arr < 1) or np.any(t_arr > schedule.steps):
        raise ParameterError(f"t must lie in [1, {schedule.steps}]")
    abar = schedule.alphas_cumprod[t_arr - 1]
    if isinstance(z_0, torch.Tensor):
        if eps.shape != z_0.shape:
            raise ShapeError("eps shape must match z_0")
        ab = torch.as_tensor(abar, dtype=z_0.dtype, device=z_0.device)
        ab = ab.view(-1, *([1] * (z_0.dim() - 1)))
        return torch.sqrt(ab) * z_0 + torch.sqrt(1.0 - ab) * eps
    z_0 = np.asarray(z_0)
    eps = np.asarray(eps)
    if eps.shape != z_0.shape:
        raise ShapeError("eps shape must match z_0")
    ab = abar.reshape(-1, *([1] * (z_0.ndim - 1))) if z_0.ndim else abar
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        ab = abar[0]
    return np.sqrt(ab) * z_0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class LatentCodec:
    """Identity (pixel-space) or average-pool toy latent space."""

    mode: str = "identity"  # identity | avgpool
    k: int = 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "identity":
            return x
        if self.mode == "avgpool":
            return F.avg_pool2d(x, self.k)
        raise ParameterError(f"unknown codec mode {self.mode!r}")

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if self.mode == "identity":
            return z
        if self.mode == "avgpool":
            return F.interpolate(z, scale_factor=self.k, mode="nearest")
        raise ParameterError(f"unknown codec mode {self.mode!r}")


def _vocab_table() -> dict:
    rng = np.random.default_rng(_VOCAB_SEED)
    table = {
        w: rng.standard_normal(CAPTION_DIM).astype(np.float32) for w in _VOCAB_WORDS
    }
    table["<oov>"] = rng.standard_normal(CAPTION_DIM).astype(np.float32)
    return table


_VOCAB = _vocab_table()


def encode_caption(text: str) -> np.ndarray:
    """Bag-of-words sum of seeded word vectors; unknown words share one vector."""
    emb = np.zeros(CAPTION_DIM, dtype=np.float32)
    for word in text.lower().replace(",", " ").split():
        emb += _VOCAB.get(word, _VOCAB["<oov>"])
    return emb


@dataclass
class TrainingBatch:
    z_0: torch.Tensor  # (B, C, H, W)
    t: torch.Tensor  # (B,) long, 1-based
    eps: torch.Tensor  # like z_0
    caption: torch.Tensor  # (B, CAPTION_DIM)
    layout: Optional[torch.Tensor]  # (B, N, H, W) or None

    def __post_init__(self):
        b = self.z_0.shape[0]
        if not (self.t.shape[0] == self.eps.shape[0] == self.caption.shape[0] == b):
            raise ShapeError("batch dimensions disagree")


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, c_out)
        self.norm2 = nn.GroupNorm(4, c_out)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = (
            nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        )

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    image_px: int = 32
    in_channels: int = 3
    channels: tuple = (32, 64, 96)
    emb_dim: int = 64
    steps: int = 200
    layout_channels: int = 8
    codec_mode: str = "identity"
    codec_k: int = 2

    @property
    def codec(self) -> LatentCodec:
        return LatentCodec(self.codec_mode, self.codec_k)

    @property
    def latent_px(self) -> int:
        return self.image_px // (self.codec_k if self.codec_mode == "avgpool" else 1)


class Denoiser(nn.Module):
    """Base noise predictor eps(z_t, t, caption); layout enters via the adapter."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        d = config.emb_dim
        self.time_emb = nn.Embedding(config.steps + 1, d)
        self.cap_proj = nn.Linear(CAPTION_DIM, d)
        self.conv_in = nn.Conv2d(config.in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, d)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, d)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, c3, d)
        self.up2 = nn.Conv2d(c3, c2, 3, padding=1)
        self.dec2 = ResBlock(2 * c2, c2, d)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, d)
        self.conv_out = nn.Conv2d(c1, config.in_channels, 3, padding=1)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, t: torch.Tensor, caption: torch.Tensor) -> torch.Tensor:
        return F.silu(self.time_emb(t) + self.cap_proj(caption))

    def encode(self, z, emb):
        h1 = self.enc1(self.conv_in(z), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        return h1, h2, h3

    def forward(self, z, t, caption, residuals=None):
        emb = self.embed(t, caption)
        h1, h2, h3 = self.encode(z, emb)
        if residuals is not None:
            r1, r2, r3 = residuals
            h1, h2, h3 = h1 + r1, h2 + r2, h3 + r3
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = self.dec2(torch.cat([self.up2(u2), h2], dim=1), emb)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.dec1(torch.cat([self.up1(u1), h1], dim=1), emb)
        return self.conv_out(u1)


class ControlAdapter(nn.Module):
    """Trainable copy of the base encoder plus zero-initialized couplings."""

    def __init__(self, base: Denoiser, layout_channels: Optional[int] = None):
        super().__init__()
        cfg = base.config
        c1, c2, c3 = cfg.channels
        self.config = cfg
        if layout_channels is None:
            layout_channels = cfg.layout_channels
        self.layout_in = nn.Conv2d(layout_channels, c1, 3, padding=1)
        self.conv_in = copy.deepcopy(base.conv_in)
        self.enc1 = copy.deepcopy(base.enc1)
        self.down1 = copy.deepcopy(base.down1)
        self.enc2 = copy.deepcopy(base.enc2)
        self.down2 = copy.deepcopy(base.down2)
        self.mid = copy.deepcopy(base.mid)
        self.zero1 = nn.Conv2d(c1, c1, 1)
        self.zero2 = nn.Conv2d(c2, c2, 1)
        self.zero3 = nn.Conv2d(c3, c3, 1)
        for z in (self.zero1, self.zero2, self.zero3):
            nn.init.zeros_(z.weight)
            nn.init.zeros_(z.bias)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, z, emb, layout: torch.Tensor):
        if layout.shape[-2:] != z.shape[-2:]:
            layout = F.adaptive_avg_pool2d(layout, z.shape[-2:])
        h1 = self.enc1(self.conv_in(z) + self.layout_in(layout), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        return self.zero1(h1), self.zero2(h2), self.zero3(h3)


def layout_to_tensor(layout: NeuralLayout, dtype=torch.float32) -> torch.Tensor:
    """(H, W, N) -> (N, H, W) torch tensor."""
    return torch.from_numpy(
        np.ascontiguousarray(layout.values.transpose(2, 0, 1))
    ).to(dtype)


def denoise_predict(
    z_t: torch.Tensor,
    t: torch.Tensor,
    caption: torch.Tensor,
    layout: Optional[torch.Tensor],
    params: Denoiser,
    adapter: Optional[ControlAdapter] = None,
) -> torch.Tensor:
    """eps_hat with the same shape as z_t; layout ignored without an adapter."""
    residuals = None
    if adapter is not None and layout is not None:
        expected = params.config.image_px
        if layout.shape[-2:] != (expected, expected):
            raise ShapeError(
                f"layout resolution {tuple(layout.shape[-2:])} != configured "
                f"image resolution ({expected}, {expected})"
            )
        residuals = adapter(z_t, params.embed(t, caption), layout)
    return params(z_t, t, caption, residuals)


def training_loss(
    batch: TrainingBatch,
    params: Denoiser,
    adapter: Optional[ControlAdapter] = None,
    schedule: Optional[NoiseSchedule] = None,
) -> torch.Tensor:
    """Mean squared error between the injected and the predicted noise."""
    if schedule is None:
        schedule = make_schedule(params.config.steps)
    z_t = forward_noise(batch.z_0, batch.t.cpu().numpy(), batch.eps, schedule)
    eps_hat = denoise_predict(
        z_t, batch.t, batch.caption, batch.layout, params, adapter
    )
    return F.mse_loss(eps_hat, batch.eps)


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lr: float = 1e-3
    batch_size: int = 16
    epochs_base: int = 60
    epochs_adapter: int = 60
    caption_dropout: float = 0.1
    image_px: int = 32
    channels: tuple = (32, 64, 96)
    layout_channels: int = 8
    codec_mode: str = "identity"
    codec_k: int = 2

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_px=self.image_px,
            channels=tuple(self.channels),
            steps=self.steps,
            layout_channels=self.layout_channels,
            codec_mode=self.codec_mode,
            codec_k=self.codec_k,
        )


def image_to_unit(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float (3, H, W) in [-1, 1]."""
    x = torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0)
    return x.permute(2, 0, 1)


def unit_to_image(x: torch.Tensor) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 HxWx3."""
    arr = ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def _make_batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    dataset: Sequence[tuple],
    config: TrainConfig,
    base: Optional[Denoiser] = None,
    train_base: bool = True,
    progress: bool = False,
):
    """Two-phase training: the base denoiser first, then the adapter with the
    base frozen. `dataset` yields (image uint8, caption str, NeuralLayout).

    Returns (base, adapter, loss_curve) with loss_curve rows
    (step, phase, loss).
    """
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    torch.manual_seed(config.seed)
    schedule = make_schedule(config.steps, config.beta_min, config.beta_max)
    codec = LatentCodec(config.codec_mode, config.codec_k)

    images = torch.stack([image_to_unit(img) for img, _, _ in dataset])
    z0_all = codec.encode(images)
    captions = torch.stack(
        [torch.from_numpy(encode_caption(cap)) for _, cap, _ in dataset]
    )
    layouts = torch.stack([layout_to_tensor(lay) for _, _, lay in dataset])

    if base is None:
        base = Denoiser(config.denoiser_config())
    gen = torch.Generator().manual_seed(config.seed)
    curve = []
    step = 0

    def run_phase(phase, model_params, epochs, adapter_local):
        nonlocal step
        use_layout = adapter_local is not None
        opt = torch.optim.Adam(model_params, lr=config.lr)
        for epoch in range(epochs):
            for idx in _make_batches(len(dataset), config.batch_size, gen):
                z0 = z0_all[idx]
                t = torch.randint(
                    1, config.steps + 1, (len(idx),), generator=gen
                )
                eps = torch.randn(z0.shape, generator=gen)
                cap = captions[idx].clone()
                if config.caption_dropout > 0:  # both phases keep a text-free mode
                    drop = (
                        torch.rand(len(idx), generator=gen)
                        < config.caption_dropout
                    )
                    cap[drop] = 0.0
                batch = TrainingBatch(
                    z_0=z0,
                    t=t,
                    eps=eps,
                    caption=cap,
                    layout=layouts[idx] if use_layout else None,
                )
                loss = training_loss(batch, base, adapter_local, schedule)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                curve.append((step, phase, float(loss.detach())))
            if progress and (epoch + 1) % 10 == 0:
                recent = [l for _, p, l in curve[-20:] if p == phase]
                print(
                    f"[{phase}] epoch {epoch + 1}/{epochs} "
                    f"loss {np.mean(recent):.4f}",
                    flush=True,
                )

    if train_base:
        run_phase("base", list(base.parameters()), config.epochs_base, None)

    adapter = ControlAdapter(base, layout_channels=config.layout_channels)
    for p in base.parameters():
        p.requires_grad_(False)
    run_phase("adapter", list(adapter.parameters()), config.epochs_adapter, adapter)
    for p in base.parameters():
        p.requires_grad_(True)
    return base, adapter, curve


@torch.no_grad()
def sample(
    params: Denoiser,
    adapter: Optional[ControlAdapter],
    caption: str,
    layout: Optional[NeuralLayout],
    schedule: NoiseSchedule,
    seed: int,
    num_images: int = 1,
) -> list[np.ndarray]:
    """Ancestral reverse process; image i is deterministic in (seed, i)."""
    params.eval()
    if adapter is not None:
        adapter.eval()
    cfg = params.config
    codec = cfg.codec
    cap = torch.from_numpy(encode_caption(caption))[None, :].repeat(num_images, 1)
    lay = (
        layout_to_tensor(layout)[None].repeat(num_images, 1, 1, 1)
        if layout is not None
        else None
    )
    # every image draws its noise from its own (seed, index) generator, so
    # the result for image i does not depend on num_images
    gens = [
        torch.Generator().manual_seed(seed * 100_003 + i)
        for i in range(num_images)
    ]
    px = cfg.latent_px

    def draw():
        return torch.stack(
            [torch.randn((cfg.in_channels, px, px), generator=g) for g in gens]
        )

    z = draw()
    for ti in range(schedule.steps, 0, -1):
        t = torch.full((num_images,), ti, dtype=torch.long)
        eps_hat = denoise_predict(z, t, cap, lay, params, adapter)
        beta = schedule.betas[ti - 1]
        abar = schedule.alphas_cumprod[ti - 1]
        abar_prev = schedule.alphas_cumprod[ti - 2] if ti > 1 else 1.0
        # posterior mean in x0 parameterization, with the predicted clean
        # latent clamped to the decoder range; the posterior variance
        # beta * (1 - abar_prev) / (1 - abar) vanishes as t -> 1, which keeps
        # residual noise out of the final image
        x0 = (z - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        x0 = torch.clamp(x0, -1.0, 1.0)
        z = (
            np.sqrt(abar_prev) * beta / (1.0 - abar) * x0
            + np.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar) * z
        )
        if ti > 1:
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            z = z + np.sqrt(var) * draw()
    out = [unit_to_image(codec.decode(z)[i]) for i in range(num_images)]
    params.train()
    if adapter is not None:
        adapter.train()
    return out


def save_checkpoint(
    directory,
    base: Denoiser,
    adapter: Optional[ControlAdapter],
    config: TrainConfig,
    loss_curve: list,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "train_config.json", "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
    blobs = {"base": base.state_dict()}
    if adapter is not None:
        blobs["adapter"] = adapter.state_dict()
    blobs["rng_state"] = torch.get_rng_state()
    torch.save(blobs, directory / "params.pt")
    with open(directory / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "phase", "loss"])
        writer.writerows(loss_curve)


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "train_config.json") as fh:
        raw = json.load(fh)
    raw["channels"] = tuple(raw["channels"])
    config = TrainConfig(**raw)
    blobs = torch.load(directory / "params.pt", weights_only=False)
    base = Denoiser(config.denoiser_config())
    base.load_state_dict(blobs["base"])
    adapter = None
    if "adapter" in blobs:
        adapter = ControlAdapter(base)
        adapter.load_state_dict(blobs["adapter"])
    curve = []
    with open(directory / "loss_curve.csv") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            curve.append((int(row[0]), row[1], float(row[2])))
    return base, adapter, config, curve
