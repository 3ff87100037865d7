"""Conditional generator with batch-norm modulation, plus feature extractors
for the perceptual loss.

The toy generator is a quarter-width, BigGAN-flavoured stack of upsampling
blocks. Every normalisation layer is a :class:`ModulatedBatchNorm2d` whose scale
and shift are either free parameters or produced by linear maps from the class
embedding. Those maps are the only generator weights adapted per image.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

logger = logging.getLogger(__name__)

FULL_WIDTH = (512, 256, 128, 64, 32)


class ModulatedBatchNorm2d(nn.Module):
    """gamma * (x - E[x]) / sqrt(Var[x] + eps) + beta.

    With ``cond_dim`` set, gamma = 1 + W_g c and beta = W_b c for a conditioning
    vector c; otherwise gamma and beta are free per-channel parameters. ``eps`` is
    a constant and never trained.
    """

    def __init__(self, channels: int, cond_dim: int | None = None, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, eps=eps, momentum=momentum, affine=False)
        self.cond_dim = cond_dim
        if cond_dim:
            self.gamma = nn.Linear(cond_dim, channels)
            self.beta = nn.Linear(cond_dim, channels)
            nn.init.zeros_(self.gamma.weight)
            nn.init.zeros_(self.gamma.bias)
            nn.init.zeros_(self.beta.weight)
            nn.init.zeros_(self.beta.bias)
        else:
            self.gamma = nn.Parameter(torch.ones(channels))
            self.beta = nn.Parameter(torch.zeros(channels))

    @property
    def eps(self) -> float:
        return self.bn.eps

    def scale_shift(self, cond: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        # Parameters may carry a leading batch dimension (one set per sample),
        # which is how independent per-image adaptations share one forward pass.
        if self.cond_dim:
            if cond is None:
                raise ValueError("conditional batch norm needs a conditioning vector")
            return 1.0 + _linear(self.gamma, cond), _linear(self.beta, cond)
        gamma, beta = self.gamma, self.beta
        return (gamma if gamma.ndim == 2 else gamma.unsqueeze(0)), (beta if beta.ndim == 2 else beta.unsqueeze(0))

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        gamma, beta = self.scale_shift(cond)
        return self.bn(x) * gamma[:, :, None, None] + beta[:, :, None, None]


def _linear(layer: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    if layer.weight.ndim == 3:
        return torch.einsum("bcd,bd->bc", layer.weight, x) + layer.bias
    return F.linear(x, layer.weight, layer.bias)


class GBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int | None):
        super().__init__()
        self.bn1 = ModulatedBatchNorm2d(c_in, cond_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn2 = ModulatedBatchNorm2d(c_out, cond_dim)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x, cond):
        h = F.relu(self.bn1(x, cond))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, cond)))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class ToyGenerator(nn.Module):
    """Conditional generator G(z, e) -> image in [-1, 1].

    The generator input is the latent z concatenated with a class embedding e;
    e also drives the batch-norm modulation. ``width`` scales the channel counts
    of the full-size layout (0.25 gives the quarter-width variant).
    """

    def __init__(
        self,
        num_classes: int,
        latent_dim: int = 32,
        embed_dim: int = 16,
        image_size: int = 64,
        width: float = 0.25,
        conditional: bool = True,
    ):
        super().__init__()
        n_blocks = 0
        while 4 * 2 ** n_blocks < image_size:
            n_blocks += 1
        if 4 * 2 ** n_blocks != image_size:
            raise ValueError(f"image_size must be 4 * 2**k, got {image_size}")
        chans = [max(4, int(c * width)) for c in FULL_WIDTH]
        chans = (chans + [chans[-1]] * n_blocks)[: n_blocks + 1]
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.num_classes = num_classes
        self.conditional = conditional
        self.config = dict(num_classes=num_classes, latent_dim=latent_dim, embed_dim=embed_dim,
                           image_size=image_size, width=width, conditional=conditional)
        cond_dim = embed_dim if conditional else None
        self.class_embedding = nn.Embedding(num_classes, embed_dim)
        nn.init.normal_(self.class_embedding.weight, std=0.5)
        self.fc = nn.Linear(latent_dim + embed_dim, chans[0] * 16)
        self.blocks = nn.ModuleList(GBlock(chans[i], chans[i + 1], cond_dim) for i in range(n_blocks))
        self.bn_out = ModulatedBatchNorm2d(chans[-1], cond_dim)
        self.conv_out = nn.Conv2d(chans[-1], 3, 3, padding=1)
        self._c0 = chans[0]

    def default_embedding(self) -> torch.Tensor:
        """Starting class embedding for an image of unknown class: the table mean."""
        return self.class_embedding.weight.detach().mean(0)

    def forward(self, z: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        cond = embedding if self.conditional else None
        h = self.fc(torch.cat([z, embedding], dim=1)).view(z.shape[0], self._c0, 4, 4)
        for block in self.blocks:
            h = block(h, cond)
        return torch.tanh(self.conv_out(F.relu(self.bn_out(h, cond))))


def bn_parameter_names(generator: nn.Module) -> list[str]:
    """Names of the trainable scale/shift producers of every modulated BN layer."""
    names = []
    for mod_name, module in generator.named_modules():
        if isinstance(module, ModulatedBatchNorm2d):
            prefix = f"{mod_name}." if mod_name else ""
            names.extend(prefix + n for n, _ in module.named_parameters())
    return names


def save_generator(generator: ToyGenerator, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": 1, "config": generator.config, "state_dict": generator.state_dict()}, path)


def load_generator(path: str | Path) -> ToyGenerator:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"generator checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    gen = ToyGenerator(**blob["config"])
    gen.load_state_dict(blob["state_dict"])
    return gen.eval()


class ConvFeatureExtractor(nn.Module):
    """Frozen conv stack returning the activation of every conv layer.

    Randomly initialised with a fixed seed; random conv features make a usable
    perceptual metric at toy scale where no pretrained network is available.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            feats.append(h)
            h = F.relu(h)
            if i < len(self.convs) - 1:
                h = F.avg_pool2d(h, 2)
        return feats


class VGGFeatureExtractor(nn.Module):
    """Activations of all conv layers of a torchvision VGG16 loaded from a local
    weights file (ImageNet-normalised internally; inputs in [-1, 1])."""

    def __init__(self, weights_path: str | Path):
        super().__init__()
        from torchvision.models import vgg16

        path = Path(weights_path)
        if not path.is_file():
            raise DataError(f"VGG16 weights not found: {path}")
        model = vgg16()
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        self.features = model.features
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h = ((x + 1) / 2 - self.mean) / self.std
        feats = []
        for layer in self.features:
            h = layer(h)
            if isinstance(layer, nn.Conv2d):
                feats.append(h)
        return feats


def pretrain_toy_generator(
    images: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    feature_extractor: Callable[[torch.Tensor], list[torch.Tensor]],
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 2e-3,
    lambda_p: float = 0.1,
    seed: int = 0,
    **generator_kwargs,
) -> ToyGenerator:
    """Train a generator from scratch by latent optimisation.

    Each training image owns a latent code that is optimised jointly with the
    generator weights under an L1 + perceptual reconstruction loss; codes are
    renormalised to norm sqrt(d) after each step so they stay on the shell of the
    standard-normal prior.
    """
    torch.manual_seed(seed)
    gen = ToyGenerator(num_classes, image_size=images.shape[-1], **generator_kwargs)
    d = gen.latent_dim
    codes = torch.randn(len(images), d)
    codes = nn.Parameter(codes / codes.norm(dim=1, keepdim=True) * d ** 0.5)
    opt = torch.optim.Adam([{"params": gen.parameters()}, {"params": [codes], "lr": lr * 5}], lr=lr, betas=(0.5, 0.999))
    order_gen = torch.Generator().manual_seed(seed)
    gen.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(images), generator=order_gen)
        total = 0.0
        for start in range(0, len(images), batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) < 2:
                continue
            out = gen(codes[idx], gen.class_embedding(labels[idx]))
            target = images[idx]
            l1 = (out - target).abs().mean()
            perc = sum(((fa - fb) ** 2).mean() for fa, fb in zip(feature_extractor(out), feature_extractor(target)))
            loss = l1 + lambda_p * perc
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                codes[idx] = codes[idx] / codes[idx].norm(dim=1, keepdim=True) * d ** 0.5
            total += loss.item() * len(idx)
        logger.info("generator epoch %d loss %.4f", epoch, total / len(images))
    return gen.eval()
