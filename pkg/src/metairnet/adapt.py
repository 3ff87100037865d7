"""Single-image generator adaptation.

The latent vector, the class embedding and the batch-norm scale/shift producers
are optimised to reconstruct one target image under

    L1(G(z), I) + lambda_p * perceptual(G(z), I) + lambda_z * EM(z, r),

with r redrawn from N(0, 1) every step. All other generator weights stay frozen:
they are read through ``torch.func.functional_call`` and never handed to the
optimiser.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import DataError, NumericalError
from .generator import ModulatedBatchNorm2d, bn_parameter_names

logger = logging.getLogger(__name__)

FeatureExtractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


@dataclass
class AdaptConfig:
    lambda_p: float = 0.1
    lambda_z: float = 0.1
    steps: int = 500
    lr_noise: float = 0.01
    lr_bn: float = 0.0005
    perturb_sigma: float = 0.1
    num_variants: int = 10
    noise_only: bool = False  # ablation: leave BN parameters untouched

    def __post_init__(self):
        for name in ("lambda_p", "lambda_z", "lr_noise", "lr_bn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.steps < 1 or self.num_variants < 1:
            raise ValueError("steps and num_variants must be positive")
        if self.perturb_sigma < 0:
            raise ValueError("perturb_sigma must be non-negative")


@dataclass
class NoiseVector:
    latent: torch.Tensor
    class_embedding: torch.Tensor

    def detach(self) -> "NoiseVector":
        return NoiseVector(self.latent.detach().clone(), self.class_embedding.detach().clone())


@dataclass
class BNParamSet:
    params: dict[str, torch.Tensor]
    eps: dict[str, float]


@dataclass
class LossRecord:
    step: int
    total: float
    l1: float
    perceptual: float
    em: float


@dataclass
class AdaptedGeneratorState:
    generator: nn.Module  # shared, frozen
    noise: NoiseVector
    bn_params: BNParamSet
    loss_trace: list[LossRecord] = field(default_factory=list)

    def render(self, latent: torch.Tensor | None = None) -> torch.Tensor:
        """Generate images for a batch of latents (default: the optimised one)."""
        if latent is None:
            latent = self.noise.latent.unsqueeze(0)
        emb = self.noise.class_embedding.unsqueeze(0).expand(latent.shape[0], -1)
        with torch.no_grad(), _eval_mode(self.generator):
            return functional_call(self.generator, self.bn_params.params, (latent, emb))


@contextlib.contextmanager
def _eval_mode(module: nn.Module):
    was_training = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was_training)


def em_regularizer(z: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """One-dimensional earth mover distance between the value sets of z and r.

    Equals the optimal matching cost (1/d) * min_pi sum |z_i - r_pi(i)|, attained
    by pairing sorted coordinates. Leading dimensions are treated as a batch.
    """
    if z.shape != r.shape:
        raise ValueError(f"dimension mismatch: {tuple(z.shape)} vs {tuple(r.shape)}")
    return (torch.sort(z, dim=-1).values - torch.sort(r, dim=-1).values).abs().mean(dim=-1)


def _perceptual_per_sample(a, b_features, feature_extractor):
    fa = list(feature_extractor(a))
    if not fa:
        raise ValueError("feature extractor returned no feature maps")
    return sum(((x - y) ** 2).flatten(1).mean(1) for x, y in zip(fa, b_features))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, feature_extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over feature layers of the mean squared feature difference."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    fb = list(feature_extractor(b))
    return _perceptual_per_sample(a, fb, feature_extractor).mean()


def _loss_terms(generated, target_features, target, z, r, feature_extractor, lambda_p, lambda_z):
    l1 = (generated - target).abs().flatten(1).mean(1)
    perc = _perceptual_per_sample(generated, target_features, feature_extractor)
    em = em_regularizer(z, r)
    return l1 + lambda_p * perc + lambda_z * em, l1, perc, em


def generator_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    z: torch.Tensor | NoiseVector,
    r: torch.Tensor | NoiseVector,
    feature_extractor: FeatureExtractor,
    lambda_p: float = 0.1,
    lambda_z: float = 0.1,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (total, l1, perceptual, em) for one generated/target pair.

    The EM term compares the latent part of z with r; the class embedding is not
    regularised.
    """
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    z = z.latent if isinstance(z, NoiseVector) else z
    r = r.latent if isinstance(r, NoiseVector) else r
    if generated.ndim == 3:
        generated, target = generated.unsqueeze(0), target.unsqueeze(0)
    z, r = z.reshape(1, -1), r.reshape(1, -1)
    terms = _loss_terms(generated, list(feature_extractor(target)), target, z, r,
                        feature_extractor, lambda_p, lambda_z)
    return tuple(t[0] for t in terms)


def bn_param_set(generator: nn.Module, batch: int | None = None) -> BNParamSet:
    """Fresh trainable copies of the generator's BN scale/shift producers,
    optionally stacked ``batch`` times along a new leading dimension."""
    names = bn_parameter_names(generator)
    if not names:
        raise DataError("generator has no modulated batch-norm layers to adapt")
    state = dict(generator.named_parameters())
    if batch is None:
        params = {n: state[n].detach().clone() for n in names}
    else:
        params = {n: state[n].detach().unsqueeze(0).repeat(batch, *[1] * state[n].ndim) for n in names}
    eps = {
        name: module.eps
        for name, module in generator.named_modules()
        if isinstance(module, ModulatedBatchNorm2d)
    }
    return BNParamSet({n: p.requires_grad_(True) for n, p in params.items()}, eps)


def adaptation_loss(
    generator: nn.Module,
    targets: torch.Tensor,
    latents: torch.Tensor,
    embeddings: torch.Tensor,
    bn_params: dict[str, torch.Tensor],
    r: torch.Tensor,
    feature_extractor: FeatureExtractor,
    lambda_p: float,
    lambda_z: float,
    target_features: list[torch.Tensor] | None = None,
):
    """Per-sample loss terms (each shaped (B,)) for a batch of independent
    adaptation problems. ``bn_params`` entries carry a leading batch dimension;
    ``generator`` must be in eval mode so samples do not interact."""
    if target_features is None:
        target_features = [f.detach() for f in feature_extractor(targets)]
    out = functional_call(generator, bn_params, (latents, embeddings))
    return _loss_terms(out, target_features, targets, latents, r, feature_extractor, lambda_p, lambda_z)


def adapt_generator_batch(
    generator: nn.Module,
    targets: torch.Tensor,
    config: AdaptConfig,
    rngs: Sequence[torch.Generator],
    feature_extractor: FeatureExtractor,
) -> list[AdaptedGeneratorState]:
    """Adapt the generator to each of ``targets`` independently, in one batch.

    The summed per-sample loss has block-separable gradients and Adam is
    elementwise, so each image follows its own optimisation trajectory. Image i
    draws all of its noise from ``rngs[i]``.
    """
    if targets.ndim != 4 or len(targets) != len(rngs):
        raise ValueError("targets must be (B, 3, H, W) with one rng per target")
    size = getattr(generator, "image_size", None)
    if size is not None and tuple(targets.shape[-2:]) != (size, size):
        raise DataError(f"targets are {tuple(targets.shape[-2:])}, generator produces {size}x{size}")
    B, d = len(targets), generator.latent_dim
    bn_params = bn_param_set(generator, batch=B)
    latents = torch.stack([torch.randn(d, generator=g) for g in rngs]).requires_grad_(True)
    embeddings = generator.default_embedding().unsqueeze(0).repeat(B, 1).requires_grad_(True)
    groups = [{"params": [latents, embeddings], "lr": config.lr_noise}]
    if not config.noise_only:
        groups.append({"params": list(bn_params.params.values()), "lr": config.lr_bn})
    opt = torch.optim.Adam(groups)
    trainable = [p for grp in groups for p in grp["params"]]
    traces: list[list[LossRecord]] = [[] for _ in range(B)]
    with _eval_mode(generator):
        target_features = [f.detach() for f in feature_extractor(targets)]
        for step in range(config.steps):
            r = torch.stack([torch.randn(d, generator=g) for g in rngs])
            total, l1, perc, em = adaptation_loss(
                generator, targets, latents, embeddings, bn_params.params, r,
                feature_extractor, config.lambda_p, config.lambda_z, target_features,
            )
            rows = torch.stack([total, l1, perc, em], dim=1).detach().tolist()
            for i, row in enumerate(rows):
                if not all(math.isfinite(v) for v in row):
                    raise NumericalError(f"non-finite adaptation loss at step {step} (target {i})")
                traces[i].append(LossRecord(step, *row))
            grads = torch.autograd.grad(total.sum(), trainable)
            for p, g in zip(trainable, grads):
                p.grad = g
            opt.step()
    states = []
    for i in range(B):
        noise = NoiseVector(latents[i].detach().clone(), embeddings[i].detach().clone())
        params = {n: p[i].detach().clone() for n, p in bn_params.params.items()}
        states.append(AdaptedGeneratorState(generator, noise, BNParamSet(params, bn_params.eps), traces[i]))
    return states


def adapt_generator_to_image(
    generator: nn.Module,
    target: torch.Tensor,
    config: AdaptConfig,
    rng: torch.Generator,
    feature_extractor: FeatureExtractor,
) -> AdaptedGeneratorState:
    """Fit latent, class embedding and BN scale/shift so that G reproduces ``target``."""
    return adapt_generator_batch(generator, target.unsqueeze(0), config, [rng], feature_extractor)[0]


def sample_perturbed_images(
    state: AdaptedGeneratorState,
    sigma: float,
    k: int,
    rng: torch.Generator,
) -> torch.Tensor:
    """k images G(z + eps_i) with eps_i ~ N(0, sigma^2 I), shape (k, 3, H, W)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    z = state.noise.latent.unsqueeze(0).expand(k, -1)
    eps = torch.randn(z.shape, generator=rng, dtype=z.dtype) * sigma
    return state.render(z + eps)


def frozen_snapshot(generator: nn.Module) -> dict[str, torch.Tensor]:
    """Copy of every generator parameter and buffer outside the BN scale/shift producers."""
    bn = set(bn_parameter_names(generator))
    snap = {n: p.detach().clone() for n, p in generator.named_parameters() if n not in bn}
    snap.update({n: b.detach().clone() for n, b in generator.named_buffers()})
    return snap


def snapshot_diff(generator: nn.Module, snapshot: dict[str, torch.Tensor]) -> float:
    current = frozen_snapshot(generator)
    if current.keys() != snapshot.keys():
        return math.inf
    return max((float((current[k] - snapshot[k]).abs().max()) if snapshot[k].numel() else 0.0) for k in snapshot)


def copy_generator(generator: nn.Module, dtype: torch.dtype | None = None) -> nn.Module:
    gen = copy.deepcopy(generator)
    return gen.to(dtype) if dtype is not None else gen
