import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metairnet.adapt import (
    AdaptConfig,
    NoiseVector,
    adapt_generator_batch,
    adapt_generator_to_image,
    adaptation_loss,
    bn_param_set,
    copy_generator,
    em_regularizer,
    frozen_snapshot,
    generator_loss,
    perceptual_distance,
    sample_perturbed_images,
    snapshot_diff,
)
from metairnet.errors import DataError, NumericalError
from metairnet.generator import ConvFeatureExtractor, ToyGenerator, bn_parameter_names

from .helpers import max_relative_error


def identity_extractor(x):
    return [x]


# -- EM regulariser -------------------------------------------------------------

def brute_force_em(z, r):
    d = len(z)
    return min(sum(abs(z[i] - r[p[i]]) for i in range(d)) for p in itertools.permutations(range(d))) / d


def test_em_identical_vectors_is_zero():
    z = torch.randn(7)
    assert em_regularizer(z, z.clone()).item() == 0.0


def test_em_permuted_vectors_is_zero():
    assert em_regularizer(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 1.0])).item() == 0.0


def test_em_constant_offset():
    assert em_regularizer(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 1.0])).item() == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6).flatmap(lambda d: st.tuples(
    st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=d, max_size=d),
    st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=d, max_size=d))))
def test_em_matches_permutation_brute_force(pair):
    z, r = pair
    got = em_regularizer(torch.tensor(z, dtype=torch.float64), torch.tensor(r, dtype=torch.float64)).item()
    assert got == pytest.approx(brute_force_em(z, r), rel=1e-12, abs=1e-12)


def test_em_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        em_regularizer(torch.zeros(3), torch.zeros(4))


def test_em_batched_rows_are_independent():
    z, r = torch.randn(4, 6), torch.randn(4, 6)
    batched = em_regularizer(z, r)
    assert torch.allclose(batched, torch.stack([em_regularizer(z[i], r[i]) for i in range(4)]))


# -- losses -------------------------------------------------------------------

def test_loss_zero_when_everything_matches():
    img = torch.rand(3, 8, 8)
    z = torch.randn(5)
    total, l1, perc, em = generator_loss(img, img.clone(), z, z.clone(), ConvFeatureExtractor((4,)))
    assert total.item() == l1.item() == perc.item() == em.item() == 0.0


def test_loss_term_isolation_gives_mean_absolute_difference():
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    total, *_ = generator_loss(a, b, torch.randn(4), torch.randn(4), ConvFeatureExtractor((4,)), 0.0, 0.0)
    assert total.item() == pytest.approx((a - b).abs().mean().item(), rel=1e-6)


def test_loss_hand_computation():
    a = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
    b = torch.tensor([[[1.0, 1.0], [0.0, 3.0]]])
    # |a-b| = 1,0,2,0 -> 0.75;  (a-b)^2 = 1,0,4,0 -> 1.25;  EM([0,0],[1,1]) = 1
    total, l1, perc, em = generator_loss(a, b, torch.zeros(2), torch.ones(2), identity_extractor, 0.1, 0.1)
    assert l1.item() == pytest.approx(0.75)
    assert perc.item() == pytest.approx(1.25)
    assert em.item() == pytest.approx(1.0)
    assert total.item() == pytest.approx(0.75 + 0.1 * 1.25 + 0.1 * 1.0)


def test_loss_decomposition_is_exact():
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    total, l1, perc, em = generator_loss(a, b, torch.randn(6), torch.randn(6), ConvFeatureExtractor((4, 8)), 0.3, 0.7)
    assert (total - (l1 + 0.3 * perc + 0.7 * em)).item() == 0.0
    assert min(l1.item(), perc.item(), em.item()) >= 0


def test_loss_accepts_noise_vectors():
    a, b = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
    z = NoiseVector(torch.zeros(2), torch.randn(3))
    r = NoiseVector(torch.ones(2), torch.randn(3))
    *_, em = generator_loss(a, b, z, r, identity_extractor)
    assert em.item() == pytest.approx(1.0)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        generator_loss(torch.rand(3, 4, 4), torch.rand(3, 4, 5), torch.zeros(2), torch.zeros(2), identity_extractor)


def test_perceptual_identical_is_zero_and_symmetric():
    fx = ConvFeatureExtractor((4, 8))
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    assert perceptual_distance(a, a, fx).item() == 0.0
    assert perceptual_distance(a, b, fx).item() == pytest.approx(perceptual_distance(b, a, fx).item(), rel=1e-6)


def test_perceptual_constant_offset_identity_extractor():
    a = torch.rand(3, 4, 4)
    assert perceptual_distance(a + 0.5, a, identity_extractor).item() == pytest.approx(0.25, rel=1e-6)


def test_perceptual_rejects_empty_extractor():
    with pytest.raises(ValueError, match="no feature maps"):
        perceptual_distance(torch.rand(3, 4, 4), torch.rand(3, 4, 4), lambda x: [])


# -- gradients ----------------------------------------------------------------

def _randomise_bn(gen, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in gen.named_parameters():
            if name in bn_parameter_names(gen):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)


@pytest.mark.parametrize("conditional", [True, False])
def test_generator_loss_gradients_match_finite_differences(conditional):
    torch.manual_seed(0)
    gen = copy_generator(ToyGenerator(3, latent_dim=6, embed_dim=4, image_size=8, width=0.02,
                                      conditional=conditional), torch.float64).eval()
    _randomise_bn(gen)
    fx = ConvFeatureExtractor((4, 4), seed=1).double()
    target = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    bn = bn_param_set(gen).params
    z = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
    emb = gen.default_embedding().unsqueeze(0).clone().requires_grad_(True)
    r = torch.randn(1, 6, dtype=torch.float64)

    def loss():
        return adaptation_loss(gen, target, z, emb, bn, r, fx, 0.1, 0.1)[0].sum()

    err, checked = max_relative_error(loss, [z, emb, *bn.values()], 4, np.random.default_rng(0))
    assert checked > 10
    assert err <= 1e-3


# -- adaptation -----------------------------------------------------------------

def test_adapt_config_defaults():
    cfg = AdaptConfig()
    assert (cfg.lambda_p, cfg.lambda_z, cfg.steps, cfg.lr_noise, cfg.lr_bn) == (0.1, 0.1, 500, 0.01, 0.0005)
    assert cfg.num_variants == 10


@pytest.mark.parametrize("field,value", [("steps", 0), ("lr_bn", -1.0), ("perturb_sigma", -0.1), ("num_variants", 0)])
def test_adapt_config_validation(field, value):
    with pytest.raises(ValueError):
        AdaptConfig(**{field: value})


def test_adaptation_freezes_non_bn_weights_and_lowers_loss(tiny_generator, feature_extractor):
    snap = frozen_snapshot(tiny_generator)
    bn_before = {n: p.detach().clone() for n, p in tiny_generator.named_parameters()
                 if n in bn_parameter_names(tiny_generator)}
    target = torch.rand(3, 16, 16) * 2 - 1
    state = adapt_generator_to_image(tiny_generator, target, AdaptConfig(steps=50, lr_bn=0.005),
                                     torch.Generator().manual_seed(0), feature_extractor)
    assert snapshot_diff(tiny_generator, snap) == 0.0
    # the generator's own BN producers are untouched too; the adapted copies live in the state
    for n, p in tiny_generator.named_parameters():
        if n in bn_before:
            assert torch.equal(p, bn_before[n])
    assert any(not torch.equal(state.bn_params.params[n], bn_before[n]) for n in bn_before)
    assert len(state.loss_trace) == 50
    assert [r.step for r in state.loss_trace] == list(range(50))
    assert state.loss_trace[-1].total < state.loss_trace[0].total


def test_noise_only_ablation_keeps_bn(tiny_generator, feature_extractor):
    state = adapt_generator_to_image(tiny_generator, torch.zeros(3, 16, 16), AdaptConfig(steps=5, noise_only=True),
                                     torch.Generator().manual_seed(0), feature_extractor)
    params = dict(tiny_generator.named_parameters())
    assert all(torch.equal(v, params[k]) for k, v in state.bn_params.params.items())


def test_batched_adaptation_equals_single_runs(tiny_generator, feature_extractor):
    targets = torch.rand(3, 3, 16, 16) * 2 - 1
    cfg = AdaptConfig(steps=10)
    batch = adapt_generator_batch(tiny_generator, targets, cfg,
                                  [torch.Generator().manual_seed(s) for s in range(3)], feature_extractor)
    for i in range(3):
        single = adapt_generator_to_image(tiny_generator, targets[i], cfg, torch.Generator().manual_seed(i),
                                          feature_extractor)
        assert torch.allclose(single.noise.latent, batch[i].noise.latent, atol=1e-4)
        assert single.loss_trace[-1].total == pytest.approx(batch[i].loss_trace[-1].total, rel=1e-4)


def test_adaptation_is_deterministic(tiny_generator, feature_extractor):
    target = torch.rand(3, 16, 16)
    runs = [adapt_generator_to_image(tiny_generator, target, AdaptConfig(steps=5),
                                     torch.Generator().manual_seed(3), feature_extractor) for _ in range(2)]
    assert torch.equal(runs[0].noise.latent, runs[1].noise.latent)
    assert runs[0].loss_trace == runs[1].loss_trace


def test_non_finite_loss_reports_step(tiny_generator, feature_extractor):
    target = torch.zeros(3, 16, 16)
    target[0, 0, 0] = float("nan")
    with pytest.raises(NumericalError, match="step 0"):
        adapt_generator_to_image(tiny_generator, target, AdaptConfig(steps=3), torch.Generator().manual_seed(0),
                                 feature_extractor)


def test_generator_without_bn_is_rejected(feature_extractor):
    class Plain(torch.nn.Module):
        latent_dim = 4

        def __init__(self):
            super().__init__()
            self.fc = torch.nn.Linear(4, 3 * 16 * 16)

        def default_embedding(self):
            return torch.zeros(2)

        def forward(self, z, e):
            return self.fc(z).view(-1, 3, 16, 16)

    with pytest.raises(DataError, match="batch-norm"):
        adapt_generator_to_image(Plain(), torch.zeros(3, 16, 16), AdaptConfig(steps=2),
                                 torch.Generator().manual_seed(0), feature_extractor)


def test_target_size_must_match_generator(tiny_generator, feature_extractor):
    with pytest.raises(DataError, match="generator produces"):
        adapt_generator_to_image(tiny_generator, torch.zeros(3, 32, 32), AdaptConfig(steps=2),
                                 torch.Generator().manual_seed(0), feature_extractor)


# -- perturbed samples ----------------------------------------------------------

@pytest.fixture
def adapted_state(tiny_generator, feature_extractor):
    return adapt_generator_to_image(tiny_generator, torch.rand(3, 16, 16), AdaptConfig(steps=3),
                                    torch.Generator().manual_seed(0), feature_extractor)


def test_ten_variants(adapted_state):
    out = sample_perturbed_images(adapted_state, 0.1, 10, torch.Generator().manual_seed(0))
    assert out.shape == (10, 3, 16, 16)
    assert out.abs().max() <= 1.0


def test_zero_sigma_gives_identical_reconstructions(adapted_state):
    out = sample_perturbed_images(adapted_state, 0.0, 3, torch.Generator().manual_seed(0))
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])
    assert torch.allclose(out[0], adapted_state.render()[0], atol=1e-6)


def test_perturbed_samples_are_reproducible(adapted_state):
    a = sample_perturbed_images(adapted_state, 0.5, 4, torch.Generator().manual_seed(9))
    b = sample_perturbed_images(adapted_state, 0.5, 4, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    assert not torch.equal(a[0], a[1])


def test_perturbed_sampling_validates_arguments(adapted_state):
    with pytest.raises(ValueError):
        sample_perturbed_images(adapted_state, 0.1, 0, torch.Generator())
    with pytest.raises(ValueError):
        sample_perturbed_images(adapted_state, -1.0, 2, torch.Generator())
