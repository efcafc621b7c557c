import numpy as np
import pytest
import torch
from torch import nn

from amcl.checkpoint import load_checkpoint, save_checkpoint
from amcl.exceptions import CheckpointError, ContractViolation, ModeCollapseError
from amcl.gan import (DISCRIMINATOR_TABLE, GENERATOR_TABLE, GanTrainConfig, MaskDiscriminator, MaskGAN,
                      MaskGenerator, binarize, discriminator_forward, discriminator_loss, encode_masks,
                      generator_forward, generator_loss, init_dcgan_weights, load_discriminator, load_generator,
                      mask_ratio, sample_latents, sample_masks, save_discriminator, save_generator, train_gan)
from amcl.masking import MaskCorpus, MaskSamplerConfig, build_mask_corpus, is_patch_aligned
from oracles import central_difference, gan_losses, relative_error


@pytest.fixture(scope="module")
def full_generator():
    torch.manual_seed(0)
    g = MaskGenerator()
    g.apply(init_dcgan_weights)
    return g.eval()


def test_generator_shapes_match_table(full_generator):
    shapes = full_generator.forward_shapes(torch.randn(2, 128))
    assert shapes == [tuple(r) for r in GENERATOR_TABLE]
    assert shapes == full_generator.expected_shapes()


def test_discriminator_shapes_match_table():
    d = MaskDiscriminator()
    assert d.forward_shapes(torch.randn(2, 1, 64, 64)) == [tuple(r) for r in DISCRIMINATOR_TABLE]


def test_generator_range_and_single_latent(full_generator):
    with torch.no_grad():
        out = generator_forward(full_generator, np.random.default_rng(0).standard_normal(128))
    assert out.shape == (1, 64, 64)
    assert out.abs().max() <= 1.0


def test_latent_dimension_checked(full_generator):
    with pytest.raises(ContractViolation):
        full_generator(torch.randn(2, 64))


def test_zero_final_layer_gives_tanh_zero():
    g = MaskGenerator(channels=(8, 8, 8, 8)).eval()
    with torch.no_grad():
        g.layers[-1][0].weight.zero_()
        g.layers[-1][0].bias.zero_()
        assert torch.equal(g(torch.randn(3, 128)), torch.zeros(3, 1, 64, 64))


def test_zero_final_layer_gives_half():
    d = MaskDiscriminator().eval()
    with torch.no_grad():
        d.layers[-1].weight.zero_()
        d.layers[-1].bias.zero_()
        assert torch.equal(d(torch.randn(4, 1, 64, 64)), torch.full((4,), 0.5))


def test_discriminator_fuzz_range():
    torch.manual_seed(1)
    d = MaskDiscriminator()
    d.apply(init_dcgan_weights)
    d.eval()
    with torch.no_grad():
        p = discriminator_forward(d, torch.rand(1000, 1, 64, 64) * 4 - 2)
    assert torch.isfinite(p).all()
    assert ((p > 0) & (p < 1)).all()
    with pytest.raises(ContractViolation):
        d(torch.zeros(1, 1, 32, 32))


def test_losses_at_init_match_straight_line_oracle():
    torch.manual_seed(3)
    g = MaskGenerator(channels=(16, 8, 8, 4)).double()
    d = MaskDiscriminator(channels=(4, 8, 8)).double()
    g.apply(init_dcgan_weights)
    d.apply(init_dcgan_weights)
    corpus = build_mask_corpus(MaskSamplerConfig(corpus_size=8, seed=2))
    real = torch.from_numpy(encode_masks(corpus.to_array())).double()[:, None]
    z = torch.randn(8, 128, dtype=torch.float64)
    g.train()
    d.train()
    with torch.no_grad():
        d_loss = discriminator_loss(d.logits(real), d.logits(g(z)))
        g_loss = generator_loss(d.logits(g(z)))
    ref_d, ref_g = gan_losses(g, d, real, z)
    assert float(d_loss) == pytest.approx(ref_d, abs=1e-10)
    assert float(g_loss) == pytest.approx(ref_g, abs=1e-10)


def test_one_step_changes_discriminator():
    corpus = build_mask_corpus(MaskSamplerConfig(corpus_size=2, seed=0))
    cfg = GanTrainConfig(epochs=1, batch_size=2, generator_channels=(8, 8, 8, 8), seed=0)
    g, d = cfg.build()
    g.apply(init_dcgan_weights)
    d.apply(init_dcgan_weights)
    before = [p.detach().clone() for p in d.parameters()]
    train_gan(corpus, cfg, g, d)
    delta = sum((p.detach() - b).norm().item() for p, b in zip(d.parameters(), before))
    assert delta > 0


def test_generator_gradient_matches_finite_differences():
    """Truncated 3-layer generator (16x16 output) against a fixed logistic critic."""
    torch.manual_seed(4)
    g = MaskGenerator(latent_dim=6, channels=(3, 2)).double()
    g.apply(init_dcgan_weights)
    g.train()
    critic = nn.Linear(256, 1).double()
    z = torch.randn(5, 6, dtype=torch.float64)

    def value():
        # E log(1 - D(G(z))) with D = sigmoid(critic)
        logits = critic(g(z).flatten(1)).squeeze(1)
        return -nn.functional.softplus(logits).mean()

    params = [p for p in g.parameters()]
    grads = torch.autograd.grad(value(), params)
    for p, gr in zip(params, grads):
        flat = p.data.view(-1)
        idx = np.random.default_rng(0).choice(flat.numel(), size=min(6, flat.numel()), replace=False)

        def f(vals, flat=flat, idx=idx):
            old = flat[idx].clone()
            flat[idx] = torch.from_numpy(vals)
            with torch.no_grad():
                out = float(value())
            flat[idx] = old
            return out

        fd = central_difference(f, flat[idx].numpy().copy(), h=1e-6)
        assert relative_error(gr.view(-1)[idx].numpy(), fd) < 1e-3 or np.abs(fd).max() < 1e-9


def test_mode_collapse_detector():
    corpus = build_mask_corpus(MaskSamplerConfig(corpus_size=4, seed=0))
    cfg = GanTrainConfig(epochs=5, batch_size=4, generator_channels=(4, 4, 4, 4), collapse_threshold=1e9,
                         collapse_patience=3)
    with pytest.raises(ModeCollapseError, match="3 consecutive"):
        train_gan(corpus, cfg)


def test_constant_ratio_corpus_is_learned():
    # every record occludes exactly half of the 16 patches
    rng = np.random.default_rng(0)
    patches = np.ones((1024, 4, 4), np.uint8)
    for p in patches:
        p.reshape(-1)[rng.choice(16, 8, replace=False)] = 0
    corpus = MaskCorpus(patches, 16)
    cfg = GanTrainConfig(epochs=4, batch_size=64, generator_channels=(128, 64, 32, 16), seed=1)
    g, _, trace = train_gan(corpus, cfg)
    assert len(trace) == 4 and all(np.isfinite(trace).all(axis=0))
    ratios = mask_ratio(sample_masks(g, sample_latents(500, random_state=0)))
    assert abs(ratios.mean() - 0.5) <= 0.1


def test_sample_masks_deterministic_and_binary(full_generator):
    z = sample_latents(3, random_state=5)
    a = sample_masks(full_generator, z)
    b = sample_masks(full_generator, z)
    assert a.shape == (3, 64, 64) and a.dtype == np.uint8
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}
    assert sample_masks(full_generator, z[0]).shape == (1, 64, 64)
    snapped = sample_masks(full_generator, z, snap=True)
    assert all(is_patch_aligned(m, 16) for m in snapped)


def test_binarize_monotone(rng):
    f = rng.normal(size=(64, 64))
    bump = np.abs(rng.normal(size=(64, 64)))
    before, after = binarize(f), binarize(f + bump)
    assert not ((before == 1) & (after == 0)).any()
    assert np.array_equal(binarize(torch.tensor([-0.5, 0.0, 0.5])).numpy(), [0, 0, 1])


def test_encode_masks():
    assert np.array_equal(encode_masks(np.array([0, 1])), [-1.0, 1.0])


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    g = MaskGenerator(channels=(8, 4, 4, 4))
    d = MaskDiscriminator()
    save_generator(tmp_path / "g.ckpt", g)
    save_discriminator(tmp_path / "d.ckpt", d)
    g2 = load_generator(tmp_path / "g.ckpt")
    d2 = load_discriminator(tmp_path / "d.ckpt")
    for a, b in zip(g.state_dict().values(), g2.state_dict().values()):
        assert torch.equal(a, b)
    for a, b in zip(d.state_dict().values(), d2.state_dict().values()):
        assert torch.equal(a, b)
    assert (tmp_path / "g.ckpt").read_bytes().startswith(b"AMCL-CKPT v1\n")


def test_checkpoint_shape_validation(tmp_path):
    g = MaskGenerator(channels=(8, 4, 4, 4))
    save_generator(tmp_path / "g.ckpt", g)
    tensors, header = load_checkpoint(tmp_path / "g.ckpt")
    tensors["layers.0.0.weight"] = np.zeros((128, 9, 4, 4), np.float32)
    save_checkpoint(tmp_path / "bad.ckpt", tensors, header["architecture_id"], header["meta"])
    with pytest.raises(CheckpointError, match="shape"):
        load_generator(tmp_path / "bad.ckpt")
    save_checkpoint(tmp_path / "other.ckpt", tensors, "mask-discriminator", {})
    with pytest.raises(CheckpointError):
        load_generator(tmp_path / "other.ckpt")


def test_config_validation():
    with pytest.raises(ContractViolation):
        GanTrainConfig(betas=(0.5, 1.0)).validate()
    with pytest.raises(ContractViolation):
        GanTrainConfig(learning_rate=0).validate()


def test_estimator_api():
    corpus = build_mask_corpus(MaskSamplerConfig(corpus_size=16, seed=0))
    est = MaskGAN(epochs=1, batch_size=8, generator_channels=(8, 8, 8, 8))
    assert est.get_params()["epochs"] == 1
    with pytest.raises(ContractViolation):
        est.sample(2)
    est.fit(corpus)
    assert est.sample(2, random_state=0).shape == (2, 64, 64)
    assert len(est.loss_trace_) == 1
