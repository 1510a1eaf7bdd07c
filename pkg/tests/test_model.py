import math

import numpy as np
import pytest
import torch

from ustex import kernels
from ustex.checkpoint import load_checkpoint, read_tensors, save_checkpoint
from ustex.errors import ConfigurationError, InvalidInputError
from ustex.model import TextureAutoencoder, TextureConfig, TextureKernelBank, sparsemax

SMALL = TextureConfig(num_channels=3, kernel_size=5, latent_dim=16, image_size=16, widths=(4, 8), projection_dim=8)


def small_model(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    return TextureAutoencoder(cfg).double().eval()


# ---------------------------------------------------------------- config


def test_default_config_matches_documented_defaults():
    cfg = TextureConfig()
    assert (cfg.num_channels, cfg.kernel_size, cfg.latent_dim, cfg.image_size) == (5, 7, 256, 128)
    assert cfg.widths == (16, 32, 64, 128) and cfg.downsampling == 8


@pytest.mark.parametrize("kwargs", [
    dict(num_channels=1), dict(kernel_size=4), dict(image_size=100), dict(widths=()), dict(latent_dim=0),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TextureConfig(**kwargs)


# ---------------------------------------------------------------- sparsemax (torch)


def test_torch_sparsemax_matches_numpy_kernel(rng):
    z = rng.normal(size=(50, 5)) * 2
    out = sparsemax(torch.from_numpy(z), dim=1).numpy()
    np.testing.assert_allclose(out, kernels.sparsemax(z, axis=1), atol=1e-12)


def _support_stable(z, margin=1e-4):
    p = kernels.sparsemax(z)
    # distance of each coordinate from the threshold; small -> support may flip
    tau = (z * (p > 0)).sum() / max((p > 0).sum(), 1) - 1.0 / max((p > 0).sum(), 1)
    return np.all(np.abs(z - tau) > margin)


def test_sparsemax_jacobian_matches_finite_differences(rng):
    checked = 0
    while checked < 25:
        z = rng.normal(size=4)
        if not _support_stable(z):
            continue
        zt = torch.tensor(z[None], requires_grad=True)
        jac = torch.autograd.functional.jacobian(lambda t: sparsemax(t, dim=1), zt)[0, :, 0, :].numpy()
        fd = np.zeros((4, 4))
        h = 1e-5
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd[:, j] = (kernels.sparsemax(z + e) - kernels.sparsemax(z - e)) / (2 * h)
        np.testing.assert_allclose(jac, fd, rtol=1e-3, atol=1e-7)
        checked += 1


def test_sparsemax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        sparsemax(torch.tensor([[0.0, float("nan")]]), dim=1)


# ---------------------------------------------------------------- segment / reconstruct


def test_segment_weights_lie_on_simplex(rng):
    model = small_model()
    x = torch.from_numpy(rng.uniform(-1, 1, size=(3, 1, 16, 16)))
    seg = model.segment(x)
    assert seg.logits.shape == seg.weights.shape == (3, 3, 16, 16)
    assert torch.all(seg.weights >= 0)
    torch.testing.assert_close(seg.weights.sum(dim=1), torch.ones(3, 16, 16, dtype=torch.float64),
                               atol=1e-6, rtol=0)


def test_segment_deterministic_and_finite_on_zero_image():
    model = small_model()
    x = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    a, b = model.segment(x), model.segment(x)
    assert torch.equal(a.weights, b.weights) and torch.isfinite(a.logits).all()


def test_incompatible_size_is_configuration_error():
    with pytest.raises(ConfigurationError):
        small_model().segment(torch.zeros(1, 1, 15, 16, dtype=torch.float64))


def test_reconstruct_one_hot_delta_example():
    bank = TextureKernelBank(3, 5).double()
    with torch.no_grad():
        bank.kernels.zero_()
        bank.kernels[0, 0, 2, 2] = 1.0
        bank.squash_weights.zero_()
        bank.squash_weights[0, 0] = 1.0
        bank.squash_bias.zero_()
    w = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    w[:, 0] = 1.0
    torch.testing.assert_close(bank(w), torch.full((1, 1, 8, 8), math.tanh(1.0), dtype=torch.float64))


def test_reconstruct_zero_kernels_and_linearity(rng):
    bank = TextureKernelBank(3, 5).double()
    w = torch.from_numpy(kernels.sparsemax(rng.normal(size=(2, 3, 10, 10)), axis=1))
    pre = bank.pre_activation(w)
    with torch.no_grad():
        bank.squash_weights.mul_(2.0)
    torch.testing.assert_close(bank.pre_activation(w) - bank.squash_bias, 2 * (pre - bank.squash_bias))
    with torch.no_grad():
        bank.kernels.zero_()
        bank.squash_bias.zero_()
    assert torch.equal(bank(w), torch.zeros(2, 1, 10, 10, dtype=torch.float64))


def test_reconstruct_channel_mismatch():
    with pytest.raises(ConfigurationError):
        TextureKernelBank(3, 5)(torch.zeros(1, 4, 8, 8))


def test_reconstruct_translation_equivariant(rng):
    bank = TextureKernelBank(3, 5).double()
    w = torch.from_numpy(kernels.sparsemax(rng.normal(size=(1, 3, 20, 20)), axis=1))
    dy, dx, m = 2, 3, 2  # margin = kernel radius
    shifted = torch.roll(w, shifts=(dy, dx), dims=(2, 3))
    a = bank.pre_activation(w)
    b = bank.pre_activation(shifted)
    # interior unaffected by both the roll wrap-around and the zero padding
    inner_a = a[..., m:20 - m - dy, m:20 - m - dx]
    inner_b = b[..., m + dy:20 - m, m + dx:20 - m]
    assert torch.equal(inner_a, inner_b)


# ---------------------------------------------------------------- forward / encode


def test_forward_contract(rng):
    model = small_model()
    x = torch.from_numpy(rng.uniform(-1, 1, size=(4, 1, 16, 16)))
    out = model(x)
    assert out.reconstruction.shape == (4, 1, 16, 16)
    assert torch.all(out.reconstruction.abs() < 1)
    torch.testing.assert_close(out.projection.norm(dim=1), torch.ones(4, dtype=torch.float64), atol=1e-6, rtol=0)
    enc = model.encode(x)
    assert torch.equal(enc.values, out.latent)
    assert torch.equal(enc.projection, out.projection)


def test_encode_is_batch_independent_and_order_preserving(rng):
    model = small_model()
    x = torch.from_numpy(rng.uniform(-1, 1, size=(5, 1, 16, 16)))
    batch = model.encode(x).values
    for i in range(5):
        torch.testing.assert_close(model.encode(x[i:i + 1]).values[0], batch[i], atol=1e-12, rtol=0)


def test_distinct_images_give_distinct_latents(rng):
    model = small_model()
    x = torch.from_numpy(rng.uniform(-1, 1, size=(2, 1, 16, 16)))
    z = model.encode(x).values
    cos = torch.nn.functional.cosine_similarity(z[0], z[1], dim=0)
    assert cos < 1 - 1e-6


def test_input_ranks_accepted():
    model = small_model()
    x = torch.zeros(16, 16, dtype=torch.float64)
    assert model.segment(x).weights.shape == (1, 3, 16, 16)
    assert model.segment(x[None]).weights.shape == (1, 3, 16, 16)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model(seed=3)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(10, 1, 16, 16)))
    before = model(x)
    save_checkpoint(tmp_path / "ck", model, state={"step": 7})
    loaded, opt, state = load_checkpoint(tmp_path / "ck")
    assert opt is None and state["step"] == 7
    after = loaded.eval()(x)
    for a, b in zip(before, after):
        assert (a - b).abs().max() <= 1e-6


def test_checkpoint_layout(tmp_path):
    model = small_model()
    save_checkpoint(tmp_path / "ck", model)
    rows = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()
    names = [r.split("\t")[0] for r in rows]
    assert set(names) == set(model.state_dict())
    for row in rows:
        name, shape, dtype = row.split("\t")
        blob = (tmp_path / "ck" / name).read_bytes()
        n = int(np.prod([int(s) for s in shape.split(",") if s])) if shape else 1
        assert len(blob) == n * np.dtype(dtype).itemsize
    tensors = read_tensors(tmp_path / "ck")
    for k, v in model.state_dict().items():
        assert np.array_equal(tensors[k], v.numpy())


def test_checkpoint_restores_optimizer(tmp_path, rng):
    model = small_model()
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(2, 1, 16, 16)))
    out = model(x)
    (out.reconstruction.mean() + out.projection.sum()).backward()
    opt.step()
    save_checkpoint(tmp_path / "ck", model, opt)
    loaded, opt2, _ = load_checkpoint(tmp_path / "ck", lambda p: torch.optim.AdamW(p, lr=1e-3))
    for p, p2 in zip(model.parameters(), loaded.parameters()):
        s1, s2 = opt.state[p], opt2.state[p2]
        assert set(s1) == set(s2) == {"step", "exp_avg", "exp_avg_sq"}
        assert all(torch.equal(torch.as_tensor(s1[k]), torch.as_tensor(s2[k])) for k in s1)
