import shutil

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from ustex.augment import make_view_set
from ustex.checkpoint import load_checkpoint
from ustex.data import ImageCache, PhantomFamily, write_phantom_set
from ustex.errors import ConfigurationError, InvalidInputError, NonFiniteLossError
from ustex.losses import LossWeights, total_loss
from ustex.model import TextureAutoencoder, TextureConfig
from ustex.train import (
    TrainConfig, channel_order, epoch_batches, fit, lr_schedule, make_optimizer, read_log, render_texture_map,
    save_snapshot, stack_view_sets, subseed, train_step,
)

TINY = TextureConfig(num_channels=3, kernel_size=3, latent_dim=8, image_size=16, widths=(4, 8), projection_dim=8)

# ---------------------------------------------------------------- schedule


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, 1000, cfg) == 1e-4
    assert lr_schedule(1000, 1000, cfg) == 1e-6
    assert lr_schedule(500, 1000, cfg) == pytest.approx(5.05e-5, rel=1e-12)


@given(st.integers(1, 10 ** 6), st.data())
def test_lr_schedule_monotone(total, data):
    cfg = TrainConfig()
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert cfg.lr_min <= lr_schedule(b, total, cfg) <= lr_schedule(a, total, cfg) <= cfg.lr_max


@pytest.mark.parametrize("step, total", [(-1, 10), (11, 10), (0, 0)])
def test_lr_schedule_range_errors(step, total):
    with pytest.raises(InvalidInputError):
        lr_schedule(step, total, TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(batch_size=1), dict(epochs=0), dict(lr_min=1e-3, lr_max=1e-4),
                                    dict(weight_decay=-1.0), dict(epoch_size=4, batch_size=8)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_subseed_is_deterministic_and_name_sensitive():
    assert subseed(0, "augment", 3) == subseed(0, "augment", 3)
    assert len({subseed(0, "augment", 3), subseed(0, "sampler", 3), subseed(0, "augment", 4),
                subseed(1, "augment", 3)}) == 4


# ---------------------------------------------------------------- train_step


def _batch(rng, b=2, size=16, dtype=torch.float64):
    vs = [make_view_set(rng.uniform(-1, 1, size=(size, size)), rng) for _ in range(b)]
    return stack_view_sets(vs, dtype)


def _tiny_model(seed):
    torch.manual_seed(seed)
    return TextureAutoencoder(TINY).double()


def test_stack_view_sets_order(rng):
    vs = [make_view_set(rng.uniform(-1, 1, size=(16, 16)), rng) for _ in range(3)]
    views, targets = stack_view_sets(vs, torch.float64)
    assert views.shape == (12, 1, 16, 16) and targets.shape == (3, 2, 1, 16, 16)
    for b in range(3):
        for s in range(2):
            assert np.array_equal(targets[b, s, 0].numpy(), vs[b].targets[s])
            for c in range(2):
                assert np.array_equal(views[4 * b + 2 * s + c, 0].numpy(), vs[b].views[s, c])


def test_two_steps_on_a_fixed_batch_descend():
    descents = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        model = _tiny_model(trial)
        opt = make_optimizer(model.parameters(), TrainConfig(lr_max=1e-3, weight_decay=0.0))
        views, targets = _batch(rng)
        first = train_step(model, views, targets, LossWeights(), opt).total.item()
        second = train_step(model, views, targets, LossWeights(), opt).total.item()
        descents += second <= first
    assert descents >= 90


def test_zero_weights_leave_parameters_unchanged(rng):
    model = _tiny_model(0)
    before = [p.detach().clone() for p in model.parameters()]
    zero = LossWeights(0, 0, 0, 0, 0, 0)
    opt = make_optimizer(model.parameters(), TrainConfig(weight_decay=0.0))
    views, targets = _batch(rng)
    train_step(model, views, targets, zero, opt)
    assert all(torch.equal(a, p) for a, p in zip(before, model.parameters()))


def test_zero_gradient_changes_parameters_only_by_weight_decay(rng):
    model = _tiny_model(0)
    before = [p.detach().clone() for p in model.parameters()]
    cfg = TrainConfig(weight_decay=0.05, lr_max=1e-2)
    opt = make_optimizer(model.parameters(), cfg)
    views, targets = _batch(rng)
    train_step(model, views, targets, LossWeights(0, 0, 0, 0, 0, 0), opt)
    for a, p in zip(before, model.parameters()):
        torch.testing.assert_close(p.detach(), a * (1 - 1e-2 * 0.05), rtol=0, atol=1e-15)


def test_train_step_returns_pre_update_losses(rng):
    model = _tiny_model(1)
    views, targets = _batch(rng)
    with torch.no_grad():
        expected = total_loss(model.train()(views), targets, LossWeights()).total.item()
    opt = make_optimizer(model.parameters(), TrainConfig())
    got = train_step(model, views, targets, LossWeights(), opt)
    assert got.total.item() == pytest.approx(expected, abs=1e-12)
    assert not got.total.requires_grad


def test_non_finite_loss_names_component(rng):
    model = _tiny_model(0)
    with torch.no_grad():
        model.bank.squash_bias.fill_(float("nan"))
    opt = make_optimizer(model.parameters(), TrainConfig())
    views, targets = _batch(rng)
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, views, targets, LossWeights(), opt)
    assert info.value.component == "l1"


def test_single_view_set_rejected(rng):
    model = _tiny_model(0)
    views, targets = _batch(rng, b=1)
    with pytest.raises(InvalidInputError):
        train_step(model, views, targets, LossWeights(), make_optimizer(model.parameters(), TrainConfig()))


# ---------------------------------------------------------------- fit


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    fam = PhantomFamily(image_size=16, disc_radius=(0.2, 0.3))
    a = write_phantom_set(root / "a", fam, count=12, seed=0, organ_group="abdomen", prefix="a")
    b = write_phantom_set(root / "b", fam, count=4, seed=1, organ_group="heart", prefix="b")
    # a single manifest spanning both organ groups
    from ustex.data import DatasetManifest, ManifestRecord, write_manifest

    records = [ManifestRecord(f"a/{r.image_path}", r.organ_group, r.patient_id, r.frame_index, r.labels)
               for r in a.records]
    records += [ManifestRecord(f"b/{r.image_path}", r.organ_group, r.patient_id, r.frame_index, r.labels)
                for r in b.records]
    write_manifest(root / "manifest.csv", records)
    return DatasetManifest(records, root)


TINY_RUN = TrainConfig(epochs=2, epoch_size=64, batch_size=8, lr_max=1e-3, lr_min=1e-5, snapshot_every=1, seed=3)


@pytest.fixture(scope="module")
def tiny_run(phantoms, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return fit(TINY_RUN, phantoms, LossWeights(), out, TINY)


def test_tiny_fit_writes_outputs(tiny_run):
    out = tiny_run.out_dir
    assert len(tiny_run.log) == 2 * 8
    assert [r["step"] for r in tiny_run.log] == list(range(16))
    assert (out / "checkpoints" / "epoch_0001" / "manifest.txt").exists()
    assert (out / "checkpoints" / "final" / "manifest.txt").exists()
    assert {p.name for p in (out / "snapshots").iterdir()} == {
        "epoch_1_abdomen.png", "epoch_1_heart.png", "epoch_2_abdomen.png", "epoch_2_heart.png"}
    logged = read_log(out / "train_log.csv")
    assert len(logged) == 16
    for a, b in zip(logged, tiny_run.log):
        assert a["total"] == pytest.approx(b["total"], rel=1e-12)
        assert a["lr"] == b["lr"]
    assert logged[0]["lr"] == TINY_RUN.lr_max


def test_fit_draw_counts_are_balanced(tiny_run):
    import csv

    with open(tiny_run.out_dir / "draws.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    for r in rows:
        n = 64
        sigma = np.sqrt(n * 0.25)
        assert abs(int(r["count"]) - n / 2) < 5 * sigma
    assert sum(int(r["count"]) for r in rows) == 2 * 64


def test_logged_losses_replay_from_checkpoint(tiny_run, phantoms):
    model, _, state = load_checkpoint(tiny_run.out_dir / "checkpoints" / "epoch_0001")
    step = state["step"]
    images = ImageCache(phantoms, 16)
    _, view_sets = next(epoch_batches(phantoms, images, TINY_RUN, make_default_aug(), 2))
    views, targets = stack_view_sets(view_sets)
    with torch.no_grad():
        replay = total_loss(model.train()(views), targets, LossWeights()).as_dict()
    logged = tiny_run.log[step]
    for k, v in replay.items():
        assert v == pytest.approx(logged[k], abs=1e-5)


def make_default_aug():
    from ustex.augment import AugmentConfig

    return AugmentConfig()


def test_resume_reproduces_loss_curve(tiny_run, phantoms, tmp_path):
    resumed = fit(TINY_RUN, phantoms, LossWeights(), tmp_path, resume=tiny_run.out_dir / "checkpoints" / "epoch_0001")
    assert [r["step"] for r in resumed.log] == list(range(8, 16))
    for a, b in zip(resumed.log, tiny_run.log[8:]):
        for k in ("total", "contrastive", "l1", "lr"):
            assert abs(a[k] - b[k]) <= 1e-4


def test_resume_keeps_earlier_log_rows(tiny_run, phantoms, tmp_path):
    shutil.copytree(tiny_run.out_dir, tmp_path / "run")
    resumed = fit(TINY_RUN, phantoms, LossWeights(), tmp_path / "run",
                  resume=tmp_path / "run" / "checkpoints" / "epoch_0001")
    assert [r["step"] for r in resumed.log] == list(range(16))
    assert len(read_log(tmp_path / "run" / "train_log.csv")) == 16


def test_fit_is_deterministic(tiny_run, phantoms, tmp_path):
    again = fit(TINY_RUN, phantoms, LossWeights(), tmp_path, TINY)
    assert [r["total"] for r in again.log] == [r["total"] for r in tiny_run.log]


# ---------------------------------------------------------------- texture maps


def test_one_hot_segmentation_gives_palette_colors():
    palette = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    labels = np.array([[0, 1], [2, 0]])
    w = np.eye(3)[labels].transpose(2, 0, 1)
    rgb, panels = render_texture_map(w, palette)
    np.testing.assert_array_equal(rgb, palette[labels])
    assert panels.shape == (3, 2, 2)


def test_uniform_segmentation_gives_mean_color():
    palette = np.array([[1.0, 0.2, 0], [0, 1.0, 0.4], [0.3, 0, 1.0]])
    rgb, _ = render_texture_map(np.full((3, 4, 4), 1 / 3), palette)
    np.testing.assert_allclose(rgb, np.broadcast_to(palette.mean(axis=0), (4, 4, 3)), atol=1e-15)


def test_half_half_blend():
    palette = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    rgb, _ = render_texture_map(np.full((2, 1, 1), 0.5), palette)
    np.testing.assert_array_equal(rgb[0, 0], [0.5, 0, 0.5])


def test_palette_size_mismatch():
    with pytest.raises(ConfigurationError):
        render_texture_map(np.full((3, 2, 2), 1 / 3), np.zeros((2, 3)))


def test_channel_order_by_dominated_intensity():
    image = np.array([[0.9, -0.9], [0.1, 0.1]])
    w = np.zeros((4, 2, 2))
    w[2, 0, 0] = w[0, 0, 1] = w[1, 1, 0] = w[1, 1, 1] = 1.0  # channel 3 dominates nothing
    assert channel_order(w, image).tolist() == [2, 1, 0, 3]
    _, panels = render_texture_map(w, None, channel_order(w, image))
    np.testing.assert_array_equal(panels[0], w[2])


def test_save_snapshot_strip(tmp_path):
    w = np.full((3, 8, 8), 1 / 3)
    save_snapshot(tmp_path / "s.png", np.zeros((8, 8)), w)
    assert np.array(Image.open(tmp_path / "s.png")).shape == (8, 8 * 5, 3)
