import math

import numpy as np
import pytest
import torch

from helpers import EPOCHS, LEARNING_RATE, CHECKPOINTS, eval_set, train_set, val_set
from segtrans.core import ModelGradientUnavailable
from segtrans.data import gen_shapes_dataset
from segtrans.models import (
    DivergedTraining,
    InvalidSpec,
    LevelOutOfRange,
    RateOutOfRange,
    ToyNetSpec,
    UnsupportedModel,
    adversarial_train,
    build_toy_model,
    conv_weights,
    corrupt_input,
    evaluate_miou,
    load_checkpoint,
    load_external_model,
    prune_model,
    save_checkpoint,
    train_toy,
)


def central_difference(handle, x, y, coords, h=1e-6):
    out = []
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        out.append((handle.loss_and_grad(xp, y)[0] - handle.loss_and_grad(xm, y)[0]) / (2 * h))
    return np.array(out)


def random_coords(rng, shape, n):
    return [tuple(int(rng.integers(s)) for s in shape) for _ in range(n)]


@pytest.fixture(scope="module")
def small_train():
    return gen_shapes_dataset(96, 32, 4, seed=10)


def test_forward_shape():
    h = build_toy_model(ToyNetSpec.default("A", seed=0))
    out = h(np.random.default_rng(0).random((3, 64, 64)).astype(np.float32))
    assert out.shape == (4, 64, 64)
    assert h.predict(np.zeros((5, 3, 64, 64), np.float32), batch_size=2).shape == (5, 64, 64)


def test_same_spec_same_weights_and_variants_differ():
    a1 = build_toy_model(ToyNetSpec.default("A", seed=0))
    a2 = build_toy_model(ToyNetSpec.default("A", seed=0))
    assert a1.state_checksum() == a2.state_checksum()
    assert a1.state_checksum() != build_toy_model(ToyNetSpec.default("A", seed=1)).state_checksum()
    b = build_toy_model(ToyNetSpec.default("B", seed=0))
    x = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
    assert np.abs(a1(x) - b(x)).max() > 0


def test_build_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_toy_model(ToyNetSpec.default("B"))
    assert torch.equal(torch.rand(3), expected)


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        ToyNetSpec.default("C")
    with pytest.raises(InvalidSpec):
        build_toy_model(ToyNetSpec("A", (8, 8), (1,), (1, 1)))
    spec = ToyNetSpec.default("B", seed=4)
    assert ToyNetSpec.from_dict(spec.to_dict()) == spec
    assert spec.depth == 7


def test_untrained_model_is_near_chance():
    h = build_toy_model(ToyNetSpec.default("A", seed=0))
    assert evaluate_miou(h, val_set()) < 0.3


def test_trained_toy_models_are_accurate(toy_a, toy_b):
    assert evaluate_miou(toy_a, val_set()) >= 0.80
    assert evaluate_miou(toy_b, val_set()) >= 0.80


@pytest.mark.slow
def test_training_recipe_reproduces_checkpoint(toy_a):
    trained, val = train_toy(build_toy_model(ToyNetSpec.default("A", seed=0)), train_set(),
                             epochs=EPOCHS, learning_rate=LEARNING_RATE, seed=0, val_dataset=val_set())
    assert val >= 0.80
    assert trained.state_checksum() == toy_a.state_checksum()


def test_training_is_deterministic(small_train):
    spec = ToyNetSpec.default("B", seed=2)
    a, _ = train_toy(build_toy_model(spec), small_train, epochs=1, seed=5)
    b, _ = train_toy(build_toy_model(spec), small_train, epochs=1, seed=5)
    c, _ = train_toy(build_toy_model(spec), small_train, epochs=1, seed=6)
    assert a.state_checksum() == b.state_checksum() != c.state_checksum()


def test_training_leaves_input_handle_untouched(small_train):
    h = build_toy_model(ToyNetSpec.default("A"))
    before = h.state_checksum()
    train_toy(h, small_train, epochs=1)
    assert h.state_checksum() == before


def test_divergence_is_reported(small_train):
    with pytest.raises(DivergedTraining):
        train_toy(build_toy_model(ToyNetSpec.default("A")), small_train, epochs=2, learning_rate=1e38)


def test_adversarial_training_reductions(small_train):
    spec = ToyNetSpec.default("A", seed=1)
    plain, _ = train_toy(build_toy_model(spec), small_train, epochs=1, seed=3)
    no_mix, _ = adversarial_train(build_toy_model(spec), small_train, epochs=1, epsilon=8 / 255,
                                  mix_ratio=0.0, seed=3)
    no_eps, _ = adversarial_train(build_toy_model(spec), small_train, epochs=1, epsilon=0.0,
                                  mix_ratio=0.5, seed=3)
    mixed, _ = adversarial_train(build_toy_model(spec), small_train, epochs=1, epsilon=8 / 255,
                                 mix_ratio=0.5, seed=3)
    assert plain.state_checksum() == no_mix.state_checksum() == no_eps.state_checksum()
    assert mixed.state_checksum() != plain.state_checksum()
    with pytest.raises(ValueError):
        adversarial_train(build_toy_model(spec), small_train, mix_ratio=1.5)


def test_gradient_matches_finite_differences(toy_a):
    h64 = toy_a.to(torch.float64)
    x, y = eval_set()[0]
    x = x.data.astype(np.float64)
    rng = np.random.default_rng(0)
    coords = random_coords(rng, x.shape, 20)
    _, g = h64.loss_and_grad(x, y)
    fd = central_difference(h64, x, y.data, coords)
    ana = np.array([g[c] for c in coords])
    rel = np.abs(ana - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() < 1e-3, (ana, fd)


def test_retained_pixel_gradient_uses_only_masked_loss(toy_a):
    x, y = eval_set()[1]
    mask = np.zeros((64, 64), np.uint8)
    mask[:32] = 1
    full = toy_a.input_gradient(x, y)
    part = toy_a.input_gradient(x, y, "retained_pixels", mask)
    assert not np.allclose(full, part)
    labels = y.data.copy()
    labels[32:] = 255
    assert np.allclose(part, toy_a.input_gradient(x, labels))


def test_prune_zero_rate_is_identity(toy_b):
    xs, _ = eval_set().arrays()
    pruned = prune_model(toy_b, 0.0)
    assert np.array_equal(pruned(xs[:8]), toy_b(xs[:8]))


def test_prune_exact_zero_count(toy_b):
    n = sum(w.numel() for w in conv_weights(toy_b.module))
    assert sum(int((w == 0).sum()) for w in conv_weights(toy_b.module)) == 0
    for rate in (0.3, 0.9):
        pruned = prune_model(toy_b, rate)
        zeros = sum(int((w == 0).sum()) for w in conv_weights(pruned.module))
        assert zeros == math.ceil(rate * n)
    with pytest.raises(RateOutOfRange):
        prune_model(toy_b, 0.95)


def test_pruning_hurts_benign_accuracy(toy_b):
    assert evaluate_miou(prune_model(toy_b, 0.7), eval_set()) < evaluate_miou(toy_b, eval_set())


def test_corruption_levels():
    x = np.full((3, 64, 64), 0.5)
    assert np.array_equal(corrupt_input(x, 0), x)
    out = corrupt_input(x, 5, np.random.default_rng(0))
    assert np.std(out - x) == pytest.approx(0.2, abs=0.01)
    assert out.min() >= 0 and out.max() <= 1
    for bad in (-1, 6):
        with pytest.raises(LevelOutOfRange):
            corrupt_input(x, bad)


def test_checkpoint_round_trip(tmp_path, toy_a):
    path = save_checkpoint(toy_a, tmp_path / "a.pt")
    back = load_checkpoint(path)
    assert back.state_checksum() == toy_a.state_checksum()
    via_descriptor = load_external_model(str(path))
    x = eval_set()[0][0]
    assert np.array_equal(via_descriptor(x), toy_a(x))


def test_missing_or_bogus_checkpoint(tmp_path):
    with pytest.raises(UnsupportedModel):
        load_external_model({"kind": "checkpoint", "path": str(tmp_path / "none.pt")})
    torch.save({"format": "other"}, tmp_path / "o.pt")
    with pytest.raises(UnsupportedModel):
        load_checkpoint(tmp_path / "o.pt")
    (tmp_path / "junk.pt").write_bytes(b"junk")
    with pytest.raises(UnsupportedModel):
        load_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(UnsupportedModel):
        load_external_model({"kind": "onnx", "path": "x"})


def test_python_factory_model_gradient_check():
    h = load_external_model({"kind": "python", "target": "helpers:tiny_fcn", "num_classes": 3})
    h64 = h.to(torch.float64)
    rng = np.random.default_rng(2)
    x = rng.random((3, 12, 12))
    y = rng.integers(0, 3, (12, 12))
    coords = random_coords(rng, x.shape, 5)
    _, g = h64.loss_and_grad(x, y)
    fd = central_difference(h64, x, y, coords)
    assert np.allclose([g[c] for c in coords], fd, rtol=1e-5, atol=1e-9)


@pytest.mark.filterwarnings("ignore::DeprecationWarning")
def test_torchscript_model(tmp_path):
    from helpers import tiny_fcn
    path = tmp_path / "m.ts"
    torch.jit.script(tiny_fcn()).save(str(path))
    h = load_external_model({"kind": "torchscript", "path": str(path), "num_classes": 3})
    assert h(np.zeros((3, 8, 8), np.float32)).shape == (3, 8, 8)


def test_detached_model_rejected():
    with pytest.raises(ModelGradientUnavailable):
        load_external_model({"kind": "python", "target": "helpers:detached", "num_classes": 3})
    with pytest.raises(UnsupportedModel):
        load_external_model({"kind": "python", "target": "helpers:nothing", "num_classes": 3})
