import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceparse import tensor_core as tc
from faceparse.data_io import FileFormatError
from faceparse.errors import ConfigError, DataError, NumericError
from faceparse.icnn import ICNN, ICNNConfig, init_params
from faceparse.train import (
    AugmentSpec,
    TrainConfig,
    augment,
    checkpoint_bytes,
    cross_entropy_loss,
    draw_transform,
    fit,
    load_checkpoint,
    normalize_image,
    save_checkpoint,
    sgd_epoch,
    update_checkpoint_meta,
    warp,
)


def tiny_config(labels=2, size=8, maps=3):
    return ICNNConfig.uniform(labels, maps=maps, num_columns=3, interlink_rounds=1, kernel_size=3,
                              final_kernel_size=3, input_size=(size, size))


def tiny_example(rng, size=8, labels=2):
    target = np.zeros((size, size), dtype=int)
    target[size // 4: 3 * size // 4, size // 4: 3 * size // 4] = labels - 1
    image = rng.normal(0, 0.1, (size, size, 3)) + target[..., None]
    return image, target


class TestLoss:
    def test_perfect(self):
        probs = np.zeros((2, 2, 3))
        probs[..., 1] = 1.0
        assert cross_entropy_loss(probs, np.ones((2, 2), int)) <= 1e-11

    def test_uniform(self):
        assert cross_entropy_loss(np.full((3, 3, 4), 0.25), np.zeros((3, 3), int)) == pytest.approx(np.log(4))

    def test_two_class_value(self):
        assert cross_entropy_loss(np.array([[[0.7, 0.3]]]), np.zeros((1, 1), int)) == pytest.approx(0.35667, abs=1e-5)

    def test_class_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy_loss(np.full((1, 1, 2), 0.5), np.full((1, 1), 2))


class TestConfigs:
    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=0), dict(lr_decay=1.5)])
    def test_train_config_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(scale_range=(1.1, 1.2)), dict(max_rotation=-1)])
    def test_augment_spec_invalid(self, kw):
        with pytest.raises(ConfigError):
            AugmentSpec(**kw)


class TestNormalize:
    def test_moments(self, rng):
        x = normalize_image(rng.uniform(size=(10, 12, 3)) * 7 + 3)
        assert abs(x.mean()) < 1e-12
        assert np.sqrt((x * x).mean()) == pytest.approx(1.0)

    def test_constant_image_guard(self):
        x = normalize_image(np.full((4, 4, 3), 0.5))
        assert np.all(x == 0)

    def test_flip_equivariant_bitwise(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        np.testing.assert_array_equal(normalize_image(tc.flip_horizontal(x)),
                                      tc.flip_horizontal(normalize_image(x)))


class TestAugment:
    def square(self):
        labels = np.zeros((32, 32), dtype=int)
        labels[10:20, 8:18] = 3
        image = np.zeros((32, 32, 2))
        image[..., 0] = labels
        image[..., 1] = 0.5
        return image, labels

    def test_identity(self):
        image, labels = self.square()
        out, lab = warp(image, labels, 0.0, 1.0, (0.0, 0.0))
        np.testing.assert_array_equal(out, image)
        np.testing.assert_array_equal(lab, labels)

    def test_pure_shift(self):
        image, labels = self.square()
        out, lab = warp(image, labels, 0.0, 1.0, (3.0, 0.0))
        assert (lab == 3).sum() == 100
        rows = np.nonzero((lab == 3).any(axis=1))[0]
        assert rows.min() == 13 and rows.max() == 22
        # vacated top strip gets background label and the channel mean
        assert np.all(lab[:3] == 0)
        np.testing.assert_allclose(out[:3, :, 0], image[..., 0].mean())
        np.testing.assert_allclose(out[:3, :, 1], 0.5)

    def test_deterministic(self, rng):
        image, labels = self.square()
        spec = AugmentSpec()
        a = augment(image, labels, spec, np.random.default_rng(7))
        b = augment(image, labels, spec, np.random.default_rng(7))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            augment(np.zeros((4, 4, 1)), np.zeros((4, 5), int), AugmentSpec(), np.random.default_rng(0))

    def test_draw_ranges(self):
        rng = np.random.default_rng(0)
        spec = AugmentSpec()
        for _ in range(200):
            theta, scale, (dy, dx) = draw_transform(spec, rng)
            assert -15 <= theta <= 15 and 0.9 <= scale <= 1.1 and abs(dy) <= 10 and abs(dx) <= 10


def _fit_similarity(src, dst, center):
    """Least-squares similarity dst - c = A (src - c) + t with A = [[a, -b], [b, a]]."""
    rows = []
    rhs = []
    for (sy, sx), (ty, tx) in zip(src - center, dst - center):
        rows.append([sy, -sx, 1, 0])
        rhs.append(ty)
        rows.append([sx, sy, 0, 1])
        rhs.append(tx)
    a, b, t0, t1 = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return np.degrees(np.arctan2(b, a)), np.hypot(a, b), (t0, t1)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_recovered_transform_within_ranges(seed):
    n = 96
    points = np.array([[30, 30], [30, 66], [66, 30], [66, 66], [48, 48]], dtype=float)
    labels = np.zeros((n, n), dtype=int)
    for i, (r, c) in enumerate(points.astype(int), 1):
        labels[r - 2:r + 3, c - 2:c + 3] = i
    image = np.zeros((n, n, 1))
    _, lab = augment(image, labels, AugmentSpec(), np.random.default_rng(seed))
    assert set(np.unique(lab)) <= set(np.unique(labels))
    moved = np.array([np.argwhere(lab == i).mean(axis=0) for i in range(1, 6)])
    theta, scale, (t0, t1) = _fit_similarity(points, moved, np.array([(n - 1) / 2] * 2))
    assert abs(theta) <= 15 + 1.0
    assert 0.9 - 0.02 <= scale <= 1.1 + 0.02
    assert abs(t0) <= 10 + 0.75 and abs(t1) <= 10 + 0.75


class _Recorder(list):
    def __init__(self, items):
        super().__init__(items)
        self.seen = []

    def __getitem__(self, i):
        self.seen.append(int(i))
        return super().__getitem__(i)


class TestSGD:
    def test_lr_zero_leaves_params(self, rng):
        cfg = tiny_config()
        net = ICNN(cfg, init_params(cfg, 0))
        before = [p.copy() for p in net.parameters()]
        _, loss = sgd_epoch(net, [tiny_example(rng)], TrainConfig(augment=False), None, learning_rate=0.0)
        assert np.isfinite(loss) and loss > 0
        for a, b in zip(before, net.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_epoch_visits_permutation(self, rng):
        cfg = tiny_config()
        net = ICNN(cfg, init_params(cfg, 0))
        data = _Recorder([tiny_example(rng) for _ in range(7)])
        sgd_epoch(net, data, TrainConfig(batch_size=3, augment=False), None, epoch=2)
        assert sorted(data.seen) == list(range(7))
        assert data.seen != list(range(7))

    def test_empty_dataset(self):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            sgd_epoch(ICNN(cfg, init_params(cfg, 0)), [], TrainConfig(), None)

    def test_non_finite_loss_reports_example(self, rng):
        cfg = tiny_config()
        net = ICNN(cfg, init_params(cfg, 0))
        image, target = tiny_example(rng)
        image[0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="epoch 4, example 0"):
            sgd_epoch(net, [(image, target)], TrainConfig(augment=False), None, epoch=4)

    def test_identical_seeds_identical_trajectories(self, rng):
        cfg = tiny_config(size=16)
        data = [tiny_example(rng, 16) for _ in range(4)]
        runs = []
        for _ in range(2):
            net = ICNN(cfg, init_params(cfg, 3))
            traj = []
            for epoch in range(3):
                sgd_epoch(net, data, TrainConfig(seed=11), AugmentSpec(), epoch)
                traj.append(np.concatenate([p.ravel() for p in net.parameters()]))
            runs.append(traj)
        for a, b in zip(*runs):
            assert a.tobytes() == b.tobytes()

    def test_batch_gradient_is_mean(self, rng):
        cfg = tiny_config()
        data = [tiny_example(rng) for _ in range(2)]
        net = ICNN(cfg, init_params(cfg, 0))
        grads = [net.loss_and_grad(normalize_image(x), y)[2] for x, y in data]
        start = [p.copy() for p in net.parameters()]
        sgd_epoch(net, data, TrainConfig(batch_size=2, augment=False, learning_rate=0.1), None)
        for p, s, g0, g1 in zip(net.parameters(), start, *grads):
            np.testing.assert_allclose(p, s - 0.1 * (g0 + g1) / 2, atol=1e-14)

    def test_memorizes_one_example(self, rng):
        cfg = tiny_config(size=16, maps=4)
        net = ICNN(cfg, init_params(cfg, 0))
        data = [tiny_example(rng, 16)]
        tcfg = TrainConfig(learning_rate=0.2, augment=False)
        for epoch in range(300):
            _, loss = sgd_epoch(net, data, tcfg, None, epoch)
        assert loss < 0.05

    def test_fit_restores_best_and_stops(self, rng):
        cfg = tiny_config()
        net = ICNN(cfg, init_params(cfg, 0))
        data = [tiny_example(rng)]
        hist = fit(net, data, data, TrainConfig(max_epochs=5, augment=False, patience=2))
        assert 1 <= len(hist) <= 5
        assert all("val_loss" in h for h in hist)


def test_step_direction_property():
    """Small steps on a fixed example should not raise its loss (<= 2% violations allowed)."""
    violations = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        cfg = tiny_config(labels=3)
        net = ICNN(cfg, init_params(cfg, seed))
        image = normalize_image(r.normal(size=(8, 8, 3)))
        target = r.integers(0, 3, (8, 8))
        before = net.loss(image, target)
        sgd_epoch(net, [(image, target)], TrainConfig(augment=False, learning_rate=1e-3), None)
        violations += net.loss(image, target) > before
    assert violations / 50 <= 0.02, f"violation rate {violations / 50:.2%}"


class TestCheckpoint:
    def test_round_trip_and_meta(self, tmp_path):
        cfg = ICNNConfig(num_labels=4, maps_per_column=(3, 4, 5, 6), input_size=(16, 16))
        params = init_params(cfg, 0)
        for _, b in params.pairs():
            b[...] = np.random.default_rng(1).normal(size=b.shape)
        meta = {"epochs": 12, "seed": 3, "note": "x"}
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, params, meta)
        cfg2, params2, meta2 = load_checkpoint(path)
        assert cfg2 == cfg and meta2 == meta
        for a, b in zip(params.arrays(), params2.arrays()):
            assert np.abs(a - b).max() <= 1e-6 * np.abs(a).max()

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_corrupted_magic(self, tmp_path):
        cfg = tiny_config()
        raw = bytearray(checkpoint_bytes(cfg, init_params(cfg, 0)))
        raw[3] ^= 1
        path = tmp_path / "a.ckpt"
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError) as exc:
            load_checkpoint(path)
        assert exc.value.reason == "magic" and exc.value.offset == 0

    def test_truncated_names_offset(self, tmp_path):
        cfg = tiny_config()
        raw = checkpoint_bytes(cfg, init_params(cfg, 0))
        path = tmp_path / "a.ckpt"
        path.write_bytes(raw[:40])
        with pytest.raises(FileFormatError) as exc:
            load_checkpoint(path)
        assert "offset" in str(exc.value)

    def test_update_meta_keeps_params(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, 0)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, params, {"a": 1})
        update_checkpoint_meta(path, b=[1.0, 2.0])
        _, p2, meta = load_checkpoint(path)
        assert meta == {"a": 1, "b": [1.0, 2.0]}
        assert all(np.array_equal(np.float32(x), y) for x, y in zip(params.arrays(), p2.arrays()))

    def test_same_content_same_bytes(self):
        cfg = tiny_config()
        assert checkpoint_bytes(cfg, init_params(cfg, 5), {"s": 1}) == \
            checkpoint_bytes(cfg, init_params(cfg, 5), {"s": 1})


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 4))
def test_checkpoint_round_trip_property(seed, columns, maps):
    size = 2 ** (columns - 1) * 2
    cfg = ICNNConfig.uniform(3, maps=maps, num_columns=columns, interlink_rounds=2, kernel_size=3,
                             final_kernel_size=5, input_size=(size, size))
    params = init_params(cfg, seed)
    r = np.random.default_rng(seed)
    for _, b in params.pairs():
        b[...] = r.normal(size=b.shape)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "p.ckpt"
        save_checkpoint(path, cfg, params, {"seed": seed})
        cfg2, params2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"seed": seed}
    for a, b in zip(params.arrays(), params2.arrays()):
        assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-30)) <= 1e-6
