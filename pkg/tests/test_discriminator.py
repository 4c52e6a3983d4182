import numpy as np
import pytest

from pcu4d import autodiff as ad
from pcu4d import geometry, layers
from pcu4d.autodiff import Tape, grad_check
from pcu4d.checkpoint import load_checkpoint, save_checkpoint
from pcu4d.discriminator import (
    DiscriminatorConfig, SetAbstractionConfig, discriminator_forward,
    discriminator_from_tensors, discriminator_node, discriminator_to_tensors,
    init_discriminator, set_abstraction_level,
)

import oracles


def tiny_disc_config():
    return DiscriminatorConfig(
        levels=(
            SetAbstractionConfig(keep_fraction=0.5, radius=0.5, widths=(3, 6, 8),
                                 max_ball=16),
            SetAbstractionConfig(keep_fraction=0.5, radius=0.9, widths=(8, 10),
                                 max_ball=16),
        ),
        final_widths=(10, 6, 1),
    )


def set_abstraction_reference(xyz, features, level):
    """Independent double-loop evaluation of one set abstraction level."""
    cfg = level.config
    centroids = sorted(geometry.fps(xyz, fraction=cfg.keep_fraction,
                                    seed_rule="lexmin").center_indices)
    new_xyz, pooled = [], []
    for c in centroids:
        members = [c]
        scored = sorted(
            (float(np.sum((xyz[j, :3] - xyz[c, :3]) ** 2)), j)
            for j in range(len(xyz))
            if j != c and np.sum((xyz[j, :3] - xyz[c, :3]) ** 2) < cfg.radius ** 2)
        members += [j for _, j in scored[:cfg.max_ball - 1]]
        rows = []
        for j in members:
            h = (xyz[j] - xyz[c]) if features is None else features[j]
            for w, b in level.mlp:
                h = oracles.leaky_relu_ref(h @ w + b)
            rows.append(h)
        pooled.append(np.max(rows, axis=0))
        new_xyz.append(xyz[c])
    return np.asarray(new_xyz), np.asarray(pooled)


class TestSetAbstraction:
    def test_keep_all_big_radius(self):
        rng = np.random.default_rng(0)
        params = init_discriminator(tiny_disc_config(), seed=1)
        level = params.levels[0]
        level.config = SetAbstractionConfig(keep_fraction=1.0, radius=10.0,
                                            widths=(3, 6, 8), max_ball=64)
        pts = rng.uniform(size=(7, 3))
        new_xyz, pooled = set_abstraction_level(pts, None, level)
        assert new_xyz.shape == (7, 3)
        ref_xyz, ref_pool = set_abstraction_reference(pts, None, level)
        np.testing.assert_allclose(pooled, ref_pool, atol=1e-6)

    def test_single_point(self):
        params = init_discriminator(tiny_disc_config(), seed=2)
        level = params.levels[0]
        pts = np.array([[0.3, -0.2, 0.5]])
        new_xyz, pooled = set_abstraction_level(pts, None, level)
        np.testing.assert_array_equal(new_xyz, pts)
        # relative coordinates of a singleton pool are zero; MLP of zeros
        h = np.zeros(3)
        for w, b in level.mlp:
            h = oracles.leaky_relu_ref(h @ w + b)
        np.testing.assert_allclose(pooled[0], h, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_two_levels_match_reference(self, seed):
        rng = np.random.default_rng(10 + seed)
        params = init_discriminator(tiny_disc_config(), seed=20 + seed)
        pts = rng.uniform(size=(32, 3))
        xyz1, f1 = set_abstraction_level(pts, None, params.levels[0])
        ref_xyz1, ref_f1 = set_abstraction_reference(pts, None, params.levels[0])
        np.testing.assert_allclose(xyz1, ref_xyz1)
        np.testing.assert_allclose(f1, ref_f1, atol=1e-6)
        xyz2, f2 = set_abstraction_level(xyz1, f1, params.levels[1])
        ref_xyz2, ref_f2 = set_abstraction_reference(ref_xyz1, ref_f1,
                                                     params.levels[1])
        np.testing.assert_allclose(xyz2, ref_xyz2)
        np.testing.assert_allclose(f2, ref_f2, atol=1e-6)


class TestDiscriminatorForward:
    def test_zero_final_weights_gives_bias(self):
        rng = np.random.default_rng(3)
        params = init_discriminator(tiny_disc_config(), seed=4)
        for w, _ in params.final:
            w[:] = 0.0
        params.final[-1][1][:] = 0.75
        for _ in range(3):
            pts = rng.uniform(size=(int(rng.integers(4, 20)), 3))
            assert discriminator_forward(pts, params) == pytest.approx(0.75)

    def test_permutation_invariance_bit_identical(self):
        rng = np.random.default_rng(5)
        params = init_discriminator(tiny_disc_config(), seed=6)
        pts = rng.uniform(size=(24, 3))
        score = discriminator_forward(pts, params)
        perm = rng.permutation(24)
        assert discriminator_forward(pts[perm], params) == score

    def test_score_finite_no_squashing(self):
        rng = np.random.default_rng(7)
        params = init_discriminator(tiny_disc_config(), seed=8)
        big = rng.uniform(size=(16, 3)) * 1e3
        score = discriminator_forward(big, params)
        assert np.isfinite(score)

    def test_empty_rejected(self):
        params = init_discriminator(tiny_disc_config(), seed=9)
        with pytest.raises(ValueError):
            discriminator_forward(np.zeros((0, 3)), params)


class TestGradients:
    def test_parameter_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        params = init_discriminator(tiny_disc_config(), seed=12)
        pts = rng.uniform(size=(16, 3))
        names = list(params.named_tensors())
        probe = rng.choice(len(names), size=5, replace=False)

        for name in (names[i] for i in probe):
            def f(x, name=name):
                tensors = params.named_tensors()
                saved = tensors[name].copy()
                tensors[name].reshape(-1)[:] = x
                tape = Tape()
                leaf = tape.leaf(pts)
                leaves = layers.param_leaves(tape, params)
                score = discriminator_node(leaf, params, leaves)
                grads = tape.grads_by_name(score)
                tensors[name].reshape(-1)[:] = saved.reshape(-1)
                return float(score.value), grads[name].reshape(-1)

            x0 = params.named_tensors()[name].reshape(-1).copy()
            report = grad_check(f, x0, h=1e-4, tol=1e-3)
            assert report.passed, f"{name}: {report}"

    def test_input_gradient_matches_fd(self):
        # the adversarial route: score gradient w.r.t. the cloud itself
        rng = np.random.default_rng(13)
        params = init_discriminator(tiny_disc_config(), seed=14)
        pts0 = rng.uniform(size=(10, 3))

        def f(x):
            pts = x.reshape(10, 3)
            tape = Tape()
            leaf = tape.leaf(pts)
            leaves = layers.param_leaves(tape, params)
            score = discriminator_node(leaf, params, leaves)
            return float(score.value), tape.backward(score)[leaf.id].reshape(-1)

        report = grad_check(f, pts0.reshape(-1).copy(), h=1e-5, tol=1e-3)
        # max-pool argmax ties are excluded by the kink detector
        assert report.passed, str(report)


class TestCheckpoint:
    def test_round_trip_bit_identical_score(self, tmp_path):
        rng = np.random.default_rng(15)
        params = init_discriminator(tiny_disc_config(), seed=16)
        pts = rng.uniform(size=(20, 3))
        before = discriminator_forward(pts, params)
        path = tmp_path / "disc.ckpt"
        save_checkpoint(path, discriminator_to_tensors(params))
        restored = discriminator_from_tensors(load_checkpoint(path))
        assert discriminator_forward(pts, restored) == before
        assert restored.levels[0].config.keep_fraction == 0.5
        assert restored.levels[1].config.widths == (8, 10)
