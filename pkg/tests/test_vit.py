import numpy as np
import pytest

from lotus import numerics as nx
from lotus.dataio import ImageDataset, gen_synthetic
from lotus.errors import InputError, UsageError
from lotus.training import OptimizerConfig, train_step
from lotus.vit import (
    ViTConfig,
    evaluate,
    forward,
    init_params,
    is_prunable,
    param_shapes,
    patchify,
    prunable_names,
    unpatchify,
)

CFG = ViTConfig(image_size=16, patch_size=4, dim=32, depth=2, heads=4, num_classes=4)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=5)


def random_patches(b, n=16, seed=0):
    return np.random.default_rng(seed).random((b, n, CFG.patch_dim)).astype(np.float32)


class TestConfig:
    def test_sequence_length(self):
        assert CFG.num_patches == 16 and CFG.seq_len == 17

    def test_indivisible_image(self):
        with pytest.raises(InputError):
            ViTConfig(image_size=15, patch_size=4)

    def test_heads_must_divide_dim(self):
        with pytest.raises(InputError):
            ViTConfig(dim=30, heads=4)

    def test_prunable_set(self):
        names = prunable_names(init_params(CFG, 0))
        assert len(names) == 6 * CFG.depth
        assert not any(is_prunable(n) for n in ("pos_embed", "cls_token", "patch_embed.weight",
                                                 "head.weight", "blocks.0.mlp.b1", "blocks.1.ln1.gamma"))

    def test_init(self, params):
        assert set(params) == set(param_shapes(CFG))
        assert np.all(params["blocks.0.ln1.gamma"].data == 1)
        assert np.all(params["head.bias"].data == 0)
        w = params["blocks.0.attn.wq"].data
        assert np.max(np.abs(w)) <= 0.04 + 1e-7
        assert 0.01 < w.std() < 0.02


class TestPatchify:
    def test_index_arithmetic(self):
        img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out = patchify(img, 2)
        np.testing.assert_array_equal(out[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(out[3], [10, 11, 14, 15])

    def test_single_patch(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        out = patchify(img, 8)
        assert out.shape == (1, 3 * 64)
        np.testing.assert_array_equal(out[0], img.ravel())

    def test_channel_major_within_patch(self):
        img = np.arange(2 * 4 * 4).reshape(2, 4, 4)
        out = patchify(img, 2)
        np.testing.assert_array_equal(out[0], [0, 1, 4, 5, 16, 17, 20, 21])

    def test_round_trip(self):
        x = np.random.default_rng(1).random((5, 3, 16, 16))
        np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 3, 16, 16), x)

    def test_indivisible(self):
        with pytest.raises(InputError):
            patchify(np.zeros((3, 10, 10)), 4)


class TestForward:
    def test_shapes(self, params):
        logits, cap = forward(params, CFG, random_patches(2), capture=True)
        assert logits.shape == (2, 4)
        assert cap.depth == 2
        assert cap.maps[0].shape == (2, 4, 17, 17)

    def test_attention_rows_sum_to_one(self, params):
        _, cap = forward(params, CFG, random_patches(3), capture=True)
        for m in cap.maps:
            np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-5)
            assert m.min() >= 0 and m.max() <= 1

    def test_identity_subset_bit_identical(self, params):
        x = random_patches(2)
        full = forward(params, CFG, x).data
        sub = forward(params, CFG, x, positions=np.tile(np.arange(16), (2, 1))).data
        np.testing.assert_array_equal(full, sub)

    def test_capture_does_not_change_logits(self, params):
        x = random_patches(2)
        a = forward(params, CFG, x).data
        b, _ = forward(params, CFG, x, capture=True)
        np.testing.assert_array_equal(a, b.data)

    @pytest.mark.parametrize("n_tok", [0, 1, 7, 16])
    def test_shape_closure(self, params, n_tok):
        x = random_patches(3, n=n_tok)
        pos = np.arange(n_tok)[::-1].copy()
        assert forward(params, CFG, x, positions=pos).shape == (3, 4)

    def test_permutation_invariance(self):
        p = init_params(CFG, 3, dtype=np.float64)
        rng = np.random.default_rng(4)
        for t in p.values():
            t.data = t.data + rng.normal(0, 0.2, t.shape)
        x = rng.random((2, 9, CFG.patch_dim))
        pos = np.stack([rng.choice(16, 9, replace=False) for _ in range(2)])
        perm = rng.permutation(9)
        a = forward(p, CFG, x, pos).data
        b = forward(p, CFG, x[:, perm], pos[:, perm]).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_unknown_position(self, params):
        with pytest.raises(InputError):
            forward(params, CFG, random_patches(1, n=2), positions=[3, 16])

    def test_too_many_tokens(self, params):
        with pytest.raises(InputError):
            forward(params, CFG, random_patches(1, n=17), positions=np.zeros(17, int))


def _dataset(n, seed=0, label=None):
    ds = gen_synthetic(n, noise_sigma=0.1, seed=seed)
    if label is not None:
        ds = ImageDataset(ds.images, np.full(n, label), "eval", 4)
    return ds


class TestEvaluate:
    def test_stub_head_favoring_truth(self, params):
        ds = _dataset(8, label=2)
        p = {k: nx.Tensor(v.data.copy()) for k, v in params.items()}
        p["head.weight"].data[:] = 0
        p["head.bias"].data[:] = [0, 0, 5, 0]
        assert evaluate(p, CFG, ds) == 1.0

    def test_ties_go_to_lowest_class(self, params):
        p = {k: nx.Tensor(v.data.copy()) for k, v in params.items()}
        p["head.weight"].data[:] = 0
        p["head.bias"].data[:] = 0
        assert evaluate(p, CFG, _dataset(4, label=0)) == 1.0
        assert evaluate(p, CFG, _dataset(4, label=1)) == 0.0

    def test_chance_band_for_random_init(self):
        accs = [evaluate(init_params(CFG, s), CFG, gen_synthetic(200, noise_sigma=0.1, seed=s)) for s in range(3)]
        assert all(0.10 <= a <= 0.45 for a in accs), accs

    def test_single_example(self, params):
        assert evaluate(params, CFG, _dataset(1)) in (0.0, 1.0)

    def test_empty(self, params):
        ds = ImageDataset(np.zeros((0, 3, 16, 16), np.float32), np.zeros(0), "eval", 4)
        with pytest.raises(UsageError):
            evaluate(params, CFG, ds)

    def test_one_step_lowers_batch_loss(self):
        for seed in range(3):
            p = init_params(CFG, seed)
            ds = gen_synthetic(32, noise_sigma=0.1, seed=seed)
            x, y = patchify(ds.images, 4), ds.labels
            before = nx.cross_entropy(forward(p, CFG, x), y).item()
            train_step(p, CFG, x, None, y, OptimizerConfig(lr=1e-3).state())
            after = nx.cross_entropy(forward(p, CFG, x), y).item()
            assert after < before
