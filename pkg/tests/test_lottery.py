import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotus.dataio import gen_synthetic
from lotus.errors import InputError, UsageError
from lotus.lottery import (
    LotteryDataset,
    LotterySpec,
    ScoreLayer,
    build_lottery_dataset,
    finetune_on_lottery,
    patch_scores,
    select_patches,
    sink_normalize,
)
from lotus.training import OptimizerConfig
from lotus.vit import AttentionCapture, ViTConfig, copy_params, init_params

CFG = ViTConfig()


def capture_from_rows(rows_per_layer):
    """Capture whose CLS rows are given as ``[layer][head] -> row``."""
    maps = []
    for heads in rows_per_layer:
        t = len(heads[0])
        m = np.full((1, len(heads), t, t), 1.0 / t)
        for h, row in enumerate(heads):
            m[0, h, 0] = row
        maps.append(m)
    return AttentionCapture(maps)


class TestSinkNormalize:
    def test_example(self):
        np.testing.assert_allclose(sink_normalize([0.7, 0.1, 0.12, 0.08]), [0.1, 0.1, 0.12, 0.08], atol=1e-15)

    def test_already_at_mean(self):
        np.testing.assert_array_equal(sink_normalize([0.25] * 4), [0.25] * 4)

    def test_too_short(self):
        with pytest.raises(InputError):
            sink_normalize([1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 40))
    def test_first_equals_mean_and_order_kept(self, seed, t):
        row = np.random.default_rng(seed).dirichlet(np.ones(t))
        out = sink_normalize(row)
        assert out[0] == np.mean(out[1:])
        np.testing.assert_array_equal(out[1:], row[1:])
        np.testing.assert_array_equal(np.argsort(out[1:], kind="stable"), np.argsort(row[1:], kind="stable"))


class TestPatchScores:
    def test_single_map(self):
        cap = capture_from_rows([[[0.7, 0.1, 0.12, 0.08]]])
        np.testing.assert_allclose(patch_scores(cap, LotterySpec())[0], [0.1, 0.12, 0.08])

    def test_head_average(self):
        r1 = np.array([0.5, 0.2, 0.2, 0.1])
        r2 = np.array([0.1, 0.3, 0.1, 0.5])
        cap = capture_from_rows([[r1, r2]])
        np.testing.assert_allclose(patch_scores(cap, LotterySpec())[0], sink_normalize((r1 + r2) / 2)[1:])

    def test_layer_policies(self):
        first = [0.4, 0.3, 0.2, 0.1]
        last = [0.4, 0.1, 0.2, 0.3]
        cap = capture_from_rows([[first], [last]])
        np.testing.assert_allclose(patch_scores(cap, LotterySpec(score_layer="last"))[0], last[1:])
        mean = sink_normalize((np.array(first) + last) / 2)[1:]
        np.testing.assert_allclose(patch_scores(cap, LotterySpec(score_layer=ScoreLayer.MEAN_ALL))[0], mean)

    def test_empty_capture(self):
        with pytest.raises(UsageError):
            patch_scores(AttentionCapture([]), LotterySpec())


class TestSelectPatches:
    def test_drop_lowest(self):
        assert select_patches([0.3, 0.1, 0.2, 0.4], 0.25).tolist() == [0, 2, 3]

    def test_no_drop(self):
        assert select_patches([0.3, 0.1, 0.2], 0.0).tolist() == [0, 1, 2]

    def test_ties_drop_lower_index(self):
        assert select_patches([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [2, 3]

    @pytest.mark.parametrize("x", [-0.1, 1.0])
    def test_bad_fraction(self, x):
        with pytest.raises(InputError):
            select_patches([0.1, 0.2], x)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([round(0.05 * i, 2) for i in range(16)]),
           st.sampled_from([4, 16, 64]))
    def test_exact_count(self, seed, x, n):
        scores = np.random.default_rng(seed).random((5, n))
        kept = select_patches(scores, x)
        assert kept.shape == (5, n - math.floor(x * n))
        assert np.all(np.diff(kept, axis=1) > 0)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.sampled_from([0.1, 0.25, 0.5, 0.75]))
    def test_scale_invariance(self, seed, c, x):
        scores = np.random.default_rng(seed).random(16)
        np.testing.assert_array_equal(select_patches(scores, x), select_patches(scores * c, x))


@pytest.fixture(scope="module")
def small_data():
    return gen_synthetic(64, noise_sigma=0.1, seed=1), gen_synthetic(32, noise_sigma=0.1, seed=1, split="eval")


class TestLotteryDataset:
    def test_counts(self, small_data):
        train, _ = small_data
        lot = build_lottery_dataset(init_params(CFG, 0), CFG, train, LotterySpec(0.10))
        assert lot.num_kept == 15
        counts = np.bincount([len(k) for k in lot.kept])
        assert counts.nonzero()[0].tolist() == [15]

    def test_drop_zero_keeps_all(self, small_data):
        train, _ = small_data
        lot = build_lottery_dataset(init_params(CFG, 0), CFG, train, LotterySpec(0.0))
        np.testing.assert_array_equal(lot.kept, np.tile(np.arange(16), (64, 1)))

    def test_ragged_rejected(self):
        with pytest.raises(UsageError):
            LotteryDataset(np.zeros(2), np.array([[0, 1], [2]], dtype=object), 16)

    def test_file_round_trip(self, small_data, tmp_path):
        train, _ = small_data
        lot = build_lottery_dataset(init_params(CFG, 0), CFG, train, LotterySpec(0.25))
        lot.save(tmp_path / "l.lotd")
        back = LotteryDataset.load(tmp_path / "l.lotd", 16)
        np.testing.assert_array_equal(back.kept, lot.kept)
        np.testing.assert_array_equal(back.labels, lot.labels)


class TestFinetune:
    def test_zero_lr_is_noop(self, small_data):
        train, ev = small_data
        p = init_params(CFG, 0)
        before = copy_params(p)
        lot = build_lottery_dataset(p, CFG, train, LotterySpec(0.25))
        _, rows = finetune_on_lottery(p, CFG, lot, ev, 1, OptimizerConfig(lr=0.0), seed=0)
        for k in p:
            np.testing.assert_array_equal(p[k].data, before[k].data)
        assert [r.split for r in rows] == ["train", "eval"]

    def test_drop_zero_matches_full_training(self, small_data):
        from lotus.training import train_epochs

        train, ev = small_data
        lot = build_lottery_dataset(init_params(CFG, 9), CFG, train, LotterySpec(0.0))
        a, ra = finetune_on_lottery(init_params(CFG, 0), CFG, lot, ev, 2, OptimizerConfig(), seed=0)
        b, rb = train_epochs(init_params(CFG, 0), CFG, train, ev, 2, OptimizerConfig(), seed=0)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)
        assert [(r.loss, r.accuracy) for r in ra] == [(r.loss, r.accuracy) for r in rb]

    def test_deterministic(self, small_data):
        train, ev = small_data
        lot = build_lottery_dataset(init_params(CFG, 1), CFG, train, LotterySpec(0.25))
        runs = [finetune_on_lottery(init_params(CFG, 0), CFG, lot, ev, 1, OptimizerConfig(), seed=3)[1]
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_positions_are_original_indices(self, small_data, monkeypatch):
        import lotus.training as training

        train, ev = small_data
        lot = build_lottery_dataset(init_params(CFG, 1), CFG, train, LotterySpec(0.5))
        seen = []
        real = training.forward

        def spy(params, cfg, patches, positions=None, **kw):
            if positions is not None:
                seen.append((patches.copy(), np.asarray(positions).copy()))
            return real(params, cfg, patches, positions, **kw)

        monkeypatch.setattr(training, "forward", spy)
        finetune_on_lottery(init_params(CFG, 0), CFG, lot, ev, 1, OptimizerConfig(batch_size=64), seed=0)
        from lotus.vit import patchify

        full = patchify(train.images, 4)
        patches, positions = seen[0]
        # one batch holding every image, in shuffled order: rows must match by content
        for row_p, row_pos in zip(patches, positions):
            i = next(j for j in range(len(train)) if np.array_equal(lot.kept[j], row_pos)
                     and np.array_equal(full[j, row_pos], row_p))
            assert np.array_equal(full[i, row_pos], row_p)

    def test_epochs_must_be_positive(self, small_data):
        train, ev = small_data
        lot = build_lottery_dataset(init_params(CFG, 1), CFG, train, LotterySpec(0.25))
        with pytest.raises(UsageError):
            finetune_on_lottery(init_params(CFG, 0), CFG, lot, ev, 0, OptimizerConfig(), seed=0)
