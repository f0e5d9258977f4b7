import math

import numpy as np
import pytest
from scipy.stats import chi2

from mcblock import bench as B
from mcblock.image_core import Image, check_rects
from oracles import chi2_statistic


def small_cfg(**kw):
    base = dict(iterations=60, batch_size=64, checkpoint_every=20)
    base.update(kw)
    return B.TrainConfig(**base)


@pytest.fixture(scope="module")
def composite64():
    return B.composite_image(64)


# -- strategies -------------------------------------------------------------------

def test_strategy_labels_round_trip():
    for spec in ("random", "active", "coarse_to_fine", "mcblock", "mcblock-wo_init",
                 "mcblock-wo_partition-wo_selection"):
        assert B.parse_strategy(spec).label == spec
    with pytest.raises(ValueError):
        B.parse_strategy("random-wo_init")
    with pytest.raises(ValueError):
        B.parse_strategy("mcblock-wo_everything")
    with pytest.raises(ValueError):
        B.Strategy("nope")
    with pytest.raises(ValueError):
        B.Strategy("coarse_to_fine", schedule=(4, 8, 1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        B.TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        B.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        B.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        B.TrainConfig(optimizer="rmsprop")


# -- baselines --------------------------------------------------------------------

def test_random_baseline_is_uniform(rng):
    img = Image(np.zeros((4, 5, 3)))
    rects = B.baseline_random(img, 50_000, rng)
    assert np.all(rects[:, 2:] == 1)
    counts = np.bincount(rects[:, 1] * 5 + rects[:, 0], minlength=20)
    assert chi2_statistic(counts, np.full(20, 1 / 20)) < chi2.ppf(0.999, 19)


def test_active_baseline_follows_priority(rng):
    img = Image(np.zeros((1, 10, 3)))
    state = B.ActiveState(img, lam=1e9)
    one = np.ones(10, np.int64)
    rects = np.stack([np.arange(10), 0 * one, one, one], axis=1)
    losses = np.ones(10)
    losses[3] = 9.0
    state.update(rects, losses)
    draws = B.baseline_active(state, img, 90_000, rng)[:, 0]
    assert np.mean(draws == 3) / np.mean(draws == 0) == pytest.approx(9.0, rel=0.05)
    probs = losses / losses.sum()
    assert chi2_statistic(np.bincount(draws, minlength=10), probs) < chi2.ppf(0.999, 9)


def test_active_untrained_pixels_come_first(rng):
    img = Image(np.zeros((2, 2, 3)))
    state = B.ActiveState(img)
    trained = np.array([[0, 0, 1, 1], [1, 0, 1, 1]])
    state.update(trained, np.array([1e-6, 1e-6]))
    draws = B.baseline_active(state, img, 2000, rng)
    assert np.mean(draws[:, 1] == 1) > 0.99


def test_active_staleness_growth():
    img = Image(np.zeros((1, 2, 3)))
    state = B.ActiveState(img, lam=10.0)
    state.update(np.array([[0, 0, 1, 1]]), np.array([0.5]))
    for _ in range(10):
        state.update(np.array([[1, 0, 1, 1]]), np.array([0.5]))
    assert state.priority(0) == pytest.approx(0.5 * math.e)


def test_coarse_to_fine_phases():
    sched = B.CoarseToFineSchedule.for_image((8, 4, 2, 1), 64, 64, 16)
    assert sched.phase_iters == (4, 16, 64)
    sides = [B.baseline_coarse_to_fine(sched, i) for i in range(100)]
    assert sides[:4] == [8] * 4
    assert sides[4:20] == [4] * 16
    assert sides[20:84] == [2] * 64
    assert set(sides[84:]) == {1}


def test_coarse_to_fine_blocks_in_bounds(rng):
    img = Image(np.zeros((13, 10, 3)))
    for side in (8, 4, 2, 1):
        rects = B.coarse_to_fine_blocks(side, img, 500, rng)
        check_rects(rects, 10, 13)
        assert np.all(rects[:, 0] % side == 0) and np.all(rects[:, 1] % side == 0)
        assert np.all(np.maximum(rects[:, 2], rects[:, 3]) <= side)


def test_random_covers_every_pixel():
    img = Image(np.zeros((16, 16, 3)))
    m = B.run(B.Strategy("random"), img, small_cfg(iterations=40, batch_size=256), seed=1)
    assert np.all(m.sample_counts > 0)


# -- training runs ----------------------------------------------------------------

@pytest.mark.parametrize("spec", ["random", "active", "coarse_to_fine", "mcblock",
                                  "mcblock-wo_init", "mcblock-wo_partition",
                                  "mcblock-wo_selection", "mcblock-wo_block_rendering"])
def test_runs_are_deterministic_and_in_bounds(spec, composite64):
    s = B.parse_strategy(spec)
    a = B.run(s, composite64, small_cfg(), seed=3, check_bounds=True)
    b = B.run(s, composite64, small_cfg(), seed=3)
    assert [r.mse for r in a.records] == [r.mse for r in b.records]
    assert [r.iteration for r in a.records] == [0, 20, 40, 60]
    assert np.array_equal(a.sample_counts, b.sample_counts)
    assert a.records[-1].mse < a.records[0].mse
    assert a.strategy == spec


def test_zero_iterations_records_only_initial_checkpoint(composite64):
    m = B.run(B.Strategy("mcblock"), composite64, small_cfg(iterations=0))
    assert [r.iteration for r in m.records] == [0]
    assert m.records[0].samples == 0
    assert np.all(m.sample_counts == 0)


def test_random_fits_constant_image():
    img = Image(np.full((32, 32, 3), 0.42))
    m = B.run(B.Strategy("random"), img, small_cfg(iterations=200, checkpoint_every=50))
    assert m.final.mse < 1e-6


def test_stop_psnr_ends_early(composite64):
    m = B.run(B.Strategy("mcblock"), composite64,
              small_cfg(iterations=2000, checkpoint_every=10), stop_psnr=20.0)
    assert m.final.psnr >= 20.0
    assert m.final.iteration < 2000
    assert all(r.psnr < 20.0 for r in m.records[:-1])


def test_heatmap_conserves_samples(composite64):
    for spec in ("random", "coarse_to_fine", "mcblock"):
        m = B.run(B.parse_strategy(spec), composite64, small_cfg())
        assert m.sample_counts.sum() == pytest.approx(m.final.samples, rel=1e-9)
        assert m.sample_counts.min() > -1e-9


def test_mcblock_spends_less_on_background():
    img = B.composite_image(128)
    mask = B.background_mask(128)
    cfg = small_cfg(iterations=150, batch_size=256, checkpoint_every=50)
    share = {}
    for spec in ("random", "mcblock"):
        m = B.run(B.parse_strategy(spec), img, cfg, seed=0)
        share[spec] = m.sample_counts[mask].sum() / m.sample_counts.sum()
    assert share["random"] == pytest.approx(mask.mean(), abs=0.02)
    assert share["mcblock"] < 0.7 * share["random"]


def test_overhead_is_fraction(composite64):
    m = B.run(B.Strategy("mcblock"), composite64, small_cfg())
    assert 0.0 < B.measure_overhead(m) < 1.0
    r = B.run(B.Strategy("random"), composite64, small_cfg())
    assert B.measure_overhead(r) < 0.5


def test_block_rendering_partition():
    img = B.composite_image(32)
    with_blocks = B.run(B.Strategy("mcblock"), img, small_cfg(iterations=5))
    without = B.run(B.ablate(["block_rendering"]), img, small_cfg(iterations=5))
    assert with_blocks.partition is not None and without.partition is None
    assert with_blocks.final.leaf_count == with_blocks.forest.n_leaves


def test_summary_speedup():
    def fake(name, its):
        m = B.RunMetrics(name, 0)
        for it, p in its:
            m.records.append(B.Checkpoint(it, 10 ** (-p / 10), p, 0, 0, 1.0, 0.1, 0.9))
        return m
    runs = [fake("random", [(0, 10), (100, 25), (200, 31)]),
            fake("mcblock", [(0, 10), (50, 30)]),
            fake("active", [(0, 10), (100, 20)])]
    s = B.summarize(runs, 30.0)
    assert [x.iterations_to_target for x in s] == [200, 50, None]
    assert s[1].speedup == pytest.approx(4.0)
    assert s[2].speedup is None
    assert s[0].overhead == pytest.approx(0.1)


def test_composite_image_layout():
    img = B.composite_image(64)
    mask = B.background_mask(64)
    assert mask.mean() == pytest.approx(0.75)
    assert np.all(img.data[mask] == B.COMPOSITE_BACKGROUND)
    assert np.array_equal(img.data, B.composite_image(64).data)


def test_metrics_csv_round_trip(tmp_path, composite64):
    m = B.run(B.Strategy("random"), composite64, small_cfg())
    path = tmp_path / "m.csv"
    B.write_csv(path, B.METRICS_HEADER, m.metric_rows())
    rows = B.read_metrics_csv(path)
    assert [float(r["mse"]) for r in rows] == [r.mse for r in m.records]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        B.read_metrics_csv(bad)
