import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcblock.image_core import BlockOutOfBounds, Image, IntegralTables
from mcblock import mipfield as MF
from oracles import brute_mean, finest_level_oracle, render_oracle


def random_field(h, w, rng):
    f = MF.MipField(h, w)
    for g in f.levels:
        g[:] = rng.normal(size=g.shape)
    return f


def random_rects(h, w, n, rng):
    out = []
    for _ in range(n):
        bw, bh = rng.integers(1, w + 1), rng.integers(1, h + 1)
        out.append((rng.integers(0, w - bw + 1), rng.integers(0, h - bh + 1), bw, bh))
    return np.array(out, np.int64)


def mean_loss(field, img, rects):
    pred = field.render(rects)
    target = np.array([brute_mean(img.data, *r) for r in rects.tolist()])
    return float(np.mean((pred - target) ** 2))


@given(st.integers(1, 600), st.integers(1, 600))
def test_finest_level_matches_definition(h, w):
    assert MF.finest_level(h, w) == finest_level_oracle(h, w)
    f = MF.MipField(h, w)
    assert f.levels[-1].shape[:2] == (-(-h // f.sides[-1]), -(-w // f.sides[-1]))
    assert max(f.levels[0].shape[:2]) <= 2


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_render_matches_oracle(h, w, seed):
    rng = np.random.default_rng(seed)
    f = random_field(h, w, rng)
    rects = random_rects(h, w, 5, rng)
    got = f.render(rects)
    for r, row in zip(rects.tolist(), got):
        assert np.allclose(row, render_oracle(f.levels, h, w, r), atol=1e-12)


def test_whole_image_block_reads_only_level_zero(rng):
    f = random_field(64, 48, rng)
    full = np.array([[0, 0, 48, 64]])
    before = f.render(full)
    for g in f.levels[1:]:
        g[:] = rng.normal(size=g.shape)
    assert np.array_equal(f.render(full), before)


def test_render_is_linear_in_field(rng):
    a, b = random_field(20, 30, rng), random_field(20, 30, rng)
    s = MF.MipField(20, 30, [2.0 * x - 3.0 * y for x, y in zip(a.levels, b.levels)])
    rects = random_rects(20, 30, 40, rng)
    assert np.allclose(s.render(rects), 2.0 * a.render(rects) - 3.0 * b.render(rects), atol=1e-12)


def test_render_validates_blocks():
    f = MF.MipField(8, 8)
    with pytest.raises(BlockOutOfBounds):
        f.render(np.array([[6, 0, 4, 1]]))
    with pytest.raises(BlockOutOfBounds):
        f.render(np.array([[0, 0, 0, 1]]))


@pytest.mark.parametrize("shape", [(1, 1), (2, 3), (17, 9), (33, 64)])
def test_gradients_match_finite_differences(shape, rng):
    h, w = shape
    img = Image(rng.random((h, w, 3)))
    tables = IntegralTables.from_image(img)
    f = random_field(h, w, rng)
    rects = random_rects(h, w, 6, rng)
    _, grads = MF.batch_gradients(f, tables, rects)
    dense = [np.zeros(g.reshape(-1, 3).shape) for g in f.levels]
    for l, cells, g in grads:
        dense[l][cells] = g
    eps = 1e-6
    for l, grid in enumerate(f.levels):
        flat = grid.reshape(-1, 3)
        for cell in rng.choice(flat.shape[0], size=min(4, flat.shape[0]), replace=False):
            c = int(rng.integers(3))
            old = flat[cell, c]
            flat[cell, c] = old + eps
            up = mean_loss(f, img, rects)
            flat[cell, c] = old - eps
            down = mean_loss(f, img, rects)
            flat[cell, c] = old
            fd = (up - down) / (2 * eps)
            assert dense[l][cell, c] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_excluded_levels_get_zero_gradient(rng):
    img = Image(rng.random((64, 64, 3)))
    tables = IntegralTables.from_image(img)
    f = random_field(64, 64, rng)
    rects = np.array([[0, 0, 20, 20], [30, 10, 17, 3]])
    _, grads = MF.batch_gradients(f, tables, rects)
    touched = {l for l, cells, g in grads if np.any(g != 0)}
    allowed = set(f.included_levels(20))
    assert touched <= allowed
    assert max(touched) == max(l for l in allowed)
    assert f.sides[max(touched)] >= 20 and f.sides[max(touched) + 1] < 20


def test_gradient_cells_are_exactly_the_stencil(rng):
    f = random_field(16, 16, rng)
    img = Image(rng.random((16, 16, 3)))
    rect = np.array([[4, 4, 1, 1]])
    _, grads = MF.batch_gradients(f, IntegralTables.from_image(img), rect)
    for l, cells, g in grads:
        for cell in cells:
            bumped = f.copy()
            bumped.levels[l].reshape(-1, 3)[cell] += 1.0
            assert not np.allclose(bumped.render(rect), f.render(rect))


def test_level_counts(rng):
    f = MF.MipField(100, 70)
    rects = random_rects(100, 70, 50, rng)
    expect = [len(f.included_levels(max(w, h))) for _, _, w, h in rects.tolist()]
    assert f.level_counts(rects).tolist() == expect


def test_reconstruct_pixel_equals_block_at_pixel_partition(rng):
    f = random_field(13, 21, rng)
    pixel = MF.reconstruct_array(f, "pixel")
    block = MF.reconstruct_array(f, MF.pixel_rects(13, 21))
    assert np.array_equal(pixel, block)


def test_reconstruct_block_mode_is_piecewise_constant(rng):
    f = random_field(8, 8, rng)
    part = np.array([[0, 0, 8, 4], [0, 4, 4, 4], [4, 4, 4, 4]])
    out = MF.reconstruct_array(f, part)
    colors = f.render(part)
    for (x, y, w, h), c in zip(part.tolist(), colors):
        assert np.all(out[y:y + h, x:x + w] == c)
    with pytest.raises(BlockOutOfBounds):
        MF.reconstruct_array(f, part[:2])


def test_reconstruct_clips():
    f = MF.MipField(4, 4)
    f.levels[0][:] = 2.0
    assert np.all(MF.reconstruct(f).data == 1.0)


def test_psnr_and_mse():
    a = Image(np.zeros((2, 2, 3)))
    b = Image(np.full((2, 2, 3), 0.1))
    assert MF.mse(a, b) == pytest.approx(0.01)
    assert MF.psnr(0.01) == pytest.approx(20.0)
    assert MF.psnr(0.0) == float("inf")


def test_field_checkpoint_round_trip(tmp_path, rng):
    f = random_field(37, 5, rng)
    path = tmp_path / "f.mipf"
    MF.save_field(f, path)
    g = MF.load_field(path)
    assert (g.height, g.width, g.n_levels) == (37, 5, f.n_levels)
    assert all(np.array_equal(a, b) for a, b in zip(f.levels, g.levels))


def test_field_checkpoint_rejects_corrupt(tmp_path, rng):
    path = tmp_path / "f.mipf"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        MF.load_field(path)
    MF.save_field(random_field(9, 9, rng), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ValueError):
        MF.load_field(path)


def test_field_construction_validation():
    with pytest.raises(ValueError):
        MF.MipField(0, 3)
    with pytest.raises(ValueError):
        MF.MipField(4, 4, [np.zeros((2, 2, 3))] * 5)
    f = MF.MipField(4, 4)
    bad = [g.copy() for g in f.levels]
    bad[0][0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        MF.MipField(4, 4, bad)


@pytest.mark.parametrize("optimizer,lr", [("sgd", 5.0), ("normalized", 1.0), ("adam", 0.05)])
def test_pixel_training_converges(optimizer, lr, rng):
    img = Image(rng.random((16, 16, 3)))
    tables = IntegralTables.from_image(img)
    state = MF.TrainState(MF.MipField.for_image(img), learning_rate=lr, optimizer=optimizer)
    rects = MF.pixel_rects(16, 16)
    for _ in range(400):
        state, _ = MF.train_step(state, img, tables, rects)
    assert MF.mse(MF.reconstruct(state.field), img) < 1e-4


def test_normalized_step_moves_isolated_block_by_residual():
    img = Image(np.full((16, 16, 3), 0.8))
    tables = IntegralTables.from_image(img)
    state = MF.TrainState(MF.MipField(16, 16), learning_rate=1.0, optimizer="normalized")
    whole = np.array([[0, 0, 16, 16]])
    state, losses = MF.train_step(state, img, tables, whole)
    assert losses[0] == pytest.approx(0.64)
    assert state.field.render(whole)[0] == pytest.approx([0.8] * 3)


def test_train_state_validation():
    with pytest.raises(ValueError):
        MF.TrainState(MF.MipField(2, 2), learning_rate=0.0)
    with pytest.raises(ValueError):
        MF.TrainState(MF.MipField(2, 2), optimizer="lbfgs")
    with pytest.raises(ValueError):
        MF.batch_gradients(MF.MipField(2, 2), IntegralTables.from_image(Image(np.zeros((2, 2, 3)))),
                           np.zeros((0, 4), np.int64))
