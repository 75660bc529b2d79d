import numpy as np
import pytest

from sima import model as M
from sima import viz as V
from sima.tensor import Rng, ShapeError


def two_pass_oracle(m, g):
    norms = []
    for row in m:
        norms.append(sum(float(x) * float(x) for x in row) ** 0.5)
    lo, hi = min(norms), max(norms)
    return np.array([(v - lo) / (hi - lo) for v in norms]).reshape(g, g)


def test_constant_map_is_zero():
    smap = V.token_saliency(np.ones((9, 4)), 3)
    assert np.all(smap.grid == 0)


def test_one_hot_token():
    m = np.zeros((16, 5))
    m[6] = [0.0, -2.0, 0.0, 1.0, 0.0]
    grid = V.token_saliency(m, 4).grid
    expected = np.zeros((4, 4))
    expected[1, 2] = 1.0
    np.testing.assert_array_equal(grid, expected)


def test_matches_two_pass_oracle():
    m = Rng(0).normal((16, 8))
    smap = V.token_saliency(m, 4, source="k_hat", layer=1)
    np.testing.assert_allclose(smap.grid, two_pass_oracle(m, 4), rtol=0, atol=1e-12)
    assert smap.grid.min() == 0 and smap.grid.max() == 1
    assert (smap.source, smap.layer) == ("k_hat", 1)


def test_scale_invariance():
    m = Rng(1).normal((25, 6))
    base = V.token_saliency(m, 5).grid
    for c in (1e-3, 2.5, 1e3):
        np.testing.assert_allclose(V.token_saliency(c * m, 5).grid, base, rtol=0, atol=1e-12)


def test_bad_token_count():
    with pytest.raises(ShapeError):
        V.token_saliency(np.ones((10, 4)), 3)


def test_pgm_single_pixel(tmp_path):
    path = tmp_path / "one.pgm"
    V.write_pgm(V.SaliencyMap(np.array([[1.0]])), path)
    assert path.read_bytes() == b"P5\n1 1\n255\n\xff"


def test_pgm_upscale_blocks(tmp_path):
    path = tmp_path / "two.pgm"
    V.write_pgm(V.SaliencyMap(np.array([[0.0, 1.0], [0.5, 0.2]])), path, upscale=2)
    img = V.read_pgm(path)
    assert img.shape == (4, 4)
    np.testing.assert_array_equal(img, [[0, 0, 255, 255], [0, 0, 255, 255],
                                        [128, 128, 51, 51], [128, 128, 51, 51]])


def test_pgm_round_trip_and_comments(tmp_path):
    pixels = (Rng(2).uniform((7, 5)) * 255).astype(np.uint8)
    path = tmp_path / "rt.pgm"
    V.save_pgm(pixels, path)
    np.testing.assert_array_equal(V.read_pgm(path), pixels)
    commented = tmp_path / "c.pgm"
    commented.write_bytes(b"P5\n# a comment\n5 7\n255\n" + pixels.tobytes())
    np.testing.assert_array_equal(V.read_pgm(commented), pixels)


def test_pgm_errors(tmp_path):
    with pytest.raises(ValueError):
        V.to_pixels(V.SaliencyMap(np.zeros((2, 2))), upscale=0)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(V.PGMError):
        V.read_pgm(bad)
    bad.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(V.PGMError, match="expected 4"):
        V.read_pgm(bad)
    bad.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(V.PGMError, match="maxval"):
        V.read_pgm(bad)
    with pytest.raises(OSError):
        V.write_pgm(V.SaliencyMap(np.zeros((1, 1))), tmp_path / "no" / "x.pgm")


def test_patch_layout_round_trip():
    image = np.arange(64.0).reshape(8, 8)
    tokens = V.image_to_tokens(image, 4)
    assert tokens.shape == (16, 4)
    assert tokens[5].tolist() == [18.0, 19.0, 26.0, 27.0]  # grid row 1, column 1
    np.testing.assert_array_equal(V.tokens_to_image(tokens, 4), image)
    with pytest.raises(ShapeError):
        V.image_to_tokens(np.zeros((8, 6)), 4)


def test_token_index_matches_grid_cell_end_to_end():
    # one bright patch in the image must light up the same cell after the
    # model's patch embedding and l1 normalization
    g, p = 4, 4
    cfg = M.ModelConfig(depth=1, dim=16, heads=2, patch_grid=g, d_in=p * p)
    params = M.init_params(cfg, Rng(3))
    rng = Rng(4)
    for r, c in [(0, 3), (2, 1), (3, 3)]:
        image = 0.01 * rng.normal((g * p, g * p))
        image[r * p:(r + 1) * p, c * p:(c + 1) * p] += 50.0
        tokens = V.image_to_tokens(image, g)
        capture = []
        M.classifier_forward(tokens, cfg, params, capture=capture)
        q_hat = capture[0]["q_hat"]  # (H, N, d)
        per_token = np.concatenate(list(q_hat), axis=-1)
        grid = V.token_saliency(per_token, g).grid
        assert np.unravel_index(np.argmax(grid), grid.shape) == (r, c)
        assert grid[r, c] == 1.0
