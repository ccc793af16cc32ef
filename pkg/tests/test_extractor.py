import numpy as np
import pytest

from gridattn.autodiff import backward
from gridattn.errors import ConfigError
from gridattn.extractor import (
    ExtractorConfig,
    extract,
    init_extractor,
    msra_normal,
)
from gridattn.tiler import CellGrid


def make_grid(cells):
    r, c = cells.shape[:2]
    return CellGrid(
        cells=cells,
        tissue_mask=np.ones((r, c), dtype=bool),
        cell_size=cells.shape[2],
        overlap=0,
        source_shape=(r * cells.shape[2], c * cells.shape[2]),
    )


SMALL = ExtractorConfig(feature_size=8, stages=((6, 3, 2), (8, 3, 2)))


class TestInit:
    def test_seed_reproducibility(self):
        a = init_extractor(SMALL, 7)
        b = init_extractor(SMALL, 7)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a = init_extractor(SMALL, 7)
        b = init_extractor(SMALL, 8)
        assert not np.array_equal(a["conv0_w"].data, b["conv0_w"].data)

    def test_msra_variance(self):
        # 3x3 kernel on 64 input channels: fan_in 576, variance 2/576
        rng = np.random.default_rng(0)
        draws = msra_normal(rng, (12000,), fan_in=576)
        assert abs(draws.var() - 2.0 / 576.0) < 0.2 * (2.0 / 576.0)

    def test_biases_zero(self):
        params = init_extractor(SMALL, 1)
        assert np.all(params["conv0_b"].data == 0.0)
        assert np.all(params["conv1_b"].data == 0.0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ExtractorConfig(feature_size=9, stages=((6, 3, 2), (8, 3, 2)))
        with pytest.raises(ConfigError):
            ExtractorConfig(feature_size=8, stages=((6, 3, 2), (8, 3, 2)), freeze_depth=2)


class TestExtract:
    def test_single_cell_shape(self):
        params = init_extractor(SMALL, 2)
        cells = np.random.default_rng(0).random((1, 1, 16, 16, 3))
        fg = extract(make_grid(cells), params, SMALL)
        assert fg.u.shape == (8, 1, 1)

    def test_weight_sharing_duplicated_cell(self):
        params = init_extractor(SMALL, 3)
        one = np.random.default_rng(1).random((16, 16, 3))
        cells = np.stack([np.stack([one, one])])  # 1x2 grid, same cell twice
        fg = extract(make_grid(cells), params, SMALL)
        np.testing.assert_array_equal(fg.u.data[:, 0, 0], fg.u.data[:, 0, 1])

    def test_grid_shape_dimensions(self):
        params = init_extractor(SMALL, 4)
        cells = np.random.default_rng(2).random((2, 3, 16, 16, 3))
        fg = extract(make_grid(cells), params, SMALL)
        assert fg.u.shape == (8, 2, 3)
        assert fg.tissue_mask.shape == (2, 3)

    def test_permutation_equivariance(self):
        params = init_extractor(SMALL, 5)
        rng = np.random.default_rng(3)
        cells = rng.random((2, 2, 16, 16, 3))
        fg = extract(make_grid(cells), params, SMALL)
        # swap the two rows
        swapped = cells[::-1].copy()
        fg2 = extract(make_grid(swapped), params, SMALL)
        np.testing.assert_array_equal(fg2.u.data[:, 0, :], fg.u.data[:, 1, :])
        np.testing.assert_array_equal(fg2.u.data[:, 1, :], fg.u.data[:, 0, :])

    def test_grid_size_agnostic(self):
        params = init_extractor(SMALL, 6)
        rng = np.random.default_rng(4)
        for r in range(1, 9):
            for c in range(1, 9):
                cells = rng.random((r, c, 8, 8, 3))
                fg = extract(make_grid(cells), params, SMALL)
                assert fg.u.shape == (8, r, c)

    def test_matches_per_cell_application(self):
        params = init_extractor(SMALL, 7)
        rng = np.random.default_rng(5)
        cells = rng.random((2, 2, 16, 16, 3))
        fg = extract(make_grid(cells), params, SMALL)
        for i in range(2):
            for j in range(2):
                solo = extract(make_grid(cells[i : i + 1, j : j + 1]), params, SMALL)
                np.testing.assert_allclose(
                    fg.u.data[:, i, j], solo.u.data[:, 0, 0], atol=1e-12
                )

    def test_uninitialized_params_rejected(self):
        cells = np.zeros((1, 1, 16, 16, 3))
        with pytest.raises(ValueError):
            extract(make_grid(cells), {}, SMALL)

    def test_deep_stack_on_tiny_cells_still_works(self):
        # spatial extent floors at 1x1 under same-padding, GAP stays valid
        cfg = ExtractorConfig(feature_size=4, stages=((4, 3, 2),) * 4)
        params = init_extractor(cfg, 0)
        cells = np.random.default_rng(8).random((1, 1, 8, 8, 3))
        fg = extract(make_grid(cells), params, cfg)
        assert fg.u.shape == (4, 1, 1)
        assert np.all(np.isfinite(fg.u.data))


class TestGradientsAndFreezing:
    def test_gradients_flow_to_unfrozen(self):
        params = init_extractor(SMALL, 8)
        cells = np.random.default_rng(6).random((2, 2, 16, 16, 3))
        fg = extract(make_grid(cells), params, SMALL)
        backward(fg.u.sum())
        for name, p in params.items():
            assert p.grad is not None, name
            assert np.any(p.grad != 0.0), name

    def test_frozen_stage_gets_no_grad(self):
        cfg = ExtractorConfig(feature_size=8, stages=((6, 3, 2), (8, 3, 2)), freeze_depth=1)
        params = init_extractor(cfg, 9)
        assert not params["conv0_w"].requires_grad
        assert params["conv1_w"].requires_grad
        cells = np.random.default_rng(7).random((1, 2, 16, 16, 3))
        fg = extract(make_grid(cells), params, cfg)
        backward(fg.u.sum())
        assert params["conv0_w"].grad is None
        assert params["conv1_w"].grad is not None
