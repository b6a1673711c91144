import math

import numpy as np
import pytest

import extrap


def test_entropy_values():
    assert extrap.entropy([0.0, 0.0]) == pytest.approx(math.log(2.0))
    assert extrap.entropy([100.0, -100.0]) == pytest.approx(0.0, abs=1e-9)


def test_mask_sparsity_loss():
    assert extrap.mask_sparsity_loss([0.0] * 6, 1.0) == pytest.approx(3.0)
    assert extrap.mask_sparsity_loss([0.3, -2.0], 0.0) == 0.0


def test_generator_roundtrip_shapes():
    gen = extrap.build_generator("sparse", "classification", seed=3)
    data = extrap.sample_source(gen, 64, seed=1)
    assert data["x"].shape == (64, gen.d_x)
    assert set(np.unique(data["y"])) <= {0, 1}
    x = gen(np.zeros((2, gen.d_z)))
    assert x.shape == (2, gen.d_x)


def test_sparse_index_sets():
    gen = extrap.build_generator("sparse", seed=5)
    J = gen.jacobian([0.1] * gen.d_z)
    I_s, I_c, I_cs = extrap.influenced_indices(J, 4)
    assert I_s == [4, 5]
    assert I_cs == [0, 1, 2, 3]


def test_config_defaults_and_validation():
    cfg = extrap.default_config("dense", "ours")
    assert cfg["n_runs"] == 50
    assert cfg["distances"] == [12, 18, 24, 30]
    assert extrap.validate_config(cfg) == cfg
    with pytest.raises(ValueError):
        extrap.validate_config({"no_such_key": 1})
    with pytest.raises(ValueError):
        extrap.validate_config({"distances": []})


def test_tiny_matrix_is_deterministic():
    cfg = extrap.default_config("dense", "source_only")
    cfg.update(n_runs=2, n_source=256, epochs=1, distances=[12], block_id_pairs=16)
    rows_a, cells_a = extrap.run_matrix(cfg)
    rows_b, _ = extrap.run_matrix(cfg)
    assert len(rows_a) == 2
    assert repr(rows_a) == repr(rows_b)
    assert 0.0 <= cells_a[0]["mean"] <= 1.0


def test_emit_plot():
    svg = extrap.emit_plot([(2, 18.0, 0.3, 50), (2, 24.0, 0.31, 50)])
    assert svg.startswith("<svg") and "polyline" in svg
    with pytest.raises(ValueError):
        extrap.emit_plot([])
