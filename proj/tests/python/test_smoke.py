import numpy as np
import pytest

import psfuse


def test_mesh_and_fem():
    mesh = psfuse.build_structured_mesh(psfuse.Rect(0, 0, 1, 1), 0.25, 0.0)
    assert mesh.n_nodes == 25
    assert mesh.n_triangles == 32
    assert mesh.nodes.shape == (25, 2)

    fem = psfuse.fem_matrices(mesh)
    rows, cols, vals, shape = fem["stiffness"]
    assert shape == (25, 25)
    # G 1 = 0
    g = np.zeros(shape)
    for r, c, v in zip(rows, cols, vals):
        g[r, c] += v
    assert np.abs(g.sum(axis=1)).max() < 1e-10
    assert fem["mass_lumped"].sum() == pytest.approx(1.0, rel=1e-10)


def test_projection_rows_sum_to_one():
    mesh = psfuse.build_structured_mesh(psfuse.Rect(0, 0, 1, 1), 0.2, 0.2)
    pts = np.array([[0.3, 0.4], [0.71, 0.11], [0.5, 0.5]])
    rows, cols, vals, shape = psfuse.project_points(mesh, pts)
    sums = np.zeros(shape[0])
    for r, v in zip(rows, vals):
        sums[r] += v
    assert np.allclose(sums, 1.0)

    with pytest.raises(ValueError):
        psfuse.project_points(mesh, np.array([[5.0, 5.0]]))


def test_matern_and_grf():
    p = psfuse.MaternParams.from_scale(1.0, 0.1)
    assert p.range_rho == pytest.approx(0.2)
    assert p.theta_micro == pytest.approx(200.0)
    assert psfuse.matern_cov(0.0, p) == pytest.approx(1.0)

    mesh = psfuse.build_structured_mesh(psfuse.Rect(0, 0, 1, 1), 0.1, 0.2)
    x1 = psfuse.sample_grf(mesh, p, seed=5)
    x2 = psfuse.sample_grf(mesh, p, seed=5)
    assert np.array_equal(x1, x2)
    assert x1.shape[0] == mesh.n_nodes


def test_simulate_and_fit_melding():
    cfg = psfuse.table1_scenario(5)
    assert cfg.range_rho == pytest.approx(0.2)
    assert cfg.gamma == pytest.approx(1.0)
    cfg.n_points = 40
    cfg.n_areas = 16
    cfg.sim_mesh_edge = 0.06
    cfg.seed = 11

    data = psfuse.simulate_scenario(cfg, replicate=0)
    assert data.n_points == 40
    assert data.n_areas == 16
    assert data.pred_xy.shape == (2500, 2)
    assert data.preferential

    fit = psfuse.fit(data, variant="melding", mesh_edge=0.12, extension=0.2, jobs=2)
    s = fit.summaries()
    assert set(["tau_s", "tau_B", "sigma", "rho"]).issubset(s.keys())
    assert "gamma" not in s
    assert s["sigma"]["mean"] > 0

    pred = fit.predict(data.pred_xy[:50], threshold=0.0)
    assert pred["mean"].shape == (50,)
    assert (pred["sd"] > 0).all()
    assert ((pred["exc_prob"] >= 0) & (pred["exc_prob"] <= 1)).all()


def test_metrics():
    truth = np.linspace(0.0, 1.0, 20)
    scores = psfuse.surface_scores(truth + 0.5, np.full(20, 0.3), truth, 0.3)
    assert scores["mse"] == pytest.approx(0.25)
    assert scores["wd"] == pytest.approx(0.5)
    assert psfuse.interval_score(-1.0, 1.0, 2.0) == pytest.approx(42.0)
