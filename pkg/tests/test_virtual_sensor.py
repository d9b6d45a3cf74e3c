import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import arx_simulate, simulate_ss as _simulate_ss, stable_arx as _stable_arx
from socfusion.datamodel import ContractError, TimeSeriesDataset, rmse
from socfusion.neural import MlpSpec, TrainSpec, mlp_forward
from socfusion.simulate import CellParams, NoiseSpec, merged_drive
from socfusion.virtual_sensor import (
    ArxParams,
    LocalObserver,
    VirtualSensor,
    arx_regressors,
    arx_to_ss,
    build_features,
    fit_arx_ls,
    kmedoids,
    load_vs,
    place_observer_gain,
    predictor_inputs,
    run_observer_bank,
    save_vs,
    select_representatives,
    train_mlpv,
    train_soc_predictor,
    train_virtual_sensor,
)


def test_gamma_layout():
    g = ArxParams(np.arange(9.0))
    assert g.order == 4
    assert list(g.a) == [3, 2, 1, 0]
    assert list(g.b) == [7, 6, 5, 4]
    assert g.c == 8
    assert np.array_equal(ArxParams.from_abc(g.a, g.b, g.c).gamma, g.gamma)
    with pytest.raises(ContractError):
        ArxParams(np.zeros(4))


def test_regressor_row_matches_layout():
    v = np.arange(10.0)
    i = 100 + np.arange(10.0)
    phi = arx_regressors(v, i, 2)
    assert phi.shape == (8, 5)
    assert list(phi[0]) == [-0.0, -1.0, 100.0, 101.0, 1.0]


def test_least_squares_recovers_exact_arx():
    rng = np.random.default_rng(0)
    a = np.poly(rng.uniform(-0.9, 0.9, 3))[1:]
    g = ArxParams.from_abc(a, rng.normal(0, 0.01, 3), 3.0 * (1 + a.sum()))
    i = rng.normal(size=400)
    got = fit_arx_ls(TimeSeriesDataset(i, arx_simulate(g.a, g.b, g.c, i, 3)), 3)
    assert np.allclose(got.gamma, g.gamma, rtol=0, atol=1e-8)


def test_first_order_realization():
    obs = arx_to_ss(ArxParams([0.5, 0.3, 0.0]))
    assert obs.A.tolist() == [[-0.5]]
    assert obs.B.tolist() == [0.3]
    assert obs.C.tolist() == [1.0]
    assert obs.d.tolist() == [0.0] and obs.e == 0.0
    impulse = np.zeros(10)
    impulse[0] = 1.0
    assert np.allclose(_simulate_ss(obs, impulse), arx_simulate([0.5], [0.3], 0.0, impulse, 1), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_realization_reproduces_arx_recursion(seed, M):
    rng = np.random.default_rng(seed)
    g = _stable_arx(rng, M)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        obs = arx_to_ss(g)
    if obs.order != M:
        return  # a reduced model no longer matches the raw recursion state for state
    i = rng.normal(size=200)
    assert np.max(np.abs(_simulate_ss(obs, i) - arx_simulate(g.a, g.b, g.c, i, M))) <= 1e-10


def test_steady_state_with_affine_term():
    g = ArxParams.from_abc([-0.6, 0.08], [0.2, 0.1], 0.4)
    obs = arx_to_ss(g)
    v = _simulate_ss(obs, np.full(400, 2.0))
    assert v[-1] * (1 + g.a.sum()) == pytest.approx(g.b.sum() * 2.0 + g.c, rel=1e-12)


def test_cancellation_reduces_order():
    # (z - 0.5) divides both z^2 - 0.8 z + 0.15 and b(z) = 0.2 z - 0.1, and c = 0
    g = ArxParams.from_abc([-0.8, 0.15], [0.2, -0.1], 0.0)
    with pytest.warns(UserWarning, match="reducing order"):
        obs = arx_to_ss(g)
    assert obs.order == 1
    assert obs.A[0, 0] == pytest.approx(0.3, abs=1e-12)
    assert obs.B[0] == pytest.approx(0.2, abs=1e-12)


def test_scalar_gain():
    obs = place_observer_gain(arx_to_ss(ArxParams([-0.9, 0.1, 0.0])), 0.65)
    # A = [0.9]; L = A - p
    assert obs.L[0] == pytest.approx(0.9 - 0.65, abs=1e-15)


def test_gain_zero_when_poles_already_placed():
    a = np.poly([0.65] * 3)[1:]
    obs = place_observer_gain(arx_to_ss(ArxParams.from_abc(a, [0.1, 0.2, 0.3], 0.0)), 0.65)
    assert np.all(obs.L == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_closed_loop_characteristic_polynomial(seed):
    rng = np.random.default_rng(seed)
    obs = place_observer_gain(arx_to_ss(_stable_arx(rng, 4, radius=1.3)), 0.65)
    # the companion first column holds the closed-loop coefficients exactly
    target = np.poly([0.65] * 4)[1:]
    assert np.allclose(-obs.closed_loop()[:, 0], target, rtol=0, atol=1e-14)
    assert max(abs(np.linalg.eigvals(obs.closed_loop()))) < 1


def test_gain_placement_requires_canonical_form():
    obs = LocalObserver(np.diag([0.5, 0.2]), [1, 1], [1, 1], [0, 0])
    with pytest.raises(ContractError):
        place_observer_gain(obs)


def _bank(seed=1, n=3, M=4):
    rng = np.random.default_rng(seed)
    return [place_observer_gain(arx_to_ss(_stable_arx(rng, M)), 0.65) for _ in range(n)]


def test_exact_model_gives_zero_innovation():
    rng = np.random.default_rng(2)
    a = np.poly(rng.uniform(-0.9, 0.9, 4))[1:]
    g = ArxParams.from_abc(a, rng.normal(0, 0.01, 4), 3.0 * (1 + a.sum()))
    obs = place_observer_gain(arx_to_ss(g), 0.65)
    i = rng.normal(size=300)
    d = TimeSeriesDataset(i, arx_simulate(g.a, g.b, g.c, i, 4))
    # x = d is the state of the zero-history recursion at k = 0
    E = run_observer_bank([obs], d, x0=obs.d[None, :])
    assert np.max(np.abs(E)) <= 1e-10


def test_bank_innovations_bounded_and_duplicates_identical():
    obs = _bank()
    rng = np.random.default_rng(0)
    d = TimeSeriesDataset(rng.uniform(-5, 9, 10_000), rng.uniform(3.0, 4.0, 10_000))
    E = run_observer_bank(obs + [obs[0]], d)
    assert np.all(np.isfinite(E)) and np.max(np.abs(E)) < 1e3
    assert np.array_equal(E[0], E[-1])


def test_features_layout_and_sign_invariance():
    E = np.arange(24.0).reshape(4, 6) - 10.0
    f = build_features(E, 5, 5)
    assert f.shape == (24,)
    assert list(f[:6]) == list(np.abs(E[0, ::-1]))
    assert np.array_equal(build_features(-E, 5, 5), f)
    assert not build_features(np.zeros((4, 6)), 5, 5).any()
    with pytest.raises(ContractError):
        build_features(E, 5, 4)


def test_predictor_inputs_agree_with_features():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(3, 20))
    i, v = rng.normal(size=20), rng.uniform(3, 4, 20)
    X = predictor_inputs(E, 4, i, v)
    for k in range(4, 20):
        assert np.array_equal(X[k, :-2], build_features(E, 4, k))
        assert X[k, -2] == i[k] and X[k, -1] == v[k]
    # the first rows see zero-padded history
    assert np.array_equal(X[0, 0:5], [abs(E[0, 0]), 0, 0, 0, 0])


def test_kmedoids_separated_clouds():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
    med, labels, _ = kmedoids(X, 2, seed=1)
    assert sorted(X[med, 0] > 2.5) == [False, True]
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1


def test_kmedoids_beats_random_subsets():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 3))
    _, _, cost = kmedoids(X, 4, seed=0)
    D = np.linalg.norm(X[:, None] - X[None], axis=2)
    for _ in range(1000):
        m = rng.choice(50, 4, replace=False)
        assert cost <= D[:, m].min(axis=1).sum() + 1e-12


def test_kmedoids_exhaustive_small():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(12, 2))
    D = np.linalg.norm(X[:, None] - X[None], axis=2)
    best = min(D[:, list(m)].min(axis=1).sum() for m in itertools.combinations(range(12), 3))
    _, _, cost = kmedoids(X, 3, seed=2)
    assert cost <= 1.05 * best  # swap search is local, so allow a small gap


def test_representatives_sorted_and_degenerate_trace():
    rng = np.random.default_rng(0)
    soc = np.linspace(0, 1, 400)
    G = np.stack([soc, soc**2, np.ones_like(soc)], axis=1) + rng.normal(0, 1e-3, (400, 3))
    reps = select_representatives(G, soc, 4)
    tags = [t for _, t in reps]
    assert tags == sorted(tags) and len(reps) == 4
    flat = np.tile([1.0, 2.0, 3.0], (50, 1))
    with pytest.warns(UserWarning, match="reducing n_theta"):
        assert len(select_representatives(flat, np.linspace(0, 1, 50), 4)) == 1


def test_mlpv_on_fixed_arx_data():
    rng = np.random.default_rng(0)
    g = ArxParams.from_abc(np.poly([0.8, 0.3])[1:], [0.02, 0.01], 0.9)
    i = rng.normal(size=3000)
    v = arx_simulate(g.a, g.b, g.c, i, 2)
    d = TimeSeriesDataset(i, v, np.linspace(0.95, 0.05, 3000))
    net, gammas, socs = train_mlpv(d, 2, MlpSpec((1, 8, 8, 5)), TrainSpec(loss="absolute", epochs=5))
    phi = arx_regressors(d.v, d.i, 2)
    pred = np.sum(phi * gammas, axis=1)
    assert rmse(pred, d.v[2:]) <= 1e-3
    g02, g08 = mlp_forward(net, [0.2]), mlp_forward(net, [0.8])
    assert np.linalg.norm(g02 - g08) <= 1e-2


def test_mlpv_constant_signal():
    d = TimeSeriesDataset(np.zeros(200), np.full(200, 3.6), np.linspace(0.9, 0.1, 200))
    _, gammas, _ = train_mlpv(d, 4, MlpSpec((1, 4, 9)), TrainSpec(loss="absolute", epochs=3))
    pred = np.sum(arx_regressors(d.v, d.i, 4) * gammas, axis=1)
    assert rmse(pred, d.v[4:]) <= 1e-6
    assert gammas.shape[1] == 9


def test_soc_predictor_constant_target():
    rng = np.random.default_rng(0)
    d = TimeSeriesDataset(rng.normal(size=400), rng.uniform(3, 4, 400), np.full(400, 0.5))
    E = rng.normal(0, 0.01, (2, 400))
    h = train_soc_predictor(d, E, 3, MlpSpec((10, 8, 1)), TrainSpec(epochs=200, lr=3e-3, lr_decay=0.97, batch_size=32))
    out = np.array([mlp_forward(h, x)[0] for x in predictor_inputs(E, 3, d.i, d.v)])
    assert np.max(np.abs(out - 0.5)) <= 1e-3


@pytest.fixture(scope="module")
def trained():
    p = CellParams()
    tr, _ = merged_drive(p, ["pulse_urban", "pulse_highway"], [11, 12], 0.95, NoiseSpec(0.005, 0.02, 1))
    te, _ = merged_drive(p, ["mixed", "pulse_urban"], [21, 22], 0.95, NoiseSpec(0.005, 0.02, 2))
    vs, report = train_virtual_sensor(tr)
    return vs, report, tr, te


def test_trained_sensor_shape(trained):
    vs, report, tr, _ = trained
    assert vs.n_theta == 4 and vs.M == 4 and vs.ell == 5
    assert vs.predictor.n_in == 4 * 6 + 2
    assert report.innovations.shape == (4, len(tr))
    tags = [o.soc_tag for o in vs.observers]
    assert tags == sorted(tags)


def test_trained_sensor_test_accuracy(trained):
    vs, _, _, te = trained
    assert rmse(vs.predict(te.without_soc()), te.soc) <= 0.05


def test_stream_equals_batch(trained):
    vs, _, _, te = trained
    d = te.slice(0, 3000).without_soc()
    batch = vs.predict(d)
    vs.reset()
    stream = np.array([vs.step(i, v) for i, v in zip(d.i, d.v)])
    assert np.array_equal(stream, batch)


def test_output_clamped_and_flagged(trained):
    vs, _, _, _ = trained
    vs.reset()
    out = vs.step(0.0, 50.0)  # far outside the training range
    assert -0.1 <= out <= 1.1
    assert vs.last_clamped == (vs.last_raw != out)


def test_sensor_ignores_reference_column(trained):
    vs, _, _, te = trained
    d = te.slice(0, 500)
    corrupted = TimeSeriesDataset(d.i, d.v, np.zeros(len(d)))
    assert np.array_equal(vs.predict(d), vs.predict(corrupted))


def test_sensor_serialization(trained, tmp_path):
    vs, _, _, te = trained
    path = tmp_path / "vs.json"
    save_vs(vs, path)
    back = load_vs(path)
    d = te.slice(0, 200)
    assert np.array_equal(back.predict(d), vs.predict(d))
    with pytest.raises(ValueError):
        VirtualSensor.from_dict({"format": "x"})
