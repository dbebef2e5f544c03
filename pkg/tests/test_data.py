import numpy as np
import pytest
from scipy import stats

from dadaquant.data import (
    N_CLASSES,
    N_FEATURES,
    N_PARAMS,
    SampleCountModel,
    dataset_stats,
    evaluate,
    generate_synthetic,
    load_dataset,
    mlr_loss,
    mlr_loss_grad,
    save_dataset,
    sgd_epochs,
    unflatten,
)


def central_difference(params, x, y, h=1e-5):
    grad = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        grad[i] = (mlr_loss(params + e, x, y) - mlr_loss(params - e, x, y)) / (2 * h)
    return grad


def random_batch(rng, n):
    return rng.normal(size=(n, N_FEATURES)), rng.integers(0, N_CLASSES, n)


def test_parameter_layout():
    p = np.arange(N_PARAMS, dtype=float)
    w, b = unflatten(p)
    assert N_PARAMS == 610
    assert w.shape == (10, 60) and b.shape == (10,)
    assert w[1, 0] == 60 and b[0] == 600


def test_zero_params_loss_is_log10():
    rng = np.random.default_rng(0)
    x, y = random_batch(rng, 17)
    loss, _ = mlr_loss_grad(np.zeros(N_PARAMS), x, y)
    assert loss == pytest.approx(np.log(10), rel=1e-14)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(3):
        params = rng.normal(size=N_PARAMS) * 0.3
        x, y = random_batch(rng, 12)
        _, grad = mlr_loss_grad(params, x, y)
        fd = central_difference(params, x, y)
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4


def test_duplicated_batch_invariance():
    rng = np.random.default_rng(2)
    params = rng.normal(size=N_PARAMS)
    x, y = random_batch(rng, 9)
    a = mlr_loss_grad(params, x, y)
    b = mlr_loss_grad(params, np.vstack([x, x]), np.concatenate([y, y]))
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)


def test_extreme_logits_stay_finite():
    params = np.zeros(N_PARAMS)
    params[:600] = 500.0
    x = np.ones((3, N_FEATURES))
    loss, grad = mlr_loss_grad(params, x, np.array([0, 1, 2]))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_sgd_kernel_matches_numpy_step():
    rng = np.random.default_rng(3)
    params = rng.normal(size=N_PARAMS) * 0.1
    anchor = rng.normal(size=N_PARAMS) * 0.1
    x, y = random_batch(rng, 23)
    order = rng.permutation(23)
    lr, mu, batch = 0.05, 0.7, 10
    expected = params.copy()
    for start in range(0, 23, batch):
        idx = order[start : start + batch]
        _, g = mlr_loss_grad(expected, x[idx], y[idx])
        expected = expected - lr * (g + mu * (expected - anchor))
    got = params.copy()
    sgd_epochs(got, anchor, x, y, order[None, :], lr, mu, batch)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


# -- generator ---------------------------------------------------------------------------------------


def test_generator_deterministic():
    a = generate_synthetic(1, 1, 5, seed=3)
    b = generate_synthetic(1, 1, 5, seed=3)
    for ca, cb in zip(a.clients, b.clients):
        np.testing.assert_array_equal(ca.x_train, cb.x_train)
        np.testing.assert_array_equal(ca.y_test, cb.y_test)


def test_generator_seed_changes_data_and_prefix_is_stable():
    a = generate_synthetic(1, 1, 4, seed=3)
    b = generate_synthetic(1, 1, 9, seed=3)
    c = generate_synthetic(1, 1, 4, seed=4)
    for ca, cb in zip(a.clients, b.clients):
        np.testing.assert_array_equal(ca.x_train, cb.x_train)
        np.testing.assert_array_equal(ca.y_train, cb.y_train)
    assert not np.array_equal(a.clients[0].x_train[:5], c.clients[0].x_train[:5])


def test_generator_shapes_and_split():
    ds = generate_synthetic(1, 1, 30, seed=0)
    assert ds.num_clients == 30
    for c in ds.clients:
        assert c.num_samples >= 45
        assert c.x_train.shape[1] == N_FEATURES
        assert c.y_train.size == int(np.floor(0.8 * c.num_samples))
        assert c.y_train.max() < N_CLASSES


def test_count_envelope_statistically():
    # per-draw envelope: total in [6000, 14000], CV in [2.0, 4.5]; the median
    # realization must sit inside it and per-client minimum is always >= 10
    model = SampleCountModel()
    totals, cvs = [], []
    for seed in range(400):
        rng = np.random.default_rng(seed)
        n = np.round(rng.lognormal(model.mean, model.sigma, 30)) + model.offset
        totals.append(n.sum())
        cvs.append(n.std() / n.mean())
        assert n.min() >= 10
    assert 6000 <= np.median(totals) <= 14000
    assert 2.0 <= np.median(cvs) <= 4.5


def test_default_dataset_matches_reference_statistics():
    from dadaquant.cli import DEFAULT_DATA_SEED

    st = dataset_stats(generate_synthetic(1, 1, 30, seed=DEFAULT_DATA_SEED))
    assert 6000 <= st["samples"] <= 14000
    assert st["min"] >= 10
    assert 2.0 <= st["cv"] <= 4.5


def test_homogeneous_limit_labels_indistinguishable():
    ds = generate_synthetic(0, 0, 6, seed=5, counts=SampleCountModel(mean=6.0, sigma=0.1))
    table = np.array([np.bincount(np.concatenate([c.y_train, c.y_test]), minlength=N_CLASSES) for c in ds.clients])
    table = table[:, table.sum(axis=0) > 0]
    _, p, _, _ = stats.chi2_contingency(table)
    assert p > 0.01
    models = [c.model for c in ds.clients]
    assert all(np.array_equal(models[0], m) for m in models)


def test_evaluate_generating_model_of_homogeneous_data():
    ds = generate_synthetic(0, 0, 5, seed=1)
    acc, loss = evaluate(ds.clients[0].model, ds)
    assert acc >= 0.95
    assert np.isfinite(loss)


def test_evaluate_zero_params_is_modal_class_prior():
    ds = generate_synthetic(1, 1, 10, seed=2)
    labels = np.concatenate([c.y_test for c in ds.clients])
    acc, loss = evaluate(np.zeros(N_PARAMS), ds)
    # all logits tie, argmax picks class 0
    assert acc == pytest.approx(np.mean(labels == 0))
    assert acc <= np.bincount(labels).max() / labels.size
    assert loss == pytest.approx(np.log(10))


def test_evaluate_bounds():
    rng = np.random.default_rng(0)
    ds = generate_synthetic(1, 1, 4, seed=0)
    for _ in range(5):
        acc, _ = evaluate(rng.normal(size=N_PARAMS), ds)
        assert 0.0 <= acc <= 1.0


def test_dataset_file_round_trip(tmp_path):
    ds = generate_synthetic(1, 1, 7, seed=9)
    path = tmp_path / "synthetic.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.num_clients == 7
    for a, b in zip(ds.clients, back.clients):
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.x_test, b.x_test)
        np.testing.assert_array_equal(a.y_train, b.y_train)
        np.testing.assert_array_equal(a.y_test, b.y_test)
    size = 20 + 8 * 7 + sum(c.num_samples * (4 * N_FEATURES + 1) for c in ds.clients)
    assert path.stat().st_size == size


def test_load_rejects_missing_and_garbage(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.bin")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError):
        load_dataset(bad)
