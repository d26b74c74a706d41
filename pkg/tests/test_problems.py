import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distlion import problems as pb
from distlion.errors import DatasetFormatError, InvalidInputError, InvalidParameterError


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# -- quadratic ---------------------------------------------------------------

def test_quadratic_identity_example():
    p = pb.QuadraticProblem.diagonal([1.0, 1.0], [0.0, 0.0])
    loss, g = pb.quadratic_grad(p, [3.0, -4.0], 1, None)
    assert g.tolist() == [3.0, -4.0] and loss == 12.5


def test_quadratic_at_optimum():
    p = pb.QuadraticProblem.random(0, 5)
    loss, g = p.loss_grad(p.x_star, 1, None)
    assert loss == 0.0 and np.all(g == 0)


def test_quadratic_noise_variance():
    p = pb.QuadraticProblem.diagonal(np.ones(4), np.zeros(4), sigma=1.0)
    rng = np.random.default_rng(0)
    draws = 100_000
    samples = np.array([p.loss_grad(np.zeros(4), 100, rng)[1] for _ in range(draws)])
    var = samples.var(axis=0, ddof=1)
    band = 3 * 0.01 * math.sqrt(2 / (draws - 1))
    assert np.all(np.abs(var - 0.01) <= band)


def test_quadratic_unbiased():
    p = pb.QuadraticProblem.random(1, 3, sigma=2.0)
    rng = np.random.default_rng(1)
    x = np.ones(3)
    draws = 10_000
    mean = np.mean([p.loss_grad(x, 4, rng)[1] for _ in range(draws)], axis=0)
    se = 1.0 / math.sqrt(draws)
    assert np.all(np.abs(mean - p.full_grad(x)) <= 4 * se)


def test_quadratic_many_matches_single_calls():
    p = pb.QuadraticProblem.random(2, 6, sigma=0.5)
    x = np.linspace(-1, 1, 6)
    rngs_a = [np.random.default_rng(s) for s in range(4)]
    rngs_b = [np.random.default_rng(s) for s in range(4)]
    losses, grads = p.loss_grad_many(x, [1, 2, 3, 4], rngs_a)
    for i, rng in enumerate(rngs_b):
        loss, g = p.loss_grad(x, i + 1, rng)
        assert losses[i] == loss and np.array_equal(grads[i], g)


def test_quadratic_validation():
    with pytest.raises(InvalidInputError):
        pb.QuadraticProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(InvalidParameterError):
        pb.QuadraticProblem.diagonal([1.0], [0.0], sigma=-1.0)
    with pytest.raises(InvalidInputError):
        pb.quadratic_grad(pb.QuadraticProblem.diagonal([1.0], [0.0]), [1.0, 2.0], 1, None)


def test_random_quadratic_is_symmetric_psd():
    p = pb.QuadraticProblem.random(3, 8, cond=100.0)
    assert np.array_equal(p.A, p.A.T)
    assert np.linalg.eigvalsh(p.A).min() > 0


# -- logistic ----------------------------------------------------------------

def _logistic(seed=0, n=60, d=5, reg=0.0, separation=2.0):
    return pb.LogisticProblem(pb.generate_two_class(seed, n, d, separation), reg)


def test_logistic_zero_weights_loss_is_ln2():
    p = _logistic()
    assert p.full_loss(np.zeros(p.dim)) == pytest.approx(math.log(2), rel=1e-15)


def test_logistic_single_sample_example():
    p = pb.LogisticProblem(pb.Dataset(np.array([[1.0]]), np.array([1])))
    _, g = pb.logistic_grad(p, [0.0], [0])
    assert g.tolist() == [-0.5]


def test_logistic_empty_batch():
    p = _logistic()
    with pytest.raises(InvalidInputError):
        pb.logistic_grad(p, np.zeros(p.dim), [])


def test_logistic_labels_must_be_binary():
    with pytest.raises(InvalidInputError):
        pb.LogisticProblem(pb.Dataset(np.zeros((2, 1)), np.array([0, 2])))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1]))
def test_logistic_gradient_matches_finite_differences(seed, reg):
    p = _logistic(seed, reg=reg)
    x = np.random.default_rng(seed).standard_normal(p.dim)
    fd = pb.finite_diff_grad(p.full_loss, x)
    assert _rel_err(p.full_grad(x), fd) < 1e-6


def test_logistic_minibatch_unbiased():
    p = _logistic(n=40, d=3)
    x = np.array([0.5, -0.3, 1.0])
    shard = pb.shard_data(len(p.data), 1)[0]
    rng = np.random.default_rng(0)
    draws = 10_000
    grads = np.array([p.loss_grad(x, p.sample_batch(rng, 4, shard))[1] for _ in range(draws)])
    se = grads.std(axis=0, ddof=1) / math.sqrt(draws)
    assert np.all(np.abs(grads.mean(axis=0) - p.full_grad(x)) <= 4 * se)


def test_logistic_sigmoid_saturates_without_overflow():
    p = pb.LogisticProblem(pb.Dataset(np.array([[1.0], [1.0]]), np.array([0, 1])))
    loss, g = pb.logistic_grad(p, [800.0], None)
    assert math.isfinite(loss) and np.all(np.isfinite(g))


# -- MLP ---------------------------------------------------------------------

def _mlp(seed=0, n=30, d=4, hidden=6, classes=3):
    return pb.MlpProblem(pb.generate_blobs(seed, n, d, classes), hidden, classes)


def test_mlp_zero_parameters_uniform_loss():
    p = _mlp()
    assert p.full_loss(np.zeros(p.dim)) == pytest.approx(math.log(3), rel=1e-14)


def test_mlp_layout_round_trip():
    p = _mlp()
    x = np.arange(p.dim, dtype=float)
    assert np.array_equal(pb.MlpProblem.flatten(*p.unflatten(x)), x)
    with pytest.raises(InvalidInputError):
        p.unflatten(np.zeros(p.dim + 1))


@settings(max_examples=10)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(2, 4))
def test_mlp_gradient_matches_finite_differences(seed, hidden, classes):
    p = _mlp(seed, hidden=hidden, classes=classes)
    assert p.dim <= 200
    x = p.init_params(np.random.default_rng(seed), scale=1.0)
    fd = pb.finite_diff_grad(p.full_loss, x)
    assert _rel_err(p.full_grad(x), fd) < 1e-5


def test_mlp_hidden_permutation_symmetry():
    p = _mlp()
    rng = np.random.default_rng(4)
    w1, b1, w2, b2 = p.unflatten(p.init_params(rng, scale=1.0))
    perm = rng.permutation(p.hidden)
    permuted = pb.MlpProblem.flatten(w1[perm], b1[perm], w2[:, perm], b2)
    original = pb.MlpProblem.flatten(w1, b1, w2, b2)
    assert p.full_loss(permuted) == pytest.approx(p.full_loss(original), rel=1e-14)


def test_mlp_loss_nonnegative():
    p = _mlp()
    assert p.full_loss(p.init_params(np.random.default_rng(0), scale=3.0)) >= 0


# -- finite differences ------------------------------------------------------

def test_finite_diff_examples():
    assert pb.finite_diff_grad(lambda v: float(v[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-8)
    assert pb.finite_diff_grad(lambda v: 7.0, np.ones(3)).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(InvalidParameterError):
        pb.finite_diff_grad(lambda v: 0.0, [1.0], h=0.0)


def test_finite_diff_agrees_with_quadratic():
    p = pb.QuadraticProblem.random(5, 6)
    x = np.random.default_rng(5).standard_normal(6)
    assert _rel_err(pb.finite_diff_grad(p.full_loss, x), p.full_grad(x)) < 1e-7


# -- synthetic data ----------------------------------------------------------

def test_two_class_is_deterministic_and_balanced():
    a = pb.generate_two_class(7, 101, 3, 2.0)
    assert a == pb.generate_two_class(7, 101, 3, 2.0)
    assert a != pb.generate_two_class(8, 101, 3, 2.0)
    assert int(a.labels.sum()) == 51


def test_two_class_zero_separation_is_chance():
    data = pb.generate_two_class(0, 4000, 2, 0.0)
    p = pb.LogisticProblem(data)
    acc = p.accuracy(pb.two_class_direction(0, 2))
    assert abs(acc - 0.5) <= 3 * 0.5 / math.sqrt(4000)


def test_two_class_separable_at_large_separation():
    data = pb.generate_two_class(11, 1000, 2, 10.0)
    proj = data.features @ pb.two_class_direction(11, 2)
    assert proj[data.labels == 0].max() < proj[data.labels == 1].min()


def test_two_class_rejects_empty():
    with pytest.raises(InvalidParameterError):
        pb.generate_two_class(0, 0, 2, 1.0)


# -- sharding ----------------------------------------------------------------

def test_shards_default_cover_everything():
    shards = pb.shard_data(10, 3)
    assert all(s.indices.tolist() == list(range(10)) for s in shards)


def test_disjoint_shards_partition():
    shards = pb.shard_data(10, 3, seed=1, disjoint=True)
    joined = np.concatenate([s.indices for s in shards])
    assert sorted(joined.tolist()) == list(range(10))
    assert sorted(s.indices.size for s in shards) == [3, 3, 4]
    with pytest.raises(InvalidInputError):
        pb.shard_data(2, 3, disjoint=True)
    with pytest.raises(InvalidParameterError):
        pb.shard_data(2, 0)


def test_shard_draws_stay_inside():
    shard = pb.shard_data(20, 4, disjoint=True)[2]
    batch = shard.draw(np.random.default_rng(0), 50)
    assert set(batch.tolist()) <= set(shard.indices.tolist())


# -- CSV ---------------------------------------------------------------------

def test_csv_well_formed(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,b,label\n1,2,0\n3,4,1\n5.5,-6,1\n")
    data = pb.load_csv_dataset(f)
    assert len(data) == 3
    assert data.features.tolist() == [[1, 2], [3, 4], [5.5, -6]]
    assert data.labels.tolist() == [0, 1, 1]


def test_csv_non_numeric_cell_location(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("a,b,c,label\n1,2,abc,0\n")
    with pytest.raises(DatasetFormatError) as err:
        pb.load_csv_dataset(f)
    assert (err.value.row, err.value.column) == (2, 3)
    assert "row 2" in str(err.value) and "column 3" in str(err.value)


@pytest.mark.parametrize(
    "body,row", [("a,label\n1,0\n1,2,3\n", 3), ("a,label\n1,0\n1,2\n", 3), ("a,label\n", 2)]
)
def test_csv_malformed(tmp_path, body, row):
    f = tmp_path / "d.csv"
    f.write_text(body)
    with pytest.raises(DatasetFormatError) as err:
        pb.load_csv_dataset(f)
    assert err.value.row == row


def test_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        pb.load_csv_dataset(tmp_path / "nope.csv")


def test_csv_schema_columns(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("y,a,b\n1,2,3\n0,4,5\n")
    data = pb.load_csv_dataset(f, pb.CsvSchema(feature_columns=("b",), label_column="y"))
    assert data.features.tolist() == [[3], [5]] and data.labels.tolist() == [1, 0]


def test_csv_round_trip(tmp_path):
    data = pb.generate_two_class(3, 50, 4, 1.5)
    f = tmp_path / "d.csv"
    pb.save_csv_dataset(f, data)
    assert pb.load_csv_dataset(f) == data
