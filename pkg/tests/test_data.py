import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccm.data import DatasetSpec, generate, load_dataset, prototypes, save_dataset, split_train_val
from ccm.errors import ConfigError, FormatError

SMALL = DatasetSpec(samples_per_domain=300, seed=3)

# upper 0.1% point of chi-square with 4 degrees of freedom
CHI2_4DOF_999 = 18.467


def test_same_seed_same_arrays():
    a, b = generate(SMALL), generate(SMALL)
    for d in a:
        assert a[d].X.tobytes() == b[d].X.tobytes()
        assert a[d].y.tobytes() == b[d].y.tobytes()


def test_different_seed_differs():
    a = generate(SMALL)
    b = generate(dataclasses.replace(SMALL, seed=4))
    assert not np.array_equal(a[0].X, b[0].X)


def test_shapes_and_finiteness():
    data = generate(SMALL)
    assert sorted(data) == [0, 1, 2, 3]
    for dd in data.values():
        assert dd.X.shape == (300, 20) and dd.y.shape == (300,)
        assert np.all(np.isfinite(dd.X))
        assert dd.y.min() >= 0 and dd.y.max() < 5


def test_full_agreement():
    spec = DatasetSpec(spurious_agreement=(1.0, 1.0, 1.0, 1.0), samples_per_domain=500)
    for dd in generate(spec).values():
        assert np.mean(dd.spurious_class == dd.y) == 1.0


def test_agreement_rate_close_to_target():
    spec = DatasetSpec(spurious_agreement=(0.8, 0.5, 0.2, 0.0), samples_per_domain=10000)
    data = generate(spec)
    for d, p in enumerate(spec.spurious_agreement):
        rate = np.mean(data[d].spurious_class == data[d].y)
        assert p - 0.02 <= rate <= p + 0.02


def test_disagreeing_spurious_classes_are_uniform_over_others():
    spec = DatasetSpec(spurious_agreement=(0.0, 0.0, 0.0, 0.0), samples_per_domain=10000)
    dd = generate(spec)[0]
    shift = (dd.spurious_class - dd.y) % 5
    assert shift.min() >= 1
    counts = np.bincount(shift, minlength=5)[1:]
    expected = len(shift) / 4
    assert ((counts - expected) ** 2 / expected).sum() < 16.27  # 3 dof, 0.1%


def test_labels_uniform_chi_square():
    dd = generate(DatasetSpec(samples_per_domain=10000))[0]
    counts = np.bincount(dd.y, minlength=5)
    expected = len(dd.y) / 5
    assert ((counts - expected) ** 2 / expected).sum() < CHI2_4DOF_999


def test_spurious_block_encodes_spurious_class():
    spec = DatasetSpec(samples_per_domain=500, noise_std=0.1)
    rng = np.random.default_rng(spec.seed)
    prototypes(rng, spec.num_classes, spec.core_dim)
    nu = prototypes(rng, spec.num_classes, spec.spurious_dim)
    for dd in generate(spec).values():
        nearest = np.argmax(dd.X[:, spec.core_dim:] @ nu.T, axis=1)
        assert np.array_equal(nearest, dd.spurious_class)


def test_prototypes_orthonormal():
    p = prototypes(np.random.default_rng(0), 5, 10)
    np.testing.assert_allclose(p @ p.T, np.eye(5), atol=1e-12)


@pytest.mark.parametrize("noise", [0.1, 0.3])
def test_core_block_is_linearly_predictive(noise):
    spec = DatasetSpec(samples_per_domain=1000, noise_std=noise)
    data = generate(spec)
    Xtr = np.hstack([data[0].X[:, : spec.core_dim], np.ones((1000, 1))])
    W, *_ = np.linalg.lstsq(Xtr, np.eye(5)[data[0].y], rcond=None)
    for d in (1, 2, 3):
        Xte = np.hstack([data[d].X[:, : spec.core_dim], np.ones((1000, 1))])
        assert np.mean(np.argmax(Xte @ W, axis=1) == data[d].y) >= 0.95


def test_held_out_domain_inverts_spurious_cue():
    spec = DatasetSpec(samples_per_domain=1000)
    data = generate(spec)
    Xtr = np.vstack([data[d].X[:, spec.core_dim:] for d in spec.source_domains])
    ytr = np.concatenate([data[d].y for d in spec.source_domains])
    Xtr = np.hstack([Xtr, np.ones((len(ytr), 1))])
    W, *_ = np.linalg.lstsq(Xtr, np.eye(5)[ytr], rcond=None)
    Xte = np.hstack([data[3].X[:, spec.core_dim:], np.ones((1000, 1))])
    # a spurious-only model drops to roughly the agreement rate
    assert np.mean(np.argmax(Xte @ W, axis=1) == data[3].y) < 0.2


def test_split_sizes_and_held_out_excluded():
    data = generate(SMALL)
    train, val = split_train_val(data, 0.2, seed=0)
    assert sorted(train) == sorted(val) == [0, 1, 2]
    for d in train:
        assert len(train[d]) == 240 and len(val[d]) == 60


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 200), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partitions_and_stratifies(n, frac, seed):
    spec = DatasetSpec(samples_per_domain=n, seed=seed, num_domains=2, spurious_agreement=(0.9, 0.1))
    data = generate(spec)
    train, val = split_train_val(data, frac, seed)
    dd, tr, va = data[0], train[0], val[0]
    assert len(va) == int(round(n * frac))
    rows = {r.tobytes() for r in dd.X}
    tr_rows, va_rows = {r.tobytes() for r in tr.X}, {r.tobytes() for r in va.X}
    assert not tr_rows & va_rows and tr_rows | va_rows == rows
    for c in range(5):
        assert abs(np.sum(va.y == c) - np.sum(dd.y == c) * frac) <= 1 + 1e-9


def test_split_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        split_train_val(generate(SMALL), 1.0, 0)


def test_split_is_deterministic():
    data = generate(SMALL)
    a, b = split_train_val(data, 0.2, 5), split_train_val(data, 0.2, 5)
    assert np.array_equal(a[1][1].y, b[1][1].y) and np.array_equal(a[0][2].X, b[0][2].X)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_classes": 1},
        {"samples_per_domain": 0},
        {"noise_std": -0.1},
        {"spurious_agreement": (0.9, 0.9, 0.9)},
        {"spurious_agreement": (0.9, 0.9, 0.9, 1.2)},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        DatasetSpec(**kwargs)


def test_spec_dict_round_trip_and_unknown_key():
    assert DatasetSpec.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ConfigError):
        DatasetSpec.from_dict({**SMALL.to_dict(), "colour": 1})


def test_cache_round_trip(tmp_path):
    data = generate(SMALL)
    path = tmp_path / "d.ccm"
    save_dataset(path, SMALL, data)
    spec, loaded = load_dataset(path, expected=SMALL)
    assert spec == SMALL
    for d in data:
        assert loaded[d].X.tobytes() == data[d].X.tobytes()
        assert np.array_equal(loaded[d].spurious_class, data[d].spurious_class)


def test_cache_spec_mismatch_names_field(tmp_path):
    path = tmp_path / "d.ccm"
    save_dataset(path, SMALL, generate(SMALL))
    with pytest.raises(FormatError, match="noise_std"):
        load_dataset(path, expected=dataclasses.replace(SMALL, noise_std=0.5))


def test_iteration_yields_samples():
    dd = generate(DatasetSpec(samples_per_domain=3))[2]
    samples = list(dd)
    assert len(samples) == 3 and samples[0].domain == 2
    assert samples[1].label == int(dd.y[1])
