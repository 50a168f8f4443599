import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.metrics import accuracy_score, f1_score

from coupled_ssm.config import CoupledModelConfig, OptimConfig, SyntheticTaskSpec
from coupled_ssm.tasks import (
    SpecError,
    classification_metrics,
    compare_fusions,
    compute_metrics,
    evaluate,
    generate_dataset,
    load_dataset,
    save_dataset,
    to_classes,
    train,
)

seeds = st.integers(0, 2**32 - 1)


def tiny_spec(**kw):
    base = dict(n_train=40, n_val=16, n_test=16, seq_len=8)
    base.update(kw)
    return SyntheticTaskSpec(**base)


def tiny_model(**kw):
    base = dict(d_model=4, d_state=2, dt_rank_divisor=1, n_layers=1)
    base.update(kw)
    return CoupledModelConfig(**base)


def _pooled(split, m):
    x, mk = split.batch.xs[m], split.batch.masks[m]
    return (x * mk[..., None]).sum(axis=1) / mk.sum(axis=1, keepdims=True)


@pytest.mark.parametrize(
    "kw",
    [
        dict(rho=1.0, latent_dim=2),
        dict(rho=1.5),
        dict(rho=-0.1),
        dict(rho=0.2, latent_dim=5),
        dict(n_modalities=1, raw_dims=(3,), noise=(0.1,), rho=0.5),
        dict(raw_dims=(3, 3)),
        dict(latent_dim=0),
    ],
)
def test_degenerate_specs(kw):
    with pytest.raises(SpecError):
        generate_dataset(tiny_spec(**kw))


@given(seeds, st.booleans())
@settings(max_examples=10, deadline=None)
def test_same_seed_bitwise(seed, unaligned):
    spec = tiny_spec(seed=seed, unaligned=unaligned)
    a, b = generate_dataset(spec), generate_dataset(spec)
    for name in ("train", "val", "test"):
        sa, sb = a.split(name), b.split(name)
        assert sa.labels.tobytes() == sb.labels.tobytes()
        for x, y in zip(sa.batch.xs + sa.batch.masks, sb.batch.xs + sb.batch.masks):
            assert x.tobytes() == y.tobytes()


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_splits_disjoint_and_sized(seed):
    ds = generate_dataset(tiny_spec(seed=seed))
    assert (len(ds.train), len(ds.val), len(ds.test)) == (40, 16, 16)
    rows = {name: {x.tobytes() for x in ds.split(name).batch.xs[0]} for name in ("train", "val", "test")}
    assert not rows["train"] & rows["val"] and not rows["train"] & rows["test"] and not rows["val"] & rows["test"]


def test_labels_clipped():
    ds = generate_dataset(tiny_spec(n_train=500))
    assert np.all(np.abs(ds.train.labels) <= 3.0)
    assert 0.6 < ds.train.labels.std() < 1.4


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_unaligned_lengths(seed):
    spec = tiny_spec(seed=seed, unaligned=True, seq_len=10, min_len_frac=0.5)
    ds = generate_dataset(spec)
    for mk in ds.train.batch.masks:
        lengths = mk.sum(axis=1)
        assert lengths.min() >= 5 and lengths.max() <= 10
        # valid steps form a prefix
        assert np.all(np.diff(mk, axis=1) <= 0)


def test_rho0_noiseless_linear_ceiling():
    spec = SyntheticTaskSpec(rho=0.0, noise=(0.0, 0.0, 0.0), n_train=500, n_val=10, n_test=300)
    ds = generate_dataset(spec)
    X = np.c_[_pooled(ds.train, 0), np.ones(len(ds.train))]
    coef, *_ = np.linalg.lstsq(X, ds.train.labels, rcond=None)
    pred = np.c_[_pooled(ds.test, 0), np.ones(len(ds.test))] @ coef
    assert compute_metrics(pred, ds.test.labels).corr >= 0.99


def _quadratic_features(z):
    iu = np.triu_indices(z.shape[1])
    return np.c_[np.ones(len(z)), z, (z[:, :, None] * z[:, None, :])[:, iu[0], iu[1]]]


def test_rho1_single_modality_near_chance():
    # best quadratic model on one modality stays near chance over 5 seeds
    accs = []
    for seed in range(5):
        ds = generate_dataset(SyntheticTaskSpec(rho=1.0, seed=seed, n_train=1500, n_val=10, n_test=400))
        for m in range(3):
            Xtr, Xte = _quadratic_features(_pooled(ds.train, m)), _quadratic_features(_pooled(ds.test, m))
            coef, *_ = np.linalg.lstsq(Xtr, ds.train.labels, rcond=None)
            accs.append(compute_metrics(Xte @ coef, ds.test.labels).acc2)
    assert max(accs) <= 0.6
    # while all modalities together determine the label through products
    ds = generate_dataset(SyntheticTaskSpec(rho=1.0, noise=(0.0,) * 3, n_train=1500, n_val=10, n_test=400))
    Xtr = _quadratic_features(np.concatenate([_pooled(ds.train, m) for m in range(3)], axis=1))
    Xte = _quadratic_features(np.concatenate([_pooled(ds.test, m) for m in range(3)], axis=1))
    coef, *_ = np.linalg.lstsq(Xtr, ds.train.labels, rcond=None)
    assert compute_metrics(Xte @ coef, ds.test.labels).acc2 >= 0.85


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(tiny_spec(unaligned=True))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.spec == ds.spec
    for name in ("train", "val", "test"):
        a, b = ds.split(name), back.split(name)
        assert a.labels.tobytes() == b.labels.tobytes()
        for x, y in zip(a.batch.xs + a.batch.masks, b.batch.xs + b.batch.masks):
            assert x.tobytes() == y.tobytes()


# metrics -------------------------------------------------------------------


def test_metric_examples():
    y = np.array([-2.0, -0.2, 0.3, 1.5, 2.8])
    r = compute_metrics(y, y)
    assert (r.mae, r.corr, r.acc2, r.f1, r.acc3, r.f13) == (0.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert compute_metrics(-y, y).corr == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([1.0], [1.0, 2.0])


def test_class_buckets():
    s = np.array([-3.0, -0.51, -0.5, 0.0, 0.5, 0.51, 3.0])
    assert to_classes(s, 3).tolist() == [0, 0, 1, 1, 1, 2, 2]
    assert to_classes(s, 2).tolist() == [0, 0, 0, 1, 1, 1, 1]


@given(seeds, st.integers(2, 60))
@settings(max_examples=50, deadline=None)
def test_metrics_match_oracles(seed, n):
    rng = np.random.default_rng(seed)
    labels = np.clip(rng.normal(size=n), -3, 3)
    preds = labels + rng.normal(scale=rng.uniform(0.1, 2), size=n)
    r = compute_metrics(preds, labels)
    assert abs(r.mae - np.mean([abs(p - t) for p, t in zip(preds, labels)])) <= 1e-9
    assert abs(r.corr - stats.pearsonr(preds, labels)[0]) <= 1e-9
    p2, t2 = to_classes(preds, 2), to_classes(labels, 2)
    p3, t3 = to_classes(preds, 3), to_classes(labels, 3)
    assert abs(r.acc2 - accuracy_score(t2, p2)) <= 1e-9
    assert abs(r.f1 - f1_score(t2, p2, average="weighted", zero_division=0)) <= 1e-9
    assert abs(r.acc3 - accuracy_score(t3, p3)) <= 1e-9
    assert abs(r.f13 - f1_score(t3, p3, average="weighted", zero_division=0)) <= 1e-9
    assert 0 <= r.acc2 <= 1 and -1 <= r.corr <= 1


def test_classification_metrics():
    labels = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    logits = np.eye(3)[to_classes(labels, 3)]
    r = classification_metrics(logits, labels)
    assert math.isnan(r.mae) and math.isnan(r.corr)
    assert r.acc2 == 1.0 and r.acc3 == 1.0 and r.f13 == 1.0
    with pytest.raises(ValueError):
        classification_metrics(np.zeros((0, 3)), np.zeros(0))


# training -----------------------------------------------------------------


def test_training_is_deterministic():
    ds = generate_dataset(tiny_spec())
    optim = OptimConfig(epochs=2, batch_size=16, lr=1e-2)
    a = train(tiny_model(), ds, optim, seed=3)
    b = train(tiny_model(), ds, optim, seed=3)
    assert a.rows == b.rows
    for k in a.store.params:
        assert a.store[k].tobytes() == b.store[k].tobytes()
    assert len(a.rows) == 2 and a.rows[-1][:3] == ["3", "coupled", "2"]


def test_final_row_matches_evaluate():
    ds = generate_dataset(tiny_spec())
    res = train(tiny_model(), ds, OptimConfig(epochs=2, batch_size=16, lr=1e-2), seed=0)
    assert [repr(v) for v in evaluate(res.store.params, tiny_model(), ds.val).as_row()] == res.rows[-1][3:]


def test_training_reduces_loss():
    ds = generate_dataset(tiny_spec(n_train=200, rho=0.0))
    res = train(tiny_model(d_model=8), ds, OptimConfig(epochs=15, batch_size=20, lr=2e-2), seed=0)
    first, last = float(res.rows[0][3]), float(res.rows[-1][3])
    assert last < first


def test_classification_training_and_early_stop():
    ds = generate_dataset(tiny_spec(task="classification"))
    cfg = tiny_model(head="classification")
    res = train(cfg, ds, OptimConfig(epochs=6, batch_size=16, lr=1e-2, early_stop_patience=1), seed=0)
    assert 1 <= len(res.rows) <= 6
    assert 0.0 <= res.test.acc3 <= 1.0


def test_train_rejects_mismatched_data():
    ds = generate_dataset(tiny_spec())
    with pytest.raises(ValueError):
        train(tiny_model(raw_dims=(1, 2, 3)), ds, OptimConfig(epochs=1))


def test_untrained_model_chance_level():
    ds = generate_dataset(SyntheticTaskSpec(n_train=10, n_val=10, n_test=400, seq_len=8))
    accs = [evaluate(train(tiny_model(), ds, OptimConfig(epochs=0), seed=s).store.params, tiny_model(), ds.test).acc2 for s in range(5)]
    assert 0.35 <= np.mean(accs) <= 0.65


def test_compare_fusions_matches_direct_training():
    optim = OptimConfig(epochs=1, batch_size=16, lr=1e-2)
    res = compare_fusions(tiny_model(), tiny_spec(), optim, ("coupled", "average"), [0, 1])
    assert [len(v) for v in res.values()] == [2, 2]
    ds = generate_dataset(tiny_spec(seed=1))
    direct = train(tiny_model(fusion="average"), ds, optim, seed=1).test
    assert res["average"][1] == direct
