import math

import numpy as np
import pytest

from helpers import dataset, model_for
from recchains.autodiff import leaf_grads
from recchains.data import generate_synthetic
from recchains.engine import Controls, RecEngine, RecModel
from recchains.store import build_store, prototype_block, select_prototypes
from recchains.training import (
    PMFModel,
    TrainConfig,
    TrainingError,
    build_rec,
    evaluate_rmse,
    load_checkpoint,
    loss,
    pretrain_prototype_block,
    rmse,
    save_checkpoint,
    train,
    train_pmf,
)

TINY = dict(k=3, hidden=8, num_proto_users=4, num_proto_items=4, batch_size=20, el=8, md=2, eval_every=0)


def fd_check(f, arr, coords, h=1e-5):
    flat = arr.reshape(-1)
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def test_all_prototype_loss_is_plain_squared_error():
    ds = generate_synthetic(6, 5, 2, 0.8, 0.1, seed=0)
    store = build_store(ds)
    model = model_for(store, np.arange(6), np.arange(5))
    eng = RecEngine(model, store)
    terms = loss(eng, ds.users, ds.items, ds.ratings, 0.0, eng.new_context(0))
    expect = np.sum((ds.ratings - np.sum(model.user_protos[ds.users] * model.item_protos[ds.items], axis=1)) ** 2)
    assert terms.value == pytest.approx(expect, rel=1e-12)
    assert terms.reg_protos == 0.0 and terms.reg_nets == 0.0 and terms.fallbacks == 0


def test_zero_parameters_zero_regularizers():
    ds = generate_synthetic(6, 5, 2, 0.8, 0.1, seed=0)
    store = build_store(ds)
    model = model_for(store, [0], [0])
    for p in model.named_params().values():
        p[...] = 0.0
    eng = RecEngine(model, store)
    terms = loss(eng, ds.users, ds.items, ds.ratings, 3.7, eng.new_context(0))
    assert terms.reg_protos == 0.0 and terms.reg_nets == 0.0
    assert terms.value == pytest.approx(terms.squared_error)


def test_single_rating_loss():
    store = build_store(dataset([0], [0], [4.0], 1, 1))
    model = model_for(store, [0], [0], k=1)
    model.user_protos[:] = 1.5
    model.item_protos[:] = 2.0
    eng = RecEngine(model, store)
    assert loss(eng, [0], [0], [4.0], 0.0, eng.new_context(0)).value == 1.0


def test_fallbacks_are_constant():
    ds = generate_synthetic(8, 8, 2, 0.6, 0.1, seed=1)
    store = build_store(ds)
    model = model_for(store, [0], [0], Controls(max_depth=0))
    eng = RecEngine(model, store)
    users, items, r = ds.users[ds.users > 0], ds.items[ds.users > 0], ds.ratings[ds.users > 0]
    ctx = eng.new_context(0)
    terms = loss(eng, users, items, r, 0.0, ctx)
    assert terms.fallbacks == len(r)
    assert terms.value == pytest.approx(np.sum((r - store.mean_rating) ** 2))
    assert all(not g.any() for g in leaf_grads(terms.total).values())


@pytest.mark.parametrize("encoding", ["normalized", "raw"])
@pytest.mark.parametrize("md", [1, 2])
def test_loss_gradient_matches_fd(md, encoding):
    ds = generate_synthetic(20, 20, 2, 0.25, 0.1, seed=md, rating_scale=(-5, 5))
    store = build_store(ds)
    protos = select_prototypes(store, 4, 4)
    model = RecModel.initialize(store, protos, k=3, seed=1, hidden=8, rating_encoding=encoding,
                                controls=Controls(max_depth=md, evidence_limit=5))
    eng = RecEngine(model, store)
    rng = np.random.default_rng(md)
    idx = rng.integers(0, len(ds), 5)
    batch = (ds.users[idx], ds.items[idx], ds.ratings[idx])

    def value():
        return loss(eng, *batch, 1e-2, eng.new_context(7, requires_grad=False)).value

    grads = leaf_grads(loss(eng, *batch, 1e-2, eng.new_context(7)).total)
    for name, arr in model.named_params().items():
        coords = rng.choice(arr.size, min(arr.size, 25), replace=False)
        fd = fd_check(value, arr, coords)
        g = grads[name].reshape(-1)[coords]
        assert np.max(np.abs(g - fd)) <= 1e-3 * max(np.max(np.abs(fd)), 1e-6), name


def test_pretraining_fits_rank_one_block():
    ds = generate_synthetic(10, 10, 1, 1.0, 0.0, seed=2)
    store = build_store(ds)
    config = TrainConfig(k=2, num_proto_users=10, num_proto_items=10, pretrain_iterations=1500,
                         batch_size=50, lr=1e-2, lam=0.0, hidden=4)
    model = build_rec(store, select_prototypes(store, 10, 10), config, pretrain=True)
    block = prototype_block(store, model.protos).data
    pred = np.sum(model.user_protos[block.users] * model.item_protos[block.items], axis=1)
    assert rmse(block.ratings, pred) < 0.05


def test_pretraining_zero_iterations_and_determinism():
    ds = generate_synthetic(20, 20, 2, 0.5, 0.1, seed=3)
    store = build_store(ds)
    protos = select_prototypes(store, 5, 5)
    cfg = TrainConfig(**TINY, pretrain_iterations=0)
    a = build_rec(store, protos, cfg)
    b = RecModel.initialize(store, protos, k=3, hidden=8)
    assert all(np.array_equal(a.named_params()[k], v) for k, v in b.named_params().items())
    cfg = cfg.replace(pretrain_iterations=30)
    c, d = build_rec(store, protos, cfg), build_rec(store, protos, cfg)
    assert np.array_equal(c.user_protos, d.user_protos) and not np.array_equal(c.user_protos, a.user_protos)
    assert all(np.array_equal(c.phi.weights[n], a.phi.weights[n]) for n in range(3))


def test_empty_block_pretraining_warns():
    store = build_store(dataset([0, 1, 2, 2], [0, 0, 1, 2], [1, 2, 3, 4], 3, 3))
    model = model_for(store, [2], [0])
    before = model.user_protos.copy()
    with pytest.warns(RuntimeWarning):
        assert pretrain_prototype_block(model, store, TrainConfig(**TINY)) == []
    assert np.array_equal(model.user_protos, before)


def _setup(seed=0, **overrides):
    ds = generate_synthetic(20, 20, 2, 0.3, 0.1, seed=seed)
    store = build_store(ds)
    cfg = TrainConfig(**{**TINY, "iterations": 5, "pretrain_iterations": 5, **overrides})
    protos = select_prototypes(store, cfg.num_proto_users, cfg.num_proto_items)
    return ds, store, cfg, protos


def test_zero_learning_rate_changes_nothing():
    ds, store, cfg, protos = _setup(lr=0.0)
    model = build_rec(store, protos, cfg)
    before = {k: v.copy() for k, v in model.named_params().items()}
    train(model, store, ds, cfg)
    assert all(np.array_equal(before[k], v) for k, v in model.named_params().items())


def test_training_is_deterministic():
    ds, store, cfg, protos = _setup(eval_every=2)
    runs = []
    for _ in range(2):
        model = build_rec(store, protos, cfg)
        hist = train(model, store, ds, cfg, valid=ds).history
        runs.append([(r.iteration, r.train_rmse, r.valid_rmse, r.embeddings_generated, r.cache_hits,
                      r.failed_requests, r.loss) for r in hist])
    assert runs[0] == runs[1]
    assert [r[0] for r in runs[0]] == [1, 2, 3, 4, 5]
    assert [r[2] is not None for r in runs[0]] == [False, True, False, True, True]


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_names_iteration():
    ds, store, cfg, protos = _setup()
    model = build_rec(store, protos, cfg)
    model.user_protos[:] = 1e200
    with pytest.raises(TrainingError, match="iteration 1"):
        train(model, store, ds, cfg)


def _full_loss(store, ds, model):
    eng = RecEngine(model, store)
    return loss(eng, ds.users, ds.items, ds.ratings, 0.0, eng.new_context(0, requires_grad=False)).value


def test_loss_decreases_early():
    wins = 0
    for seed in range(10):
        ds, store, cfg, protos = _setup(seed, iterations=10, lr=1e-2, pretrain_iterations=0, init_seed=seed, sampling_seed=seed)
        model = build_rec(store, protos, cfg)
        before = _full_loss(store, ds, model)
        train(model, store, ds, cfg)
        wins += _full_loss(store, ds, model) < before
    assert wins >= 9


def test_regularization_shrinks_prototypes():
    norms = {}
    for lam in (1e-5, 1.0):
        vals = []
        for seed in range(3):
            ds, store, cfg, protos = _setup(seed, iterations=150, lr=1e-2, lam=lam, init_seed=seed, sampling_seed=seed)
            model = build_rec(store, protos, cfg)
            train(model, store, ds, cfg)
            vals.append(np.sum(model.user_protos**2) + np.sum(model.item_protos**2))
        norms[lam] = np.mean(vals)
    assert norms[1.0] <= norms[1e-5]


def test_pmf_fits_rank_two():
    ds = generate_synthetic(30, 30, 2, 1.0, 0.0, seed=4)
    full = np.zeros((30, 30))
    full[ds.users, ds.items] = ds.ratings
    # oracle: the fully observed matrix has an exact rank-2 factorization
    uu, s, vt = np.linalg.svd(full)
    assert np.abs(full - (uu[:, :2] * s[:2]) @ vt[:2]).max() < 1e-10
    store = build_store(ds)
    cfg = TrainConfig(k=2, batch_size=100, lr=1e-2, lam=0.0, iterations=3000, pretrain_iterations=0, eval_every=0)
    model, _ = train_pmf(store, ds, cfg)
    assert rmse(ds.ratings, model.predict(ds.users, ds.items)) < 0.05


def test_degenerate_rec_matches_pmf():
    ds = generate_synthetic(15, 12, 2, 0.5, 0.2, seed=6)
    store = build_store(ds)
    cfg = TrainConfig(k=4, hidden=6, num_proto_users=15, num_proto_items=12, batch_size=16,
                      lr=1e-2, lam=1e-3, iterations=40, pretrain_iterations=20, eval_every=0)
    protos = select_prototypes(store, 15, 12)
    rec = build_rec(store, protos, cfg)
    rec_hist = train(rec, store, ds, cfg).history
    pmf, pmf_res = train_pmf(store, ds, cfg, protos=protos)
    for a, b in zip(rec_hist, pmf_res.history):
        assert abs((a.squared_error + a.reg_protos) - (b.squared_error + b.reg_protos)) < 1e-10
    np.testing.assert_allclose(rec.user_protos, pmf.u, rtol=0, atol=1e-12)


def test_evaluate_rmse_examples():
    ds = generate_synthetic(5, 5, 1, 1.0, 0.0, seed=0)
    full = np.zeros((5, 5))
    full[ds.users, ds.items] = ds.ratings
    uu, s, vt = np.linalg.svd(full)
    exact = PMFModel(uu[:, :1] * s[:1], vt[:1].T, 0.0, ds.rating_scale)
    assert evaluate_rmse(exact, ds) < 1e-12
    one = dataset([0], [0], [5.0], 1, 1)
    assert evaluate_rmse(PMFModel(np.array([[3.0]]), np.array([[1.0]]), 3.0, (1, 5)), one) == 2.0
    with pytest.raises(ValueError):
        evaluate_rmse(exact, ds.subset(np.array([], dtype=np.int64)))


def test_evaluation_clamps_to_scale():
    one = dataset([0], [0], [5.0], 1, 1)
    wild = PMFModel(np.array([[9.0]]), np.array([[1.0]]), 3.0, (1, 5))
    assert evaluate_rmse(wild, one) == 0.0
    assert evaluate_rmse(wild, one, clamp=False) == 4.0


def test_evaluation_is_reproducible():
    ds, store, cfg, protos = _setup(md=3, el=3)
    model = build_rec(store, protos, cfg)
    eng = RecEngine(model, store)
    assert evaluate_rmse(eng, ds, seed=5) == evaluate_rmse(eng, ds, seed=5)
    assert math.isfinite(evaluate_rmse(eng, ds, seed=5, chunk=7))


def test_checkpoint_round_trip(tmp_path):
    ds, store, cfg, protos = _setup(rating_encoding="normalized")
    model = build_rec(store, protos, cfg)
    res = train(model, store, ds, cfg)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, res.adam, extra={"iteration": 5})
    back, adam, extra = load_checkpoint(path)
    assert extra == {"iteration": 5} and adam.t == res.adam.t
    for k, v in model.named_params().items():
        assert np.array_equal(back.named_params()[k], v)
        assert np.array_equal(adam.m[k], res.adam.m[k])
    assert back.controls == model.controls and back.rating_encoding == "normalized"
    a = RecEngine(model, store).predict_values(ds.users, ds.items, RecEngine(model, store).new_context(1, False))
    e = RecEngine(back, store)
    assert np.array_equal(a, e.predict_values(ds.users, ds.items, e.new_context(1, False)))
