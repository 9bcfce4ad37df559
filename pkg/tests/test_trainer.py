import itertools
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eenas import autodiff as ad
from eenas import data
from eenas import model as mdl
from eenas import trainer as trn
from eenas.errors import ContractViolation
from gradcheck import TOL, max_relative_error
from oracles import ece_percent, evaluate_thresholds, exit_of_sample

TRIALS = 50


# ---------------------------------------------------------------- loss values


def test_loss_acc_single_exit_is_cross_entropy(rng):
    f = ad.Tensor(rng.normal(size=(6, 4)))
    y = rng.integers(0, 4, size=6)
    assert trn.loss_acc([f], [ad.Tensor(np.ones(6))], y).item() == ad.cross_entropy(f, y).item()


def test_confidence_regularizer_vanishes_at_target():
    y = np.array([0, 1])
    good = ad.Tensor([[50.0, 0.0], [0.0, 50.0]])
    bad = ad.Tensor([[0.0, 50.0], [0.0, 50.0]])  # first sample wrong
    targets = [trn.correctness(bad, y)]
    conf = ad.Tensor(targets[0].astype(float))
    with_reg = trn.loss_acc([bad, good], [conf, ad.Tensor(np.ones(2))], y, targets=targets)
    without = trn.loss_acc([bad, good], [conf, ad.Tensor(np.ones(2))], y, targets=targets, regularize=False)
    assert with_reg.item() - without.item() == pytest.approx(0.0, abs=1e-9)


def test_loss_joint_examples(rng):
    f = ad.Tensor(rng.normal(size=(5, 3)))
    g = ad.Tensor(rng.normal(size=(5, 3)))
    y = rng.integers(0, 3, size=5)
    ce = ad.cross_entropy(g, y).item()
    assert trn.loss_joint([f, g], y, 0.0).item() == pytest.approx(ce)
    assert trn.loss_joint([g], y, 0.7).item() == pytest.approx(ce)
    assert trn.loss_joint([g, g], y, 1.0).item() == pytest.approx(2 * ce)


@pytest.mark.parametrize(
    "c,gamma,expected",
    [([1.0, 1.0], [2, 6], 2.0), ([0.0, 1.0], [2, 6], 6.0), ([0.6, 0.5, 1.0], [1, 2, 4], 1.8)],
)
def test_expected_cost_examples(c, gamma, expected):
    got = trn.expected_cost([[v] for v in c], gamma).item()
    assert got == pytest.approx(expected, abs=1e-12)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
def test_expected_cost_equals_weighted_sum(c, seed):
    c = c + [1.0]
    gamma = np.sort(np.random.default_rng(seed).uniform(1, 10, size=len(c)))
    cum = trn.cumulative_scores(np.array([c]))[0]
    assert abs(trn.expected_cost([[v] for v in c], gamma).item() - float(cum @ gamma)) <= 1e-12 * gamma[-1]


@pytest.mark.parametrize("cost,expected", [(2.0, 0.0), (5.95, 1.0), (4.0, 0.4)])
def test_loss_cost_examples(cost, expected):
    assert trn.loss_cost(ad.Tensor(cost), 2.7, 5.95).item() == pytest.approx(expected, abs=1e-12)


def test_loss_cost_vacuous_constraint():
    assert trn.loss_cost(ad.Tensor(4.0), 7.0, 5.95).item() == 0.0


@given(st.floats(0.5, 10))
def test_loss_cost_range(cost):
    v = trn.loss_cost(ad.Tensor(min(cost, 5.95)), 2.7, 5.95).item()
    assert 0.0 <= v <= 1.0
    assert (v == 0.0) == (min(cost, 5.95) <= 2.7)


def test_loss_peak_examples():
    assert trn.loss_peak([ad.Tensor([0.3]), ad.Tensor([0.8])], [[0.3, 0.8]]).item() == 0.0
    assert trn.loss_peak([ad.Tensor([1.0]), ad.Tensor([0.0])], [[0.0, 1.0]]).item() == pytest.approx(1.0)


def test_loss_peak_gradient_reaches_confidences_only():
    c = ad.Tensor([0.2, 0.9], requires_grad=True)
    rows = np.array([[0.5], [0.5]])
    with ad.Tape() as tape:
        loss = trn.loss_peak([c], rows)
    tape.backward(loss)
    np.testing.assert_allclose(c.grad, [2 * (0.2 - 0.5) / 2, 2 * (0.9 - 0.5) / 2])
    assert rows.tolist() == [[0.5], [0.5]]


# ---------------------------------------------------------------- loss gradients


def _exit_outputs(r):
    n, B, C = int(r.integers(1, 9)), int(r.integers(2, 5)), int(r.integers(2, 6))
    logits = [r.normal(size=(n, C)) * 2 for _ in range(B)]
    confs = [r.uniform(0.05, 0.95, size=n) for _ in range(B - 1)]
    y = r.integers(0, C, size=n)
    return logits, confs, y


def worst_loss_acc_error(trials=TRIALS):
    r = np.random.default_rng(21)
    worst = 0.0
    for _ in range(trials):
        logits, confs, y = _exit_outputs(r)
        targets = [trn.correctness(f, y) for f in logits[:-1]]
        B = len(logits)
        ones = np.ones(len(y))

        def fn(*ts):
            return trn.loss_acc(list(ts[:B]), list(ts[B:]) + [ad.Tensor(ones)], y, targets=targets)

        worst = max(worst, max_relative_error(fn, logits + confs))
    return worst


def test_loss_acc_gradients():
    assert worst_loss_acc_error() <= TOL


def worst_loss_cost_error(trials=TRIALS):
    r = np.random.default_rng(22)
    worst = 0.0
    for _ in range(trials):
        _, confs, _ = _exit_outputs(r)
        gamma = np.sort(r.uniform(1, 10, size=len(confs) + 1))
        ones = np.ones(confs[0].shape)
        exp = trn.cumulative_scores(np.stack(confs + [ones], axis=1)) @ gamma
        # keep the budget away from the hinge so the loss is smooth there
        budget = float(min(exp.mean() * 0.8, gamma[-1] * 0.9))

        def fn(*ts):
            return trn.loss_cost(trn.expected_cost(list(ts) + [ad.Tensor(ones)], gamma), budget, gamma[-1])

        worst = max(worst, max_relative_error(fn, confs))
    return worst


def test_loss_cost_gradients():
    assert worst_loss_cost_error() <= TOL


def worst_loss_peak_error(trials=TRIALS):
    r = np.random.default_rng(23)
    worst = 0.0
    for _ in range(trials):
        _, confs, _ = _exit_outputs(r)
        rows = r.uniform(size=(len(confs[0]), len(confs)))
        worst = max(worst, max_relative_error(lambda *ts: trn.loss_peak(list(ts), rows), confs))
    return worst


def test_loss_peak_gradients():
    assert worst_loss_peak_error() <= TOL


@pytest.fixture(scope="module")
def tiny_eenn():
    g = mdl.Genome(((1, 3, 16), (1, 3, 16), (1, 3, 16), (2, 3, 16)), (1, 1, 1, 0))
    spec = mdl.build_eenn(g, num_classes=3, input_shape=(3, 6, 6), head_channels=2)
    return spec


def test_composite_loss_gradient_through_network(tiny_eenn):
    """Full loss w.r.t. network weights, checked on random coordinates of every parameter."""
    spec = tiny_eenn
    assert spec.num_exits >= 3
    r = np.random.default_rng(24)
    cfg = trn.TrainConfig(macs_constraint=spec.gamma[0] * 1.01)
    for trial in range(5):
        params = mdl.init_params(spec, r)
        x = r.normal(size=(4, 3, 6, 6))
        y = r.integers(0, 3, size=4)
        support = r.uniform(size=(3, spec.num_exits))
        f, _ = mdl.forward_eenn(spec, params, x)
        targets = [trn.correctness(t, y) for t in f[:-1]]

        def loss_value():
            f, c = mdl.forward_eenn(spec, params, x)
            loss = trn.loss_acc(f, c, y, targets=targets)
            loss = loss + trn.loss_cost(trn.expected_cost(c, spec.gamma), cfg.macs_constraint, spec.gamma[-1])
            return loss + trn.loss_peak(c[:-1], support[y][:, :-1])

        for p in params.values():
            p.grad = None
        with ad.Tape() as tape:
            loss = loss_value()
        tape.backward(loss)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            picks = r.choice(flat.size, size=min(4, flat.size), replace=False)
            analytic = p.grad.reshape(-1)[picks]
            numeric = []
            for j in picks:
                old = flat[j]
                flat[j] = old + 1e-5
                up = loss_value().item()
                flat[j] = old - 1e-5
                down = loss_value().item()
                flat[j] = old
                numeric.append((up - down) / 2e-5)
            scale = max(np.abs(p.grad).max(), 1e-6)
            assert np.abs(analytic - numeric).max() / scale <= TOL, name


# ---------------------------------------------------------------- support matrix


def _constant_params(spec, cls, rng):
    params = mdl.init_params(spec, rng)
    for name, p in params.items():
        if name.endswith(".cls.w"):
            p.data = np.zeros_like(p.data)
        elif name.endswith(".cls.b"):
            p.data = np.eye(p.shape[0])[cls] * 10
    return params


def test_support_matrix_constant_predictor(tiny_eenn, rng):
    spec = tiny_eenn
    support = data.Dataset(rng.uniform(size=(9, 3, 6, 6)), np.repeat(np.arange(3), 3), 3)
    sm = trn.compute_support_matrix(spec, _constant_params(spec, 1, rng), support)
    expected = np.zeros((3, spec.num_exits))
    expected[1] = 1.0
    np.testing.assert_array_equal(sm, expected)


def test_support_matrix_oracle_everywhere_correct():
    labels = np.repeat(np.arange(4), 5)
    sm = trn.support_matrix_from_correct(np.ones((20, 3), dtype=bool), labels, 4)
    np.testing.assert_array_equal(sm, np.ones((4, 3)))


def test_support_matrix_matches_counting(tiny_eenn, rng):
    spec = tiny_eenn
    labels = np.tile(np.arange(3), 7)[:20]
    support = data.Dataset(rng.uniform(size=(20, 3, 6, 6)), labels, 3)
    params = mdl.init_params(spec, rng)
    sm = trn.compute_support_matrix(spec, params, support)
    cache = trn.collect_outputs(spec, params, support.images, labels)
    for j in range(3):
        for i in range(spec.num_exits):
            hits = [cache.logits[s, i].argmax() == j for s in range(20) if labels[s] == j]
            assert sm[j, i] == sum(hits) / len(hits)


def test_support_matrix_missing_class(tiny_eenn, rng):
    support = data.Dataset(rng.uniform(size=(4, 3, 6, 6)), [0, 0, 1, 1], 3)
    with pytest.raises(ContractViolation):
        trn.compute_support_matrix(tiny_eenn, mdl.init_params(tiny_eenn, rng), support)


# ---------------------------------------------------------------- inference


def test_exit_rule_examples():
    confs = np.array([[0.25, 0.5, 1.0]])
    np.testing.assert_allclose(trn.cumulative_scores(confs)[0, :2], [0.25, 0.375])
    assert trn.exit_indices(confs, [0.2, 0.3]).tolist() == [0]
    r = np.random.default_rng(0)
    table = np.column_stack([r.uniform(0, 0.99, size=(50, 3)), np.ones(50)])
    assert np.all(trn.exit_indices(table, [0.0, 0.0, 0.0]) == 0)
    assert np.all(trn.exit_indices(table, [1.0, 1.0, 1.0]) == 3)
    with pytest.raises(ContractViolation):
        trn.exit_indices(table, [0.5])


def test_exit_indices_match_scalar_rule():
    r = np.random.default_rng(1)
    for _ in range(20):
        B = int(r.integers(1, 5))
        confs = np.column_stack([r.uniform(size=(30, B - 1)), np.ones(30)])
        eps = list(r.uniform(size=B - 1))
        assert trn.exit_indices(confs, eps).tolist() == [exit_of_sample(row, eps) for row in confs]


def test_early_exit_inference_predictions(tiny_eenn, rng):
    spec = tiny_eenn
    params = mdl.init_params(spec, rng)
    x = rng.uniform(size=(7, 3, 6, 6))
    eps = [0.4] * (spec.num_exits - 1)
    preds, exits = trn.early_exit_inference(spec, params, x, eps)
    f, c = mdl.forward_eenn(spec, params, x)
    table = np.stack([t.data for t in c], axis=1)
    for s in range(7):
        e = exit_of_sample(table[s], eps)
        assert exits[s] == e and preds[s] == f[e].data[s].argmax()


def test_adaptive_macs_reference_pair():
    assert trn.adaptive_macs([2.41e6, 5.95e6], [0.99, 0.01]) == pytest.approx(2.4454e6)
    assert abs(trn.adaptive_macs([2.41e6, 5.95e6], [0.99, 0.01]) - 2.44e6) <= 0.01e6


def test_adaptive_macs_properties(rng):
    gamma = np.sort(rng.uniform(1, 9, size=4))
    assert trn.adaptive_macs(gamma, [0, 0, 0, 1]) == gamma[-1]
    for _ in range(100):
        u = rng.dirichlet(np.ones(4))
        u = u / u.sum()
        v = trn.adaptive_macs(gamma, u)
        assert gamma.min() - 1e-12 <= v <= gamma.max() + 1e-12
    with pytest.raises(ContractViolation):
        trn.adaptive_macs(gamma, [0.5, 0.2, 0.2, 0.2])


# ---------------------------------------------------------------- calibration


def test_ece_examples():
    assert trn.compute_ece(np.ones(10), np.ones(10, dtype=bool)) == 0.0
    assert trn.compute_ece([0.8, 0.8], [False, False]) == pytest.approx(80.0)
    with pytest.raises(ContractViolation):
        trn.compute_ece([], [])


def test_ece_matches_oracle_and_permutation(rng):
    for _ in range(30):
        n = int(rng.integers(1, 200))
        conf = rng.uniform(size=n)
        conf[rng.random(n) < 0.1] = 1.0
        hit = rng.random(n) < conf
        e = trn.compute_ece(conf, hit)
        assert e == pytest.approx(ece_percent(conf, hit), abs=1e-10)
        p = rng.permutation(n)
        assert trn.compute_ece(conf[p], hit[p]) == pytest.approx(e, abs=1e-10)


# ---------------------------------------------------------------- threshold tuning


def _cache(confs, correct, classes=3):
    n, B = confs.shape
    labels = np.zeros(n, dtype=np.int64)
    logits = np.zeros((n, B, classes))
    logits[:, :, 0] = np.where(correct, 1.0, -1.0)
    return trn.OutputCache(logits, confs, labels)


def test_tune_single_exit():
    cache = _cache(np.ones((5, 1)), np.array([[True], [False], [True], [True], [True]]))
    eps, ev = trn.tune_thresholds(cache, [7.0], 0.5, 1.0)
    assert eps == [] and ev.utilization == [1.0] and ev.macs == 7.0 and ev.accuracy == 0.8


def test_tune_bimodal_confidences():
    r = np.random.default_rng(3)
    n = 100
    correct1 = r.random(n) < 0.6
    correct2 = r.random(n) < 0.9
    confs = np.column_stack([np.where(correct1, 0.95, 0.05), np.ones(n)])
    cache = _cache(confs, np.column_stack([correct1, correct2]))
    eps, ev = trn.tune_thresholds(cache, [1.0, 2.0], 0.5, 10.0)
    grid = [k / 10 for k in range(10)]
    accs = {e: evaluate_thresholds(confs, cache.correct, [1.0, 2.0], [e])[0] for e in grid}
    best = max(accs.values())
    assert 0.05 < eps[0] <= 0.95
    assert ev.accuracy == best
    assert eps[0] == min(e for e in grid if accs[e] == best)


def _oracle_grid_search(confs, correct, gamma):
    best = None
    for combo in itertools.product(range(10), repeat=confs.shape[1] - 1):
        eps = [k / 10 for k in combo]
        acc, _, macs = evaluate_thresholds(confs, correct, gamma, eps)
        key = (-acc, macs, combo)
        if best is None or key < best[0]:
            best = (key, eps)
    return best[1]


@pytest.mark.parametrize("seed", range(6))
def test_grid_step_matches_exhaustive_oracle(seed):
    r = np.random.default_rng(seed)
    n, B = 40, 3
    confs = np.column_stack([r.uniform(size=(n, B - 1)), np.ones(n)])
    correct = r.random((n, B)) < np.linspace(0.4, 0.9, B)
    gamma = np.array([1.0, 2.5, 4.0])
    cache = _cache(confs, correct)
    eps, _ = trn.tune_thresholds(cache, gamma, 0.1, 100.0)
    assert eps == _oracle_grid_search(confs, correct, gamma)


def test_step_two_lowers_until_budget():
    r = np.random.default_rng(4)
    n = 200
    confs = np.column_stack([r.uniform(size=n), np.ones(n)])
    correct = np.column_stack([r.random(n) < 0.7, r.random(n) < 0.9])
    gamma = [1.0, 3.0]
    cache = _cache(confs, correct)
    loose, ev_loose = trn.tune_thresholds(cache, gamma, 0.0, 100.0)
    tight, ev_tight = trn.tune_thresholds(cache, gamma, 0.0, 1.5)
    assert tight[0] <= loose[0]
    assert ev_tight.macs <= 1.5 or tight[0] == 0.0
    # an unreachable accuracy floor blocks any lowering
    blocked, _ = trn.tune_thresholds(cache, gamma, 1.0, 1.5)
    assert blocked == loose
    # the unconstrained variant never lowers
    assert trn.tune_thresholds(cache, gamma, 0.0, 1.5, constrained=False)[0] == loose


def test_evaluation_invariants():
    r = np.random.default_rng(5)
    for _ in range(20):
        B = int(r.integers(1, 5))
        confs = np.column_stack([r.uniform(size=(50, B - 1)), np.ones(50)])
        gamma = np.sort(r.uniform(1, 5, size=B))
        cache = _cache(confs, r.random((50, B)) < 0.7)
        ev = trn.evaluate(cache, gamma, list(r.choice(np.arange(10) / 10, size=B - 1)))
        assert abs(sum(ev.utilization) - 1) <= 1e-9
        assert gamma.min() - 1e-9 <= ev.macs <= gamma.max() + 1e-9
        assert len(ev.ece) == B


def test_lowering_threshold_monotone():
    r = np.random.default_rng(6)
    for _ in range(100):
        B = int(r.integers(2, 6))
        confs = np.column_stack([r.uniform(size=(60, B - 1)), np.ones(60)])
        eps = r.choice(np.arange(1, 10) / 10, size=B - 1)
        i = int(r.integers(0, B - 1))
        lower = eps.copy()
        lower[i] = round(lower[i] - 0.1, 1)
        u0 = trn.utilization(trn.exit_indices(confs, eps), B)
        u1 = trn.utilization(trn.exit_indices(confs, lower), B)
        assert u1[i] >= u0[i]
        assert u1[i + 1 :].sum() <= u0[i + 1 :].sum() + 1e-12


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def separable_splits():
    """Four classes whose mean images differ by a per-class constant shift."""
    r = np.random.default_rng(0)
    n = 30
    labels = np.repeat(np.arange(4), n)
    base = r.uniform(0.2, 0.8, size=(4, 3, 8, 8))
    images = np.clip(base[labels] + r.normal(0, 0.05, size=(4 * n, 3, 8, 8)), 0, 1)
    ds = data.Dataset(images, labels, 4)
    return data.split_and_batch(ds, batch_size=16, seed=0, support_per_class=4)


SEP_GENOME = mdl.Genome(((1, 3, 16), (1, 3, 16), (1, 3, 16), (1, 3, 16)), (1, 0, 1, 0))


def _spec(splits, genome=SEP_GENOME):
    return mdl.build_eenn(genome, 4, splits.train.image_shape, head_channels=4)


def test_backbone_only_schedule_leaves_heads(separable_splits):
    spec = _spec(separable_splits)
    cfg = trn.TrainConfig(mu=(2, 0, 0), seed=1)
    init = mdl.init_params(spec, np.random.default_rng(cfg.seed))
    res = trn.train_eenn(spec, separable_splits, cfg)
    for name, p in res.params.items():
        if name.startswith("exit"):
            np.testing.assert_array_equal(p.data, init[name].data)
    assert any(not np.array_equal(p.data, init[k].data) for k, p in res.params.items() if not k.startswith("exit"))
    assert [t["phase"] for t in res.trace] == [1, 1]


def test_training_is_deterministic(separable_splits):
    spec = _spec(separable_splits)
    cfg = trn.TrainConfig(mu=(1, 1, 1), seed=2, macs_constraint=spec.gamma[0])
    a = trn.train_eenn(spec, separable_splits, cfg)
    b = trn.train_eenn(spec, separable_splits, cfg)
    assert a.trace == b.trace
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_best_validation_weights_returned(separable_splits):
    spec = _spec(separable_splits)
    cfg = trn.TrainConfig(mu=(2, 2, 1), seed=3, macs_constraint=spec.gamma[0])
    res = trn.train_eenn(spec, separable_splits, cfg)
    losses = [t["val_loss"] for t in res.trace]
    assert res.best_epoch == int(np.argmin(losses))
    assert trn.validation_loss(spec, res.params, separable_splits, cfg) == pytest.approx(min(losses))


def test_full_schedule_not_worse_than_phase_one(separable_splits):
    full, phase1 = [], []
    spec = _spec(separable_splits)
    for seed in range(3):
        cfg = trn.TrainConfig(mu=(3, 2, 2), seed=seed, macs_constraint=spec.gamma[-1] * 0.9)
        res = trn.train_eenn(spec, separable_splits, cfg)
        cache = trn.collect_outputs(spec, res.params, separable_splits.val.images, separable_splits.val.labels)
        full.append(trn.tune_thresholds(cache, spec.gamma, 0.5, cfg.macs_constraint, constrained=False)[1].accuracy)
        base = trn.train_eenn(spec, separable_splits, trn.TrainConfig(mu=(3, 0, 0), seed=seed))
        cache = trn.collect_outputs(spec, base.params, separable_splits.val.images, separable_splits.val.labels)
        phase1.append(cache.correct[:, -1].mean())
    assert np.median(full) >= np.median(phase1)


def test_vacuous_cost_warning_logged_once(separable_splits, caplog):
    spec = _spec(separable_splits)
    cfg = trn.TrainConfig(mu=(0, 1, 0), seed=0, macs_constraint=spec.gamma[-1] * 2)
    with caplog.at_level(logging.WARNING, logger="eenas.trainer"):
        trn.train_eenn(spec, separable_splits, cfg)
    assert sum("vacuous" in r.message for r in caplog.records) == 1


def test_train_and_evaluate_record(separable_splits):
    out = trn.train_and_evaluate(SEP_GENOME, separable_splits, trn.TrainConfig(mu=(1, 1, 1), seed=0), head_channels=4)
    ev = out.evaluation
    assert len(ev.thresholds) == out.spec.num_exits - 1
    assert ev.gamma == list(out.spec.gamma)
    assert out.epochs == 3
    assert 0 <= ev.accuracy <= 1 and 0 <= ev.backbone_accuracy <= 1


def test_config_validation():
    with pytest.raises(ContractViolation):
        trn.TrainConfig(mu=(1, -1, 0))
    with pytest.raises(ContractViolation):
        trn.TrainConfig(accuracy_constraint=1.5)
    with pytest.raises(ContractViolation):
        trn.TrainConfig(mode="distill")
