import numpy as np
import pytest

from neurophysnet.diffcore import Tensor, backward
from neurophysnet.errors import ConfigurationError, DataError, DivergenceError, UsageError
from neurophysnet.fhn import FhnParams, StatePair, build_coupling_matrix, physics_loss, synthesize_trialset
from neurophysnet.diffcore import ops
from neurophysnet.trainer import (MetricsLog, PipelineConfig, ProtocolConfig, TrainConfig, build_network,
                                  evaluate, holdout_split, run_protocol, stratified_kfold,
                                  stratified_subsample, summarize, total_loss, train, write_report_csv)

SMALL_NET = dict(pinn=dict(f1=4, f2=4, hidden_dim=8, heads=2, layers=1, pool=(1, 2), pool_stride=(1, 2)),
                 featx=dict(f1=4, f2=4, latent_dim=8))
PIPE = PipelineConfig(window_len=40, stride=20, bands=((8, 12), (20, 24)))


@pytest.fixture(scope="module")
def small():
    data = synthesize_trialset(24, 3, 2, 0.5, seed=5, n_samples=80)
    return data, PIPE.run(data)


def net_for(x, seed=0, **pinn):
    return build_network(x, 2, seed, SMALL_NET["pinn"] | pinn, SMALL_NET["featx"])


# losses ---------------------------------------------------------------------

def _zero_fields(B=2):
    z = np.zeros((B, 1, 1, 2))
    return StatePair(z, z, 1.0)


def test_lambda_zero_is_cross_entropy(rng):
    logits = Tensor(rng.standard_normal((2, 3)))
    total, cls, _ = total_loss(logits, [0, 2], _zero_fields(), FhnParams(), 0.0)
    assert total.item() == cls.item() == ops.cross_entropy(logits, [0, 2]).item()


def test_perfect_logits_leave_physics():
    logits = Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]]))
    total, _, phys = total_loss(logits, [0, 1], _zero_fields(), FhnParams(), 1.0)
    assert total.item() == pytest.approx(phys.item(), abs=1e-12)
    assert phys.item() == pytest.approx(0.253136, abs=1e-9)


def test_fixture_composition(rng):
    logits = Tensor(rng.standard_normal((2, 2)))
    total, cls, _ = total_loss(logits, [1, 0], _zero_fields(), FhnParams(), 0.1)
    assert total.item() == pytest.approx(cls.item() + 0.0253136, abs=1e-10)


def test_negative_lambda_rejected():
    with pytest.raises(Exception):
        total_loss(Tensor(np.zeros((1, 2))), [0], _zero_fields(1), FhnParams(), -1.0)


# training -------------------------------------------------------------------

def test_zero_learning_rate_changes_nothing(small):
    data, x = small
    net = net_for(x, dropout=0.0, encoder_dropout=0.0)
    before = {k: v.copy() for k, v in net.state_dict().items() if "running" not in k}
    log = train(net, x, data.labels, TrainConfig(lr=0.0, epochs=3, batch_size=24, seed=1), 1.0)
    after = net.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v, err_msg=k)
    # one full batch per epoch; only the summation order changes between epochs
    total = log.column("loss_total")
    np.testing.assert_allclose(total, total[0], rtol=1e-12)


def test_training_is_deterministic(small):
    data, x = small
    runs = []
    for _ in range(2):
        net = net_for(x, 4)
        runs.append(train(net, x, data.labels, TrainConfig(epochs=2, batch_size=8, seed=4), 1.0).to_csv())
    assert runs[0] == runs[1]


def _one_sgd_step(x, y, lam):
    net = net_for(x, 2)
    before = net.pinn.head.weight.data.copy()
    train(net, x, y, TrainConfig(lam=lam, lr=0.01, epochs=1, batch_size=len(x), seed=0,
                                 optimizer="sgd"), 1.0)
    return net.pinn.head.weight.data - before


def test_lambda_changes_first_update(small):
    data, x = small
    a = _one_sgd_step(x, data.labels, 0.0)
    b = _one_sgd_step(x, data.labels, 0.1)
    assert np.abs(a - b).max() > 1e-8


def test_metrics_csv_format(small, tmp_path):
    data, x = small
    log = train(net_for(x), x, data.labels, TrainConfig(epochs=2, batch_size=12), 1.0)
    log.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_total,loss_cls,loss_phys,acc_train,acc_eval"
    assert len(lines) == 3 and lines[1].startswith("1,")


def test_divergence_names_epoch_and_batch(small):
    data, x = small
    bad = x.copy()
    bad[3] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(net_for(x), bad, data.labels, TrainConfig(epochs=1, batch_size=8, seed=0), 1.0)
    assert err.value.epoch == 1 and err.value.batch is not None
    assert "epoch 1" in str(err.value)


def test_empty_training_set(small):
    _, x = small
    with pytest.raises(UsageError):
        train(net_for(x), x[:0], np.array([], int), TrainConfig(epochs=1), 1.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(data_fraction=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="lbfgs")


# evaluation -----------------------------------------------------------------

class Fixed:
    """Stand-in model returning preset logits."""

    def __init__(self, logits):
        self._logits = np.asarray(logits, float)

    def eval(self):
        pass

    def logits(self, x):
        return self._logits[np.asarray(x, int).ravel()]


def test_perfect_logits_accuracy():
    y = np.array([0, 1, 2, 1])
    acc, cm = evaluate(Fixed(np.eye(3)[y] * 5), np.arange(4), y)
    assert acc == 1.0
    np.testing.assert_array_equal(cm, np.diag([1, 2, 1]))


def test_constant_logits_balanced_four_class():
    y = np.repeat(np.arange(4), 5)
    acc, cm = evaluate(Fixed(np.zeros((20, 4))), np.arange(20), y)
    assert acc == 0.25
    assert cm[:, 0].sum() == 20


def test_accuracy_invariant_to_order(rng):
    logits = rng.standard_normal((30, 3))
    y = rng.integers(0, 3, 30)
    perm = rng.permutation(30)
    a, _ = evaluate(Fixed(logits), np.arange(30), y)
    b, _ = evaluate(Fixed(logits), perm, y[perm])
    assert a == b


def test_evaluate_empty():
    with pytest.raises(UsageError):
        evaluate(Fixed(np.zeros((1, 2))), np.zeros((0,)), np.zeros(0, int))


# splits ---------------------------------------------------------------------

def test_thirty_percent_of_two_hundred():
    y = np.arange(200) % 2
    idx = stratified_subsample(y, 0.3, np.random.default_rng(0))
    assert len(idx) == 60
    assert abs((y[idx] == 0).sum() - (y[idx] == 1).sum()) <= 1


def test_subsample_unbalanced_largest_remainder():
    y = np.array([0] * 7 + [1] * 3)
    idx = stratified_subsample(y, 0.5, np.random.default_rng(0))
    assert len(idx) == 5 and (y[idx] == 0).sum() in (3, 4)


def test_kfold_partitions(rng):
    y = rng.integers(0, 3, 53)
    folds = stratified_kfold(y, 5, rng)
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(53))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_holdout_disjoint(rng):
    y = np.arange(50) % 2
    tr, ev = holdout_split(y, 0.2, rng)
    assert len(ev) == 10 and not set(tr) & set(ev) and len(tr) + len(ev) == 50


def test_bad_fold_count():
    with pytest.raises(ConfigurationError):
        stratified_kfold(np.zeros(4), 1, np.random.default_rng(0))


# protocols ------------------------------------------------------------------

def test_protocol_rows_and_report(small, tmp_path):
    data, _ = small
    proto = ProtocolConfig(protocol="cv", folds=2, fractions=(1.0, 0.5), seeds=(0,))
    cfg = TrainConfig(epochs=1, batch_size=12)
    rows = run_protocol(data, PIPE, cfg, proto, net_overrides=SMALL_NET)
    assert [(r.fraction, r.fold) for r in rows] == [(1.0, 0), (1.0, 1), (0.5, 0), (0.5, 1)]
    assert all(0 <= r.acc <= 1 for r in rows)
    write_report_csv(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "protocol,fraction,seed,fold,acc"
    assert set(summarize(rows)) == {("cv", 1.0), ("cv", 0.5)}


def test_parallel_protocol_matches_serial(small):
    data, _ = small
    cfg = TrainConfig(epochs=1, batch_size=12)
    serial = run_protocol(data, PIPE, cfg, ProtocolConfig(seeds=(0, 1)), net_overrides=SMALL_NET)
    parallel = run_protocol(data, PIPE, cfg, ProtocolConfig(seeds=(0, 1), jobs=2), net_overrides=SMALL_NET)
    assert serial == parallel


def test_vw_only_rows_are_labeled(small):
    data, _ = small
    cfg = TrainConfig(epochs=1, batch_size=12, vw_only=True)
    rows = run_protocol(data, PIPE, cfg, ProtocolConfig(), net_overrides=SMALL_NET)
    assert rows[0].protocol == "holdout-vw"


def test_cv_rejects_second_session(small):
    data, _ = small
    with pytest.raises(ConfigurationError):
        run_protocol(data, PIPE, TrainConfig(epochs=1), ProtocolConfig(protocol="cv"), eval_data=data)
