import numpy as np
import pytest

from neurophysnet.diffcore import Linear, Tensor, backward, grad_check, no_grad, ops
from neurophysnet.errors import ConfigurationError, FormatError
from neurophysnet.featx import Classifier, FeatureExtractor, FeatxConfig, classify, extract_features
from neurophysnet.fhn import StatePair
from neurophysnet.network import NetConfig, NeuroPhysNet, load_checkpoint, save_checkpoint
from neurophysnet.pinn import PinnConfig, PinnModel

TINY = dict(n_bands=2, n_channels=3, window_len=16, n_windows=3, hidden_dim=16, heads=2,
            pool=(1, 2), pool_stride=(1, 2))
SMALL = dict(f1=4, f2=4, hidden_dim=8, heads=2, layers=1, pool=(1, 2), pool_stride=(1, 2))


def tiny_model(seed=0, **kw):
    cfg = PinnConfig(**(TINY | kw))
    return PinnModel(cfg, np.random.default_rng(seed))


def expected_count(cfg):
    """Parameter count of the PINN written out layer by layer."""
    kh, kw = cfg.k1
    conv = cfg.n_bands * cfg.f1 * kh * kw + cfg.f1 * cfg.f2 * cfg.k2[0] * cfg.k2[1]
    bn = 2 * (cfg.f1 + cfg.f2)
    fc = cfg.flat_dim() * cfg.hidden_dim + cfg.hidden_dim
    d = cfg.hidden_dim
    layer = 4 * (d * d + d) + 2 * 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    head_out = 2 * cfg.num_nodes * cfg.data_points
    return conv + bn + fc + cfg.n_windows * d + cfg.layers * layer + d * head_out + head_out


# pinn -----------------------------------------------------------------------

def test_paper_scale_shape_trace(rng):
    cfg = PinnConfig(n_bands=9, n_channels=22, window_len=250, n_windows=4, data_points=50,
                     f1=4, f2=4, hidden_dim=16, heads=4, layers=1)
    model = PinnModel(cfg, rng)
    model.eval()
    with no_grad():
        s = model(rng.standard_normal((2, 4, 9, 22, 250)), 1.0)
    assert s.v.shape == (2, 4, 22, 50) and s.w.shape == (2, 4, 22, 50)


def test_default_data_points():
    assert PinnConfig(n_bands=9, n_channels=22, window_len=250, n_windows=4).data_points == 50


def test_eval_forward_is_deterministic(rng):
    model = tiny_model()
    model.eval()
    x = rng.standard_normal((2, 3, 2, 3, 16))
    a, b = model(x), model(x)
    np.testing.assert_array_equal(a.v.data, b.v.data)
    np.testing.assert_array_equal(a.w.data, b.w.data)


def test_batch_equivariance_in_eval(rng):
    model = tiny_model()
    model.eval()
    x = rng.standard_normal((4, 3, 2, 3, 16))
    perm = np.array([2, 0, 3, 1])
    with no_grad():
        a, b = model(x), model(x[perm])
    np.testing.assert_allclose(a.v.data[perm], b.v.data, atol=1e-12)


def test_pinn_gradient_of_mean_v(rng):
    model = tiny_model(**SMALL)
    model.eval()  # dropout off so the objective is deterministic
    x = Tensor(rng.standard_normal((2, 3, 2, 3, 16)))
    params = dict(model.named_parameters())
    report = grad_check(lambda: model(x).v.mean(), params, max_entries=6, rng=rng)
    assert report.max_rel_error < 1e-4, report.worst


def test_pinn_gradient_in_train_mode(rng):
    # batchnorm on batch statistics; dropout disabled for a deterministic objective
    model = tiny_model(**SMALL, dropout=0.0, encoder_dropout=0.0)
    x = Tensor(rng.standard_normal((3, 3, 2, 3, 16)))
    params = dict(model.named_parameters())
    report = grad_check(lambda: (model(x).w * model(x).v).mean(), params, max_entries=5, rng=rng)
    assert report.max_rel_error < 1e-4, report.worst


def test_parameter_count_golden():
    model = tiny_model()
    # frozen at first build
    assert model.count_parameters() == 38418
    assert model.count_parameters() == expected_count(model.cfg)


def test_parameter_count_grows_with_hidden():
    assert tiny_model(hidden_dim=32).count_parameters() > tiny_model().count_parameters()


def test_linear_alone_counts_nine():
    assert Linear(2, 3, np.random.default_rng(0)).count_parameters() == 9


def test_fuzz_random_configs_finite():
    rng = np.random.default_rng(77)
    for _ in range(100):
        C, om = int(rng.integers(2, 6)), int(rng.integers(8, 24))
        heads = int(rng.choice([1, 2]))
        cfg = PinnConfig(n_bands=int(rng.integers(1, 4)), n_channels=C, window_len=om,
                         n_windows=int(rng.integers(1, 4)), f1=int(rng.integers(1, 4)),
                         f2=int(rng.integers(1, 4)), hidden_dim=4 * heads, heads=heads,
                         layers=int(rng.integers(1, 3)), pool=(1, 2), pool_stride=(1, 2),
                         data_points=int(rng.integers(2, 6)))
        model = PinnModel(cfg, rng)
        model.eval()
        B = int(rng.integers(1, 3))
        with no_grad():
            s = model(rng.standard_normal((B, cfg.n_windows, cfg.n_bands, C, om)) * 10)
        assert s.v.shape == (B, cfg.n_windows, C, cfg.data_points)
        assert np.all(np.isfinite(s.v.data)) and np.all(np.isfinite(s.w.data))


def test_config_rejects_oversized_pool():
    with pytest.raises(ConfigurationError, match="pool"):
        PinnConfig(**(TINY | dict(pool=(4, 2), pool_stride=(4, 2))))


def test_config_rejects_heads_not_dividing():
    with pytest.raises(ConfigurationError):
        PinnConfig(**(TINY | dict(hidden_dim=10, heads=4)))


def test_input_shape_checked(rng):
    model = tiny_model()
    with pytest.raises(ConfigurationError):
        model(rng.standard_normal((1, 3, 2, 4, 16)))


# featx ----------------------------------------------------------------------

def _extractor(rng, W=2, P=6, **kw):
    return FeatureExtractor(FeatxConfig(time_len=W * P, f1=3, f2=3, latent_dim=5, **kw), rng)


def test_feature_shape_trace(rng):
    ex = FeatureExtractor(FeatxConfig(time_len=4 * 50), rng)
    ex.eval()
    s = StatePair(rng.standard_normal((2, 4, 22, 50)), rng.standard_normal((2, 4, 22, 50)))
    with no_grad():
        assert extract_features(s, ex).shape == (2, 64)


def test_identical_fields_compose_branches(rng):
    ex = _extractor(rng)
    ex.eval()
    v = rng.standard_normal((2, 2, 3, 6))
    with no_grad():
        out = ex.node_features(StatePair(v, v)).data
        folded = ex.fold(v)
        ref = ops.layer_norm(ex.v_branch(folded) + ex.w_branch(folded), ex.norm.gamma, ex.norm.beta)
    np.testing.assert_allclose(out.reshape(-1, 5), ref.data, atol=1e-14)


def test_fusion_is_symmetric(rng):
    ex = _extractor(rng)
    a, b = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((4, 5)))
    np.testing.assert_array_equal(ex.norm(a + b).data, ex.norm(b + a).data)


def test_node_permutation_invariance(rng):
    ex = _extractor(rng)
    ex.eval()
    v, w = rng.standard_normal((2, 2, 2, 4, 6))
    perm = [3, 1, 0, 2]
    with no_grad():
        a = ex(StatePair(v, w)).data
        b = ex(StatePair(v[:, :, perm], w[:, :, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_feature_branch_gradient(rng):
    ex = _extractor(rng)
    v, w = Tensor(rng.standard_normal((2, 2, 3, 6))), Tensor(rng.standard_normal((2, 2, 3, 6)))
    proj = Tensor(rng.standard_normal((2, 5)))
    params = dict(ex.named_parameters()) | {"v": v, "w": w}
    report = grad_check(lambda: (ex(StatePair(v, w)) * proj).sum(), params, max_entries=8, rng=rng)
    assert report.max_rel_error < 1e-4, report.worst


def test_zero_head_is_uniform(rng):
    head = Classifier(5, 4, rng)
    for p in head.parameters():
        p.data[...] = 0.0
    probs = ops.softmax(classify(Tensor(rng.standard_normal((3, 5))), head)).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_four_class_head(rng):
    assert Classifier(8, 4, rng)(Tensor(np.zeros((2, 8)))).shape == (2, 4)


def test_featx_rejects_short_series():
    with pytest.raises(ConfigurationError, match="pool"):
        FeatxConfig(time_len=2)


def test_separate_branch_weights(rng):
    ex = _extractor(rng)
    assert not np.array_equal(ex.v_branch.fc.weight.data, ex.w_branch.fc.weight.data)


# full network and checkpoints -----------------------------------------------

def _net(seed=3):
    cfg = NetConfig.for_input(3, 2, 3, 16, 2, seed, pinn=SMALL, featx=dict(f1=3, f2=3, latent_dim=6))
    return NeuroPhysNet(cfg)


def test_network_forward(rng):
    net = _net()
    logits, s = net(rng.standard_normal((2, 3, 2, 3, 16)), 1.0)
    assert logits.shape == (2, 2) and s.v.shape == (2, 3, 3, 3)


def test_freeze_trunk_keeps_head_trainable():
    net = _net()
    before = net.count_parameters()
    net.freeze_trunk()
    names = {n for n, p in net.named_parameters() if p.trainable}
    assert not any(n.startswith(("pinn.conv", "pinn.fc", "pinn.encoder", "pinn.position")) for n in names)
    assert "pinn.head.weight" in names and any(n.startswith("featx.") for n in names)
    assert net.count_parameters() == before
    assert net.count_parameters(trainable_only=True) < before


def test_checkpoint_round_trip(tmp_path, rng):
    net = _net()
    x = rng.standard_normal((2, 3, 2, 3, 16))
    net(x)  # move batchnorm running statistics off their initial values
    save_checkpoint(net, tmp_path / "a.npnw", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "a.npnw")
    assert extra == {"note": "x"}
    for key, value in net.state_dict().items():
        assert back.state_dict()[key].tobytes() == value.tobytes(), key
    net.eval(), back.eval()
    np.testing.assert_array_equal(net.logits(x), back.logits(x))
    save_checkpoint(back, tmp_path / "b.npnw", {"note": "x"})
    assert (tmp_path / "a.npnw").read_bytes() == (tmp_path / "b.npnw").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.npnw").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError) as err:
        load_checkpoint(tmp_path / "x.npnw")
    assert err.value.offset == 0


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(_net(), tmp_path / "a.npnw")
    raw = (tmp_path / "a.npnw").read_bytes()
    (tmp_path / "t.npnw").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.npnw")
