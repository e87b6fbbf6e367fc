import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smx.core import InvalidArgument
from smx.exit import policy_loss_continuous, policy_loss_discrete, value_loss
from smx.nets import (
    AdamState,
    Net,
    TrainingError,
    ValueBins,
    adam_update,
    load_checkpoint,
    policy_forward,
    save_checkpoint,
    symexp,
    symlog,
    two_hot_decode,
    two_hot_encode,
    value_forward,
)

FD_STEP = 1e-5
REL_TOL = 1e-4


def _randomise(net, seed, scale=0.5):
    gen = np.random.default_rng(seed)
    for k, v in net.params.items():
        net.params[k] = gen.standard_normal(v.shape) * scale


def _check_gradient(net, loss_fn, names=None, coords=6, seed=0):
    """Compare analytic gradients with central differences on sampled coordinates."""
    _, grads = loss_fn()
    gen = np.random.default_rng(seed)
    for name in names or grads:
        p = net.params[name]
        flat = p.reshape(-1)
        picks = gen.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + FD_STEP
            up, _ = loss_fn()
            flat[i] = old - FD_STEP
            down, _ = loss_fn()
            flat[i] = old
            numeric = (up - down) / (2 * FD_STEP)
            analytic = np.asarray(grads[name]).reshape(-1)[i]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            assert abs(numeric - analytic) / denom < REL_TOL, (name, i, numeric, analytic)


@pytest.mark.parametrize("setting", range(10))
def test_discrete_distillation_gradient(setting):
    net = Net(5, (8, 6), num_actions=4, policy_temp=0.7, seed=setting)
    _randomise(net, setting)
    gen = np.random.default_rng(100 + setting)
    obs = gen.standard_normal((7, 5))
    targets = gen.dirichlet(np.ones(4), size=7)
    _check_gradient(net, lambda: policy_loss_discrete(targets, net, obs), seed=setting)


@pytest.mark.parametrize("setting", range(10))
def test_gaussian_nll_gradient(setting):
    net = Net(4, (8,), action_dim=2, seed=setting)
    _randomise(net, setting, scale=0.3)
    gen = np.random.default_rng(200 + setting)
    obs = gen.standard_normal((6, 4))
    atoms = gen.uniform(-1, 1, (6, 3, 2))
    masses = gen.dirichlet(np.ones(3), size=6)
    _check_gradient(net, lambda: policy_loss_continuous(atoms, masses, net, obs), seed=setting)


@pytest.mark.parametrize("setting", range(10))
def test_categorical_nll_gradient(setting):
    net = Net(4, (8,), num_actions=5, seed=setting)
    _randomise(net, setting)
    gen = np.random.default_rng(300 + setting)
    obs = gen.standard_normal((6, 4))
    atoms = gen.integers(5, size=(6, 3))
    masses = gen.dirichlet(np.ones(3), size=6)
    _check_gradient(net, lambda: policy_loss_continuous(atoms, masses, net, obs), seed=setting)


@pytest.mark.parametrize("setting", range(10))
def test_value_loss_gradient(setting):
    net = Net(5, (8, 8), num_actions=2, value_bins=16, value_max=50.0, seed=setting)
    _randomise(net, setting)
    gen = np.random.default_rng(400 + setting)
    obs = gen.standard_normal((7, 5))
    targets = gen.uniform(-40, 40, 7)
    names = [k for k in net.params if k.startswith("v/")]
    _check_gradient(net, lambda: value_loss(targets, net, obs), names=names, seed=setting)


def test_gradient_check_applies_with_observation_normalisation():
    net = Net(3, (6,), num_actions=3, obs_norm=True, seed=1)
    _randomise(net, 1)
    gen = np.random.default_rng(5)
    net.update_obs_stats(gen.normal(2.0, 3.0, (50, 3)))
    obs = gen.normal(2.0, 3.0, (4, 3))
    targets = gen.dirichlet(np.ones(3), size=4)
    _check_gradient(net, lambda: policy_loss_discrete(targets, net, obs))


def test_continuous_and_discrete_distillation_gradients_agree():
    # empirical target on K atoms equals the dense categorical target
    net = Net(4, (8,), num_actions=5, seed=3)
    _randomise(net, 3)
    gen = np.random.default_rng(9)
    obs = gen.standard_normal((6, 4))
    atoms = gen.integers(5, size=(6, 16))
    masses = np.full((6, 16), 1 / 16)
    dense = np.stack([np.bincount(a, weights=m, minlength=5) for a, m in zip(atoms, masses)])
    _, g_disc = policy_loss_discrete(dense, net, obs)
    _, g_cont = policy_loss_continuous(atoms, masses, net, obs)
    for k in g_disc:
        np.testing.assert_allclose(g_cont[k], g_disc[k], atol=1e-6)


def test_initial_policy_uniform_and_value_zero():
    net = Net(6, (16,), num_actions=4, seed=0)
    obs = np.random.default_rng(0).standard_normal((3, 6))
    np.testing.assert_allclose(net.policy_probs(obs), 0.25, atol=1e-12)
    np.testing.assert_allclose(net.value_batch(obs), 0.0, atol=1e-9)


def test_policy_probs_normalised():
    net = Net(6, (16,), num_actions=4, seed=0)
    _randomise(net, 0, scale=2.0)
    p = net.policy_probs(np.random.default_rng(1).standard_normal((50, 6)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_gaussian_std_floor():
    net = Net(2, (4,), action_dim=2, seed=0)
    net.params["pi/log_std"][:] = -50.0
    dist = policy_forward(net, np.zeros(2))
    assert np.all(dist.stddev >= 1e-3)


def test_observation_dim_mismatch():
    with pytest.raises(InvalidArgument):
        Net(3, (4,), num_actions=2).policy_probs(np.zeros(4))


def test_obs_stats_match_batch_moments():
    gen = np.random.default_rng(0)
    data = gen.normal(3.0, 2.0, (300, 4))
    net = Net(4, (4,), num_actions=2, obs_norm=True)
    for chunk in np.array_split(data, 7):
        net.update_obs_stats(chunk)
    np.testing.assert_allclose(net.obs_stats["obs/mean"], data.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(net.obs_stats["obs/var"], data.var(axis=0), atol=1e-12)


def test_symlog_examples():
    np.testing.assert_allclose(symlog([0.0, np.e - 1, -(np.e - 1)]), [0.0, 1.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(symexp(symlog([-300.0, 0.5, 42.0])), [-300.0, 0.5, 42.0], rtol=1e-12)


def test_two_hot_exact_on_bin_centre():
    bins = ValueBins(64)
    v = symexp(bins.centers[10])
    enc = two_hot_encode(v, bins)
    assert enc[10] == pytest.approx(1.0)
    assert np.count_nonzero(enc > 1e-12) == 1


def test_two_hot_clips_out_of_range():
    bins = ValueBins(64)
    assert two_hot_encode(1e6, bins)[-1] == 1.0
    assert two_hot_encode(-1e6, bins)[0] == 1.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-500, 500, allow_nan=False))
def test_two_hot_roundtrip_within_bin_width(v):
    bins = ValueBins(64)
    enc = two_hot_encode(v, bins)
    assert enc.sum() == pytest.approx(1.0)
    assert np.count_nonzero(enc) <= 2
    decoded = float(two_hot_decode(enc, bins))
    # local bin width in value space around v
    y = float(symlog(v))
    width = float(symexp(y + bins.width) - symexp(y - bins.width)) / 2
    assert abs(decoded - v) <= width + 1e-9


def test_two_hot_decode_rejects_unnormalised():
    with pytest.raises(InvalidArgument):
        two_hot_decode(np.full(64, 0.5), ValueBins(64))


def test_value_forward_decodes_probabilities():
    net = Net(3, (4,), num_actions=2, seed=0)
    probs, v = value_forward(net, np.zeros(3))
    assert probs.sum() == pytest.approx(1.0)
    assert v == pytest.approx(0.0, abs=1e-9)


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    out = adam_update(params, {"w": np.zeros(2)}, AdamState(params))
    np.testing.assert_array_equal(out["w"], params["w"])


def test_adam_descends_quadratic():
    params = {"w": np.array([1.0])}
    state = AdamState(params)
    for _ in range(5):
        params = adam_update(params, {"w": 2 * params["w"]}, state, lr=0.1)
    assert params["w"][0] ** 2 < 1.0


def test_adam_rejects_non_finite():
    params = {"w": np.array([1.0])}
    with pytest.raises(TrainingError):
        adam_update(params, {"w": np.array([np.nan])}, AdamState(params))


@pytest.mark.parametrize("kind", ["categorical", "gaussian"])
def test_checkpoint_roundtrip_byte_identical(tmp_path, kind):
    kw = {"num_actions": 3} if kind == "categorical" else {"action_dim": 2}
    net = Net(5, (7, 4), obs_norm=True, seed=11, **kw)
    _randomise(net, 4)
    net.update_obs_stats(np.random.default_rng(0).standard_normal((9, 5)))
    path = tmp_path / "a.smx"
    save_checkpoint(path, net, {"iteration": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"iteration": 3}
    save_checkpoint(tmp_path / "b.smx", loaded, meta)
    assert (tmp_path / "a.smx").read_bytes() == (tmp_path / "b.smx").read_bytes()
    obs = np.ones((2, 5))
    np.testing.assert_array_equal(loaded.value_batch(obs), net.value_batch(obs))


def test_checkpoint_rejects_garbage():
    with pytest.raises(InvalidArgument):
        Net.from_bytes(b"not a checkpoint at all")
