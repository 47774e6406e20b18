import math

import numpy as np
import pytest

from oracles import central_difference_ld, rel_error, toy_loss_ld
from filterprune.sfp import PruneConfig, SfpSchedule
from filterprune.toytrain import (
    CONV1,
    CONV2,
    FC,
    TOY_POLICY,
    SgdConfig,
    SyntheticDataset,
    ToyNet,
    accuracy,
    forward,
    loss_and_grads,
    make_sample,
    probe_gradients,
    random_probes,
    run_sfp_experiment,
    sgd_step,
    toy_schedule,
)


@pytest.fixture(scope="module")
def small_data():
    return SyntheticDataset(0, 16, 4).train()


def test_dataset_pure_and_balanced():
    a = SyntheticDataset(3, 8, 4)
    x1, y1 = a.train()
    x2, y2 = SyntheticDataset(3, 8, 4).train()
    assert x1.tobytes() == x2.tobytes() and y1.tolist() == y2.tolist()
    assert y1.tolist().count(0) == y1.tolist().count(1) == 4
    img, label = make_sample(3, 5)
    assert label == 1 and np.array_equal(img, x1[5, 0])
    assert np.abs(img).max() <= 1.2


def test_dataset_bar_orientation():
    img, label = make_sample(0, 0)
    assert label == 0
    # a horizontal bar makes two rows much brighter than the rest
    rows = img.mean(axis=1)
    assert np.sort(rows)[-2:].min() > 0.4 and np.median(rows) < 0.1


def test_zero_net_outputs_zero(small_data):
    x, _ = small_data
    assert forward(ToyNet.zeros(), x[:4]).tolist() == [[0.0, 0.0]] * 4


def test_forward_shape(small_data):
    x, _ = small_data
    assert forward(ToyNet.init(0), x[:4]).shape == (4, 2)


def test_identity_net_hand_value():
    # one channel, centre-tap kernels: on a constant image c every stage
    # passes c through, so logits = c * fc + fc_bias
    net = ToyNet.zeros(channels=1)
    net.params[CONV1][0, 0, 1, 1] = 1.0
    net.params[CONV2][0, 0, 1, 1] = 1.0
    net.params[FC][:, 0] = [2.0, -0.5]
    net.params[FC + ".bias"][:] = [0.25, 1.0]
    c = 0.75
    out = forward(net, np.full((1, 1, 16, 16), c))
    assert out.tolist() == [[c * 2.0 + 0.25, c * -0.5 + 1.0]]


def test_zero_net_loss_is_ln2(small_data):
    x, y = small_data
    loss, _ = loss_and_grads(ToyNet.zeros(), x[:4], y[:4])
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_shape_and_label_errors(small_data):
    x, y = small_data
    with pytest.raises(ValueError):
        forward(ToyNet.init(0), np.zeros((2, 3, 16, 16)))
    with pytest.raises(ValueError):
        loss_and_grads(ToyNet.init(0), x[:2], np.array([0, 2]))


def test_duplicated_sample_doubles(small_data):
    x, y = small_data
    net = ToyNet.init(1)
    a, b = x[[0]], x[[1]]
    _, g1 = loss_and_grads(net, a, y[[0]])
    _, g2 = loss_and_grads(net, np.concatenate([a, b]), y[[0, 1]])
    _, g3 = loss_and_grads(net, np.concatenate([a, a, b]), y[[0, 0, 1]])
    for name in net.params:
        # sum-of-losses gradients: 3*g3 = 2*g_a + g_b and 2*g2 = g_a + g_b
        np.testing.assert_allclose(3 * g3[name] - 2 * g2[name], g1[name], rtol=1e-9, atol=1e-14)


def test_loss_matches_extended_precision(small_data):
    x, y = small_data
    net = ToyNet.init(2)
    loss, _ = loss_and_grads(net, x, y)
    ref, _ = toy_loss_ld(net.params, x, y)
    assert loss == pytest.approx(float(ref), rel=1e-13)


def test_gradients_on_smooth_point():
    # first seed whose probes all stay clear of ReLU kinks (FD only valid there)
    for seed in range(50):
        x, y = SyntheticDataset(seed, 16, 2).train()
        x, y = x[:4], y[:4]
        net = ToyNet.init(seed)
        probes = random_probes(net, 40, np.random.default_rng(seed))
        fds = [central_difference_ld(net.params, x, y, n, i) for n, i in probes]
        if all(smooth for _, smooth in fds):
            break
    else:
        pytest.fail("no kink-free evaluation point found")
    _, grads = loss_and_grads(net, x, y)
    errs = [rel_error(float(grads[n][i]), fd) for (n, i), (fd, _) in zip(probes, fds)]
    assert max(errs) < 1e-6


def test_probe_gradients_flags_kinks():
    x, y = SyntheticDataset(0, 16, 2).train()
    net = ToyNet.init(0)
    probes = probe_gradients(net, x[:4], y[:4], random_probes(net, 100, np.random.default_rng(0)))
    smooth = [p for p in probes if p.smooth]
    assert len(smooth) < len(probes)
    assert max(p.rel_error for p in smooth) < 1e-6


def test_sgd_vanilla_step():
    net = ToyNet.init(0)
    before = {k: v.copy() for k, v in net.params.items()}
    rng = np.random.default_rng(0)
    grads = {k: rng.normal(size=v.shape) for k, v in net.params.items()}
    sgd_step(net, grads, SgdConfig(momentum=0.0, weight_decay=0.0), 1.0, {})
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], before[k] - grads[k])


def test_sgd_momentum_two_steps():
    mu, wd, lr = 0.9, 5e-4, 0.1
    net = ToyNet.init(0)
    w0 = net.params[FC].copy()
    rng = np.random.default_rng(1)
    g1 = {k: rng.normal(size=v.shape) for k, v in net.params.items()}
    g2 = {k: rng.normal(size=v.shape) for k, v in net.params.items()}
    vel = {}
    sgd_step(net, g1, SgdConfig(mu, wd), lr, vel)
    sgd_step(net, g2, SgdConfig(mu, wd), lr, vel)
    v1 = g1[FC] + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2[FC] + wd * w1
    w2 = w1 - lr * v2
    np.testing.assert_allclose(net.params[FC], w2, rtol=0, atol=1e-12)


def test_sgd_freeze_keeps_zero():
    net = ToyNet.init(0)
    keep = np.array([False, True] * 4)
    net.params[CONV2][~keep] = 0.0
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    vel = {}
    for _ in range(3):
        sgd_step(net, grads, SgdConfig(), 0.1, vel, {CONV2: keep})
        assert (net.params[CONV2][~keep] == 0.0).all()
        assert (vel[CONV2][~keep] == 0.0).all()
    assert (net.params[CONV2][keep] != 0.0).any()


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SgdConfig(weight_decay=-1)


def test_container_roundtrip_names():
    c = ToyNet.init(0).to_container()
    assert c.names() == [CONV1, CONV1 + ".bias", CONV2, CONV2 + ".bias", FC, FC + ".bias"]
    back = ToyNet.from_container(c)
    assert back.params[CONV1].dtype == np.float64


def _short(theta, soft=4, finetune=2):
    sched = SfpSchedule(soft_epochs=soft, finetune_epochs=finetune, lr_initial=0.05,
                        lr_steps=((2, 0.1),), finetune_lr=((0, 0.05), (1, 0.005)))
    return PruneConfig(theta, "fpgm", TOY_POLICY, sched)


def test_short_run_theta_zero():
    r = run_sfp_experiment(_short(0.0), SyntheticDataset(0, 64, 32), seed=0)
    assert all(p == [] for h in r.pruned_history for p in h.values())
    assert r.final_report.real_sparsity == 0.0
    assert len(r.accuracy_history) == 6


def test_short_run_half():
    r = run_sfp_experiment(_short(0.5), SyntheticDataset(0, 64, 32), seed=0)
    rows = {row.name: row for row in r.final_report.per_layer}
    assert set(rows) == {CONV1, CONV2}
    assert rows[CONV1].pruned_count == rows[CONV2].pruned_count == 4
    for name in (CONV1, CONV2):
        arr = r.final_weights[name].array
        zero = (arr.reshape(8, -1) == 0).all(axis=1)
        assert zero.sum() == 4
    assert r.lr_trace == _short(0.5).schedule.lr_trace()


def test_short_run_deterministic(tmp_path):
    cfg = _short(0.5)
    a = run_sfp_experiment(cfg, SyntheticDataset(2, 64, 32), seed=2)
    b = run_sfp_experiment(cfg, SyntheticDataset(2, 64, 32), seed=2)
    assert a.accuracy_history == b.accuracy_history
    assert a.final_weights == b.final_weights
    pa = a.write(tmp_path / "a")
    pb = b.write(tmp_path / "b")
    for key in pa:
        assert pa[key].read_bytes() == pb[key].read_bytes()
    assert pa["history"].read_text().splitlines()[0] == "epoch,phase,lr,test_accuracy"


def test_toy_schedule_shape():
    s = toy_schedule()
    assert (s.soft_epochs, s.finetune_epochs) == (40, 10)
    assert [e for e, _ in s.lr_steps] == [10, 20]
    assert len(s.finetune_lr) == 2 and s.finetune_lr[1][0] == 5
