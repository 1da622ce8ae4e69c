import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmidrl import nn
from cmidrl.errors import ConfigurationError, UsageError

from gradcheck import check_params, numeric_grad, rel_error


def test_identity_layer_passes_input_through():
    net = nn.Mlp([2, 2], ["linear"])
    net.weights[0].data = np.eye(2)
    net.biases[0].data = np.zeros(2)
    out = net(nn.Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_zero_weights_give_zero_output(rng):
    net = nn.Mlp([3, 4, 2], rng=rng)
    for p in net.parameters():
        p.data = np.zeros_like(p.data)
    out = net(nn.Tensor(rng.normal(size=(5, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2)))


def test_two_layer_forward_matches_hand_matmul(rng):
    net = nn.Mlp([4, 6, 3], ["tanh", "linear"], rng=np.random.default_rng(7))
    x = rng.normal(size=(5, 4))
    w0, b0 = net.weights[0].data, net.biases[0].data
    w1, b1 = net.weights[1].data, net.biases[1].data
    expected = np.zeros((5, 3))
    for i in range(5):
        hidden = [np.tanh(sum(x[i, a] * w0[a, j] for a in range(4)) + b0[j]) for j in range(6)]
        for k in range(3):
            expected[i, k] = sum(hidden[j] * w1[j, k] for j in range(6)) + b1[k]
    np.testing.assert_allclose(net(nn.Tensor(x)).data, expected, rtol=0, atol=1e-12)


def test_input_width_mismatch_is_a_configuration_error(rng):
    net = nn.Mlp([3, 2], rng=rng)
    with pytest.raises(ConfigurationError):
        net(nn.Tensor(np.ones((1, 4))))


def test_bad_widths_rejected():
    with pytest.raises(ConfigurationError):
        nn.Mlp([3])
    with pytest.raises(ConfigurationError):
        nn.Mlp([3, 2], ["swish"])


def test_grad_of_dot_product_is_the_input():
    w = nn.Tensor([0.3, -1.0, 2.0], requires_grad=True)
    x = np.array([1.5, 2.5, -0.5])
    (w * x).sum().backward()
    np.testing.assert_array_equal(w.grad, x)


def test_sigmoid_slope_at_zero_is_a_quarter():
    x = nn.Tensor(0.0, requires_grad=True)
    nn.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_needs_scalar():
    x = nn.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid", "linear"])
@pytest.mark.parametrize("output_norm", [False, True])
def test_mlp_gradients_match_finite_differences(activation, output_norm):
    rng = np.random.default_rng(0)
    net = nn.Mlp([4, 7, 5], [activation, "linear"], output_norm=output_norm, rng=rng)
    x = nn.Tensor(rng.normal(size=(6, 4)) + 0.1)
    target = rng.normal(size=(6, 5))

    def loss():
        return nn.square(net(x) - target).mean()

    assert check_params(loss, net.parameters()) < 1e-4


def test_gradient_through_input_and_composite_ops(rng):
    a = nn.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    b = nn.Tensor(rng.normal(size=(4,)), requires_grad=True)

    def loss():
        h = nn.concat([nn.exp(a * 0.3), nn.log(a)], axis=1)
        m = nn.minimum(h[:, :4], h[:, 4:] + b)
        s = nn.softplus(m) / 3.0 - nn.clip(a, 0.8, 1.5)
        return nn.tile_rows(s, 2).sum() + nn.reshape(s, (12,)).mean() + (a / (b * b + 1.0)).sum()

    assert check_params(loss, [a, b]) < 1e-4


def test_layer_norm_standardises_rows(rng):
    x = nn.Tensor(rng.normal(3.0, 5.0, size=(10, 32)))
    y = nn.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


def test_encoder_outputs_lie_strictly_inside_unit_interval(rng):
    net = nn.Mlp([5, 8, 6], ["relu", "linear"], output_norm=True, rng=rng)
    z = net(nn.Tensor(rng.normal(scale=50.0, size=(20, 5)))).data
    assert np.all(np.abs(z) < 1.0)


def test_forward_and_backward_are_deterministic():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        net = nn.Mlp([3, 5, 2], rng=rng)
        x = nn.Tensor(rng.normal(size=(4, 3)))
        loss = nn.square(net(x)).sum()
        loss.backward()
        outs.append((loss.data.tobytes(), [p.grad.tobytes() for p in net.parameters()]))
    assert outs[0] == outs[1]


def test_frozen_forward_leaves_parameters_without_grad(rng):
    net = nn.Mlp([3, 4, 1], rng=rng)
    x = nn.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    nn.forward(net, x, frozen=True).sum().backward()
    assert all(p.grad is None for p in net.parameters())
    assert x.grad is not None and np.any(x.grad != 0)


def test_no_grad_records_nothing(rng):
    w = nn.Tensor(rng.normal(size=3), requires_grad=True)
    with nn.no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad


# -------------------------------------------------------------- Adam


def test_adam_with_zero_grad_leaves_params_unchanged():
    p = nn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_adam_single_scalar_step_matches_recurrence():
    p = nn.Tensor(np.array(0.5), requires_grad=True)
    opt = nn.Adam([p], lr=0.1)
    g = -3.0
    p.grad = np.array(g)
    opt.step()
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 0.5 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data == pytest.approx(expected, abs=1e-15)
    assert p.data == pytest.approx(0.5 + 0.1, abs=1e-8)


def test_adam_keeps_identical_params_identical(rng):
    a = nn.Tensor(np.array([0.2]), requires_grad=True)
    b = nn.Tensor(np.array([0.2]), requires_grad=True)
    opt = nn.Adam([a, b], lr=0.05)
    for _ in range(5):
        g = rng.normal(size=1)
        a.grad, b.grad = g.copy(), g.copy()
        opt.step()
    assert a.data.tobytes() == b.data.tobytes()


# ------------------------------------------------------- soft update


@pytest.mark.parametrize("weight,expected", [(0.01, 0.99), (1.0, 0.0), (0.0, 1.0)])
def test_soft_update(weight, expected):
    target = [nn.Tensor(np.array([1.0]))]
    online = [nn.Tensor(np.array([0.0]))]
    nn.soft_update(target, online, weight)
    assert target[0].data[0] == pytest.approx(expected, abs=1e-15)


def test_soft_update_rejects_weights_outside_unit_interval():
    with pytest.raises(ConfigurationError):
        nn.soft_update([nn.Tensor([1.0])], [nn.Tensor([0.0])], 1.5)


def test_soft_update_on_networks(rng):
    online = nn.Mlp([3, 4, 2], rng=rng)
    target = online.copy()
    for p in online.parameters():
        p.data = p.data + 1.0
    nn.soft_update(target, online, 1.0)
    for t, o in zip(target.parameters(), online.parameters()):
        np.testing.assert_array_equal(t.data, o.data)


# -------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"enc/w0": rng.normal(size=(3, 4)), "scalar": np.array(1.5), "v": np.arange(5.0)}
    path = tmp_path / "x.ckpt"
    nn.save_checkpoint(path, arrays)
    raw = path.read_bytes()
    assert raw[:8] == nn.CKPT_MAGIC
    back = nn.load_checkpoint(path)
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ConfigurationError):
        nn.load_checkpoint(path)


# ------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 4), width=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_random_linear_tanh_gradients(batch, width, seed):
    rng = np.random.default_rng(seed)
    w = nn.Tensor(rng.normal(size=(3, width)), requires_grad=True)
    b = nn.Tensor(rng.normal(size=width), requires_grad=True)
    x = nn.Tensor(rng.normal(size=(batch, 3)))

    def loss():
        return nn.tanh(nn.linear(x, w, b)).sum()

    loss().backward()
    numeric = numeric_grad(lambda: loss().item(), w.data)
    assert rel_error(w.grad, numeric) < 1e-4



def test_scaled_momentum_uses_the_reference_second_moments():
    a = nn.Tensor(np.ones(3), requires_grad=True)
    b = nn.Tensor(np.ones(2), requires_grad=True)
    ref = nn.Adam([a, b], lr=0.1)
    (a * 4.0).sum().backward()
    b.grad = np.ones(2)
    ref.step()
    opt = nn.ScaledMomentum([a], ref, lr=0.1)
    start = a.data.copy()
    a.grad = np.full(3, 2.0)
    opt.step()
    # private first moment 2.0 after bias correction, reference RMS 4.0
    np.testing.assert_allclose(start - a.data, 0.1 * 2.0 / (4.0 + 1e-8))
    assert ref.t == 1
    np.testing.assert_allclose(ref.m[1], 0.1)


def test_scaled_momentum_needs_reference_parameters():
    a = nn.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nn.ScaledMomentum([a], nn.Adam([nn.Tensor(np.ones(1), requires_grad=True)]))
