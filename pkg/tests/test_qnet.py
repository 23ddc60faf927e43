import numpy as np
import pytest

from lanemerge.qnet import (CheckpointError, DUELING, MomentumSGD, PLAIN,
                            QNetwork, load_checkpoint, save_checkpoint)


def finite_difference_grads(net, x, targets, h=1e-5):
    """Central differences of the summed squared error w.r.t. every param."""

    def loss():
        q, _ = net.forward(x)
        return float(np.sum((q - targets) ** 2))

    fd = {}
    for name, p in net.params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        fd[name] = g
    return fd


def analytic_grads(net, x, targets):
    q, cache = net.forward(x)
    return net.backward(cache, 2.0 * (q - targets))


def max_rel_error(a: dict, b: dict) -> float:
    # denominator floor keeps finite-difference roundoff on exactly-zero
    # gradients (dead ReLU paths) from registering as relative error
    worst = 0.0
    for name in a:
        num = np.abs(a[name] - b[name])
        den = np.maximum(np.abs(a[name]) + np.abs(b[name]), 1e-4)
        worst = max(worst, float((num / den).max()))
    return worst


def sample_away_from_kinks(net, rng, batch=4, margin=1e-3):
    """Draw inputs whose ReLU preactivations all clear the kink, so central
    differences stay on one linear piece."""
    for _ in range(100):
        x = rng.normal(0, 1, (batch, net.dims[0]))
        h = x
        ok = True
        for i in range(net.n_trunk):
            pre = h @ net.params[f"W{i}"] + net.params[f"b{i}"]
            if np.abs(pre).min() < margin:
                ok = False
                break
            h = np.maximum(0.0, pre)
        if ok:
            return x
    raise AssertionError("could not sample kink-free inputs")


@pytest.mark.parametrize("variant", [PLAIN, DUELING])
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(11)
    for trial in range(10):
        net = QNetwork(variant, (3, 6, 5), n_actions=5, rng=rng)
        x = sample_away_from_kinks(net, rng)
        t = rng.normal(0, 1, (4, 5))
        err = max_rel_error(analytic_grads(net, x, t),
                            finite_difference_grads(net, x, t))
        assert err < 1e-4, f"trial {trial}: rel err {err}"


def _fixed_head_net(v_bias, a_bias):
    """Tiny dueling net whose trunk outputs zero, so heads are pure biases."""
    net = QNetwork(DUELING, (1, 1), n_actions=len(a_bias))
    net.params["W0"][:] = 0.0
    net.params["b0"][:] = 0.0
    net.params["Wv"][:] = 0.0
    net.params["Wa"][:] = 0.0
    net.params["bv"][:] = v_bias
    net.params["ba"][:] = np.array(a_bias, dtype=float)
    return net


def test_dueling_aggregation_hand_example():
    net = _fixed_head_net(1.0, [1, 2, 3, 4, 5])
    q = net.q_values(np.array([0.3]))
    assert np.allclose(q, [-1.0, 0.0, 1.0, 2.0, 3.0])


def test_equal_advantages_collapse_to_value():
    net = _fixed_head_net(2.5, [0.7] * 5)
    q = net.q_values(np.array([1.0]))
    assert np.allclose(q, 2.5)


def test_q_invariant_under_constant_advantage_shift():
    rng = np.random.default_rng(3)
    net = QNetwork(DUELING, (21, 16, 16), rng=rng)
    x = rng.normal(0, 1, 21)
    base = net.q_values(x)
    for c in (-7.3, 0.001, 42.0):
        shifted = net.clone()
        shifted.params["ba"] = shifted.params["ba"] + c
        assert np.allclose(shifted.q_values(x), base, atol=1e-12)
        assert np.argmax(shifted.q_values(x)) == np.argmax(base)


def test_plain_output_dimension():
    net = QNetwork(PLAIN, (21, 32, 32))
    assert net.q_values(np.zeros(21)).shape == (5,)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        QNetwork("double", (3, 4))


def test_sgd_overfits_single_target():
    rng = np.random.default_rng(9)
    net = QNetwork(PLAIN, (4, 16, 16), rng=rng)
    opt = MomentumSGD(net, lr=5e-3, momentum=0.9)
    x = rng.normal(0, 1, (1, 4))
    t = np.array([[0.3, -0.2, 0.9, 0.0, 0.5]])
    for _ in range(3000):
        q, cache = net.forward(x)
        err = q - t
        loss = float(np.mean(err ** 2))
        opt.step(net.backward(cache, 2.0 * err / err.size))
    assert loss < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    for variant in (PLAIN, DUELING):
        net = QNetwork(variant, (21, 128, 128), rng=rng)
        path = tmp_path / f"{variant}.qnet"
        save_checkpoint(str(path), net, sidecar={"seed": 7})
        loaded, sidecar = load_checkpoint(str(path))
        assert loaded.variant == variant
        assert loaded.dims == net.dims
        assert sidecar == {"seed": 7}
        for k in net.params:
            assert np.array_equal(loaded.params[k], net.params[k])


def test_checkpoint_truncation_detected(tmp_path):
    net = QNetwork(PLAIN, (4, 8, 8))
    path = tmp_path / "m.qnet"
    save_checkpoint(str(path), net)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_corruption_detected(tmp_path):
    net = QNetwork(DUELING, (4, 8, 8))
    path = tmp_path / "m.qnet"
    save_checkpoint(str(path), net)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupted|truncated"):
        load_checkpoint(str(path))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.qnet"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(path))
