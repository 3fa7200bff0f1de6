from types import SimpleNamespace

import numpy as np
import pytest

from autodiff import (
    AdamOptimizer,
    GradTape,
    Mlp,
    ObservationEncoder,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sgd_adam_step,
)
from errors import ConfigError, ContractViolation
from minicraft import MiniCraftEnv

HEADS = (3, 2)


def policy_loss(net, x, actions, advantages):
    """A small PPO-shaped scalar: clipped ratio surrogate plus value error."""
    tape = GradTape()
    logits, value = net.forward_tape(tape, x)
    logp = tape.constant(np.zeros(x.shape[0]))
    for head, act in zip(logits, actions):
        logp = tape.add(logp, tape.take(tape.log_softmax(head), act))
    ratio = tape.exp(logp)
    adv = tape.constant(advantages)
    surrogate = tape.minimum(tape.mul(ratio, adv), tape.mul(tape.clip(ratio, 0.8, 1.2), adv))
    value_err = tape.square(tape.sub(value, tape.constant(advantages)))
    loss = tape.sub(tape.scale(tape.mean(value_err), 0.5), tape.mean(surrogate))
    return tape, loss


def numeric_grad(net, name, fn, eps=1e-6):
    grad = np.zeros_like(net.params[name])
    for idx in np.ndindex(grad.shape):
        orig = net.params[name][idx]
        net.params[name][idx] = orig + eps
        plus = fn()
        net.params[name][idx] = orig - eps
        minus = fn()
        net.params[name][idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = Mlp.init(5, 6, HEADS, seed=1)
    x = rng.normal(size=(4, 5))
    actions = [rng.integers(0, k, size=4) for k in HEADS]
    advantages = rng.normal(size=4)

    tape, loss = policy_loss(net, x, actions, advantages)
    grads = tape.backward(loss)
    assert set(grads) == set(net.params)

    def value():
        return float(policy_loss(net, x, actions, advantages)[1].value)

    for name in ("w1", "b2", "head0_w", "head1_b", "value_w"):
        np.testing.assert_allclose(grads[name], numeric_grad(net, name, value), rtol=1e-4, atol=1e-7)


def smooth_loss(net, x, actions, weights, targets):
    tape = GradTape()
    logits, value = net.forward_tape(tape, x)
    total = tape.constant(np.zeros(x.shape[0]))
    for head, act in zip(logits, actions):
        total = tape.add(total, tape.take(tape.log_softmax(head), act))
    surrogate = tape.mean(tape.mul(tape.exp(total), tape.constant(weights)))
    value_err = tape.mean(tape.square(tape.sub(value, tape.constant(targets))))
    return tape, tape.sub(tape.scale(value_err, 0.5), surrogate)


def test_gradients_match_finite_differences_on_random_networks():
    rng = np.random.default_rng(17)
    for case in range(100):
        heads = tuple(int(k) for k in rng.integers(2, 5, size=int(rng.integers(1, 4))))
        input_dim, hidden = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        batch = int(rng.integers(1, 6))
        net = Mlp.init(input_dim, hidden, heads, seed=case)
        for param in net.params.values():
            param[...] = rng.normal(size=param.shape)
        x = rng.normal(size=(batch, input_dim))
        actions = [rng.integers(0, k, size=batch) for k in heads]
        weights, targets = rng.normal(size=batch), rng.normal(size=batch)

        tape, loss = smooth_loss(net, x, actions, weights, targets)
        grads = tape.backward(loss)

        def value():
            return float(smooth_loss(net, x, actions, weights, targets)[1].value)

        for name in net.params:
            numeric = numeric_grad(net, name, value)
            err = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-8)
            assert err < 1e-4, (case, name, err)


@pytest.mark.parametrize("grad", [5.0, 0.01, -3.0])
def test_first_adam_step_on_a_scalar_moves_it_by_lr(grad):
    holder = SimpleNamespace(params={"x": np.array(2.0)})
    opt = AdamOptimizer(lr=0.05)
    assert opt.step(holder, {"x": np.array(grad)})
    assert float(holder.params["x"]) == pytest.approx(2.0 - 0.05 * np.sign(grad), abs=1e-6)


def test_backward_preconditions():
    tape = GradTape()
    stray = GradTape().constant(1.0)
    with pytest.raises(ContractViolation):
        tape.backward(stray)
    vec = tape.param("w", np.ones(3))
    with pytest.raises(ContractViolation):
        tape.backward(vec)


def test_unused_parameters_get_zero_gradients():
    tape = GradTape()
    a = tape.param("a", np.array([2.0]))
    unused = tape.param("b", np.ones((2, 2)))
    grads = tape.backward(tape.sum(tape.square(a)))
    np.testing.assert_allclose(grads["a"], [4.0])
    assert not grads["b"].any() and grads["b"].shape == unused.shape


def test_forward_checks_the_input_width():
    net = Mlp.init(5, 4, HEADS)
    logits, value = net.forward(np.zeros((7, 5)))
    assert [l.shape for l in logits] == [(7, 3), (7, 2)]
    assert value.shape == (7,)
    with pytest.raises(ContractViolation):
        net.forward(np.zeros(4))


def test_adam_moves_params_and_rejects_non_finite_updates():
    net = Mlp.init(3, 4, (2,))
    before = net.copy()
    opt = AdamOptimizer(lr=0.1)
    grads = {name: np.ones_like(value) for name, value in net.params.items()}
    assert sgd_adam_step(net, grads, optimizer=opt) is net
    assert opt.t == 1
    # first bias-corrected step moves every weight by lr
    np.testing.assert_allclose(net.params["w1"], before.params["w1"] - 0.1, atol=1e-6)

    snapshot = net.copy()
    grads["w1"] = np.full_like(grads["w1"], np.nan)
    assert not opt.step(net, grads)
    assert opt.rejected == 1 and opt.t == 1
    for name in net.params:
        np.testing.assert_array_equal(net.params[name], snapshot.params[name])


def test_sgd_adam_step_keeps_moments_on_the_network():
    net = Mlp.init(2, 3, (2,), seed=5)
    before = net.copy()
    zeros = {name: np.zeros_like(value) for name, value in net.params.items()}
    sgd_adam_step(net, zeros, lr=0.1)
    for name in net.params:
        np.testing.assert_array_equal(net.params[name], before.params[name])

    ones = {name: np.ones_like(value) for name, value in net.params.items()}
    net = Mlp.init(2, 3, (2,), seed=5)
    assert sgd_adam_step(net, ones, lr=0.1) is net
    np.testing.assert_allclose(net.params["value_b"], before.params["value_b"] - 0.1, atol=1e-6)
    sgd_adam_step(net, ones, lr=0.1)
    assert net.adam.t == 2
    np.testing.assert_allclose(net.params["value_b"], before.params["value_b"] - 0.2, atol=1e-6)


def test_checkpoint_restores_net_optimizer_and_meta(tmp_path):
    net = Mlp.init(4, 5, HEADS, seed=9)
    opt = AdamOptimizer(lr=0.01)
    opt.step(net, {name: np.full_like(v, 0.5) for name, v in net.params.items()})
    path = tmp_path / "nets" / "policy.bin"
    save_checkpoint(path, net, opt, {"frames": 1024})

    net2, opt2, meta = load_checkpoint(path)
    assert meta == {"frames": 1024}
    assert net2.head_dims == HEADS
    for name in net.params:
        np.testing.assert_array_equal(net2.params[name], net.params[name])
        np.testing.assert_array_equal(opt2.m[name], opt.m[name])
    assert (opt2.t, opt2.lr) == (1, 0.01)


def test_checkpoint_decoding_rejects_foreign_or_damaged_bytes():
    blob = encode_checkpoint(Mlp.init(2, 2, (2,)))
    with pytest.raises(ConfigError, match="bad magic"):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(ConfigError):
        decode_checkpoint(blob[:3])
    with pytest.raises(ConfigError, match="truncated"):
        decode_checkpoint(blob[:-8])
    with pytest.raises(ConfigError, match="trailing"):
        decode_checkpoint(blob + b"\x00" * 8)


def test_observation_encoding_width(data):
    env = MiniCraftEnv(data)
    _, obs = env.reset("HarvestLog", 0)
    encoder = ObservationEncoder(data)
    vec = encoder.encode(obs)
    assert vec.shape == (encoder.dim,)
    assert np.all((vec >= 0.0) & (vec <= 1.0))
