import numpy as np
import pytest

import oracles
from neudye import neuralnet
from neudye.errors import ValidationError
from neudye.neuralnet import (NeuralEquivalence, forward, init_params,
                              jacobians, normalize_from_data, select_features,
                              vjp)
from neudye.simulator import Trajectory


def make_model(sizes, activation="tanh", n_features=None, recurrent=False,
               seed=0, normalized=False):
    n_features = sizes[0] // 2 if n_features is None else n_features
    spec = [f"port{k}.v.re" for k in range(1, n_features + 1)]
    model = NeuralEquivalence(
        layer_sizes=list(sizes), activation=activation, feature_spec=spec,
        theta=init_params(sizes, recurrent, seed=seed), recurrent=recurrent)
    if normalized:
        rng = np.random.default_rng(seed + 100)
        model.input_shift = rng.normal(0.0, 0.5, sizes[0])
        model.input_scale = rng.uniform(0.5, 2.0, sizes[0])
        model.output_shift = rng.normal(0.0, 0.5, sizes[-1])
        model.output_scale = rng.uniform(0.5, 2.0, sizes[-1])
    return model


# ---------------------------------------------------------------------------
# forward pass


def test_zero_parameters_output_is_shift():
    model = make_model([6, 8, 4])
    model.theta = np.zeros_like(model.theta)
    model.output_shift = np.array([1.0, -2.0, 0.5, 0.0])
    y, hidden = forward(model, np.ones(3), np.ones(3))
    assert hidden is None
    assert np.array_equal(y, model.output_shift)


def test_affine_layer_is_exact_matmul():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    model = NeuralEquivalence(
        layer_sizes=[5, 3], activation="tanh",
        feature_spec=["port1.v.re", "port1.v.im"],
        theta=np.concatenate([w.ravel(), b]))
    x, z = rng.normal(size=3), rng.normal(size=2)
    y, _ = forward(model, x, z)
    assert np.allclose(y, w @ np.concatenate([x, z]) + b, atol=1e-14)


def test_relu_positive_region_is_affine_chain():
    rng = np.random.default_rng(5)
    w1 = rng.uniform(0.1, 1.0, size=(4, 3))
    b1 = rng.uniform(0.1, 1.0, size=4)
    w2 = rng.uniform(0.1, 1.0, size=(2, 4))
    b2 = rng.uniform(0.1, 1.0, size=2)
    model = NeuralEquivalence(
        layer_sizes=[3, 4, 2], activation="relu",
        feature_spec=["port1.v.re"],
        theta=np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))
    x, z = np.array([0.2, 0.7]), np.array([0.4])
    u = np.concatenate([x, z])
    y, _ = forward(model, x, z)
    assert np.allclose(y, w2 @ (w1 @ u + b1) + b2, atol=1e-14)


def test_tanh_hidden_layer_hand_computation():
    w1 = np.array([[0.5, -0.25], [1.0, 0.75]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[2.0, -1.0]])
    b2 = np.array([0.3])
    model = NeuralEquivalence(
        layer_sizes=[2, 2, 1], activation="tanh", feature_spec=["port1.v.re"],
        theta=np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))
    x, z = np.array([0.6]), np.array([-0.4])
    y, _ = forward(model, x, z)
    h = np.tanh(w1 @ np.array([0.6, -0.4]) + b1)
    assert abs(y[0] - (w2 @ h + b2)[0]) < 1e-14


def test_batched_forward_matches_loop():
    model = make_model([6, 8, 4], normalized=True)
    rng = np.random.default_rng(7)
    xs, zs = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    batch, _ = forward(model, xs, zs)
    for k in range(10):
        single, _ = forward(model, xs[k], zs[k])
        assert np.allclose(batch[k], single, atol=1e-14)


def test_zero_recurrent_matrix_equals_dense():
    sizes = [5, 6, 3]
    dense = make_model(sizes, seed=3)
    rec = NeuralEquivalence(
        layer_sizes=sizes, activation="tanh",
        feature_spec=dense.feature_spec,
        theta=np.concatenate([dense.theta, np.zeros(36)]), recurrent=True)
    rng = np.random.default_rng(8)
    x, z = rng.normal(size=3), rng.normal(size=2)
    hidden = rng.normal(size=6)
    y_dense, none_hidden = forward(dense, x, z)
    y_rec, hidden_new = forward(rec, x, z, np.zeros(6))
    assert none_hidden is None
    assert np.allclose(y_rec, y_dense, atol=1e-14)
    # returned hidden state is the first-layer activation
    w1 = dense.theta[:30].reshape(6, 5)
    b1 = dense.theta[30:36]
    assert np.allclose(hidden_new,
                       np.tanh(w1 @ np.concatenate([x, z]) + b1), atol=1e-14)
    # None hidden defaults to zeros
    y_default, _ = forward(rec, x, z, None)
    assert np.array_equal(y_default, y_rec)


def test_recurrent_feedback_enters_first_layer():
    sizes = [4, 3, 2]
    model = make_model(sizes, recurrent=True, seed=9)
    rng = np.random.default_rng(10)
    x, z = rng.normal(size=2), rng.normal(size=2)
    hidden = rng.normal(size=3)
    layers, r = model._slices(model.theta)
    u = np.concatenate([x, z])
    h1 = np.tanh(layers[0][0] @ u + layers[0][1] + r @ hidden)
    y_want = layers[1][0] @ h1 + layers[1][1]
    y, hidden_new = forward(model, x, z, hidden)
    assert np.allclose(y, y_want, atol=1e-13)
    assert np.allclose(hidden_new, h1, atol=1e-13)


def test_normalization_equivalence_affine():
    # (shift, scale) layers around a linear net fold into adjusted weights
    rng = np.random.default_rng(12)
    w = rng.normal(size=(2, 4))
    b = rng.normal(size=2)
    ish, isc = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)
    osh, osc = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    spec = ["port1.v.re", "port1.v.im"]
    normed = NeuralEquivalence(
        layer_sizes=[4, 2], activation="tanh", feature_spec=spec,
        theta=np.concatenate([w.ravel(), b]),
        input_shift=ish, input_scale=isc, output_shift=osh, output_scale=osc)
    w_eq = (osc[:, None] * w) / isc[None, :]
    b_eq = osc * (b - w @ (ish / isc)) + osh
    plain = NeuralEquivalence(
        layer_sizes=[4, 2], activation="tanh", feature_spec=spec,
        theta=np.concatenate([w_eq.ravel(), b_eq]))
    for _ in range(5):
        x, z = rng.normal(size=2), rng.normal(size=2)
        ya, _ = forward(normed, x, z)
        yb, _ = forward(plain, x, z)
        assert np.allclose(ya, yb, atol=1e-12)


# ---------------------------------------------------------------------------
# derivatives


def rel_gap(got, want):
    scale = max(float(np.max(np.abs(want))), 1.0)
    return float(np.max(np.abs(got - want))) / scale


@pytest.mark.parametrize("case", range(8))
def test_jacobians_match_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    widths = [[6, 4], [6, 8, 4], [5, 7, 7, 3], [4, 6, 2]]
    sizes = widths[case % 4]
    activation = "tanh" if case < 6 else "relu"
    recurrent = case in (3, 5)
    model = make_model(sizes, activation=activation, recurrent=recurrent,
                       seed=case, normalized=True)
    p = model.n_ex
    x = rng.normal(0.0, 0.8, p)
    z = rng.normal(0.0, 0.8, len(model.feature_spec))
    hidden = rng.normal(size=model.n_hidden) if recurrent else None
    jx, jz, jt = jacobians(model, x, z, hidden)

    def f_x(xx):
        return forward(model, xx, z, hidden)[0]

    def f_z(zz):
        return forward(model, x, zz, hidden)[0]

    def f_t(th):
        return forward(model, x, z, hidden, theta=th)[0]

    assert rel_gap(jx, oracles.fd_jacobian(f_x, x)) < 1e-5
    assert rel_gap(jz, oracles.fd_jacobian(f_z, z)) < 1e-5
    assert rel_gap(jt, oracles.fd_jacobian(f_t, model.theta.copy())) < 1e-5


def test_linear_jacobian_is_scaled_weight_matrix():
    model = make_model([6, 4], normalized=True, seed=20)
    w = model.theta[:24].reshape(4, 6)
    jx, jz, _ = jacobians(model, np.zeros(3), np.zeros(3))
    full = np.concatenate([jx, jz], axis=1)
    want = model.output_scale[:, None] * w / model.input_scale[None, :]
    assert np.allclose(full, want, atol=1e-13)


def test_vjp_theta_gradient_matches_fd():
    model = make_model([4, 5, 2], seed=30, normalized=True)
    rng = np.random.default_rng(31)
    x, z = rng.normal(size=2), rng.normal(size=2)
    wbar = rng.normal(size=2)
    _, _, cache = neuralnet.forward_cached(model, x, z)
    gx, gz, gt = vjp(model, cache, wbar)
    want = oracles.fd_grad(
        lambda th: float(wbar @ forward(model, x, z, theta=th)[0]),
        model.theta.copy())
    assert rel_gap(gt, want) < 1e-5
    assert rel_gap(gx, oracles.fd_grad(
        lambda xx: float(wbar @ forward(model, xx, z)[0]), x.copy())) < 1e-5
    assert rel_gap(gz, oracles.fd_grad(
        lambda zz: float(wbar @ forward(model, x, zz)[0]), z.copy())) < 1e-5


def test_vjp_batch_sums_parameter_gradient():
    model = make_model([4, 5, 2], seed=33)
    rng = np.random.default_rng(34)
    xs, zs = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    wbar = rng.normal(size=(6, 2))
    _, _, cache = neuralnet.forward_cached(model, xs, zs)
    _, _, gt_batch = vjp(model, cache, wbar)
    gt_sum = np.zeros_like(gt_batch)
    for k in range(6):
        _, _, ck = neuralnet.forward_cached(model, xs[k], zs[k])
        gt_sum += vjp(model, ck, wbar[k])[2]
    assert np.allclose(gt_batch, gt_sum, atol=1e-12)


def test_jacobians_reject_batched_input():
    model = make_model([4, 2])
    with pytest.raises(ValidationError):
        jacobians(model, np.zeros((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# initialization


def test_init_params_deterministic():
    a = init_params([6, 8, 4], seed=7)
    b = init_params([6, 8, 4], seed=7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, init_params([6, 8, 4], seed=8))


def test_init_params_zero_biases_and_bounds():
    sizes = [6, 8, 4]
    for seed in range(50):
        theta = init_params(sizes, seed=seed)
        w1, b1 = theta[:48], theta[48:56]
        w2, b2 = theta[56:88], theta[88:92]
        assert np.array_equal(b1, np.zeros(8))
        assert np.array_equal(b2, np.zeros(4))
        assert np.max(np.abs(w1)) <= np.sqrt(6.0 / 14)
        assert np.max(np.abs(w2)) <= np.sqrt(6.0 / 12)
    theta = init_params(sizes, recurrent=True, seed=0)
    assert theta.size == 92 + 64
    assert np.max(np.abs(theta[92:])) <= np.sqrt(6.0 / 16)


# ---------------------------------------------------------------------------
# serialization


def test_json_round_trip_bit_identical():
    for recurrent in (False, True):
        model = make_model([6, 8, 4], recurrent=recurrent, seed=40,
                           normalized=True)
        model.meta["note"] = "x"
        back = NeuralEquivalence.from_json_dict(model.to_json_dict())
        assert np.array_equal(back.theta, model.theta)
        assert np.array_equal(back.input_shift, model.input_shift)
        assert np.array_equal(back.input_scale, model.input_scale)
        assert np.array_equal(back.output_shift, model.output_shift)
        assert np.array_equal(back.output_scale, model.output_scale)
        assert back.layer_sizes == model.layer_sizes
        assert back.feature_spec == model.feature_spec
        assert back.recurrent == model.recurrent
        assert back.meta == model.meta


def test_file_round_trip(tmp_path):
    model = make_model([4, 5, 2], seed=41, normalized=True)
    path = str(tmp_path / "model.json")
    model.save(path)
    back = NeuralEquivalence.load(path)
    assert np.array_equal(back.theta, model.theta)
    x, z = np.array([0.3, -0.8]), np.array([1.1, 0.2])
    assert np.array_equal(forward(model, x, z)[0], forward(back, x, z)[0])


def test_corrupt_recurrent_block_rejected():
    model = make_model([4, 5, 2], recurrent=True, seed=42)
    doc = model.to_json_dict()
    doc["recurrent"][0][0] += 1.0
    with pytest.raises(ValidationError):
        NeuralEquivalence.from_json_dict(doc)


def test_constructor_validation():
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[4], activation="tanh",
                          feature_spec=[], theta=np.zeros(1))
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[4, 2], activation="sigmoid",
                          feature_spec=[], theta=np.zeros(10))
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[4, 2], activation="tanh",
                          feature_spec=[], theta=np.zeros(9))
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[4, 2], activation="tanh",
                          feature_spec=[], theta=np.zeros(10), recurrent=True)
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[2, 2], activation="tanh",
                          feature_spec=["a.b"] * 3, theta=np.zeros(6))
    with pytest.raises(ValidationError):
        NeuralEquivalence(layer_sizes=[2, 2], activation="tanh",
                          feature_spec=[], theta=np.zeros(6),
                          input_scale=np.array([1.0, 0.0]))


def test_forward_input_split_enforced():
    model = make_model([6, 4])
    with pytest.raises(ValidationError):
        forward(model, np.zeros(4), np.zeros(3))
    with pytest.raises(ValidationError):
        forward(model, np.zeros(3), np.zeros(3), hidden=np.zeros(2))


# ---------------------------------------------------------------------------
# feature selection and normalization fitting


def sample_traj():
    data = np.array([
        [0.0, 1.0, 2.0, 3.0],
        [4.0, 5.0, 6.0, 7.0],
        [8.0, 9.0, 10.0, 11.0],
    ])
    return Trajectory(dt=0.1, t0=0.0,
                      channels=["port1.v.re", "port1.v.im",
                                "tie1.i.re", "tie1.i.im"],
                      data=data)


def test_select_features_order_and_permutation():
    traj = sample_traj()
    z = select_features(traj, ["tie1.i.re", "port1.v.re"])
    assert np.array_equal(z, traj.data[:, [2, 0]])
    z2 = select_features(traj, ["port1.v.re", "tie1.i.re"])
    assert np.array_equal(z2, traj.data[:, [0, 2]])
    empty = select_features(traj, [])
    assert empty.shape == (3, 0)
    with pytest.raises(ValidationError):
        select_features(traj, ["port2.v.re"])


def test_normalize_from_data_moments():
    model = make_model([4, 2])
    rng = np.random.default_rng(50)
    inputs = rng.normal(2.0, 3.0, size=(200, 4))
    targets = rng.normal(-1.0, 0.5, size=(200, 2))
    normalize_from_data(model, inputs, targets)
    assert np.allclose(model.input_shift, inputs.mean(axis=0), atol=1e-12)
    assert np.allclose(model.input_scale, inputs.std(axis=0), atol=1e-12)
    assert np.allclose(model.output_shift, targets.mean(axis=0), atol=1e-12)
    assert np.allclose(model.output_scale, targets.std(axis=0), atol=1e-12)
    flat = np.ones((50, 4))
    normalize_from_data(model, flat, targets[:50])
    assert np.allclose(model.input_scale, 1e-8)
    with pytest.raises(ValidationError):
        normalize_from_data(model, inputs[:, :3], targets)
