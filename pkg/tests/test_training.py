import numpy as np
import pytest

import oracles
from neudye import fixtures, neuralnet, training
from neudye.errors import NumericalError, ValidationError
from neudye.grid import (Branch, Bus, FaultScenario, Generator, GridModel,
                         make_partition)
from neudye.simulator import SimConfig, Trajectory, simulate_full, simulate_hybrid_pi
from neudye.training import (TrainConfig, adjoint_backward, coupled_forward,
                             grad_check, loss_continuous, machine_channels,
                             optimizer_step, prepare_windows, teacher_forward,
                             tie_channels, train_discrete_baseline,
                             train_pi_neudye)


def one_tie_grid():
    grid = GridModel(
        f_base=60.0,
        buses=[Bus(1, "generator", v_set=1.02, p_load=-0.3),
               Bus(2, "slack", v_set=1.0)],
        branches=[Branch(1, 2, 0.01, 0.2)],
        generators=[Generator(bus=1, m=8.0, d=5.0, xd_p=0.25),
                    Generator(bus=2, m=10.0, d=5.0, xd_p=0.2)],
    )
    return grid, make_partition(grid, [1])


def scalar_model(theta0):
    # du_re/dt = theta0 * u_re, imaginary channel frozen at zero
    return neuralnet.NeuralEquivalence(
        layer_sizes=[2, 2], activation="tanh", feature_spec=[],
        theta=np.array([theta0, 0.0, 0.0, 0.0, 0.0, 0.0]))


def scalar_window(theta0, h, n, eta=None):
    _, part = one_tie_grid()
    t = np.arange(n + 1) * h
    data = np.zeros((n + 1, 2))
    data[:, 0] = np.exp(theta0 * t)
    traj = Trajectory(dt=h, t0=0.0,
                      channels=["tie1.i.re", "tie1.i.im"], data=data)
    cfg = TrainConfig(window_s=n * h, dt=h, eta_weights=eta, variant="dp",
                      max_iters=0, arch=[])
    win = prepare_windows([(traj, part)], cfg,
                          ["tie1.i.re", "tie1.i.im"], feature_channels=[])
    return win, cfg


THETA0 = 0.3
H, N = 1.0e-3, 1000


def test_scalar_rollout_matches_heun_closed_form():
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N)
    run = training.teacher_forward(model, win, cfg)
    ks = np.arange(N + 1)
    want = oracles.heun_scalar_solution(THETA0, 1.0, H, ks)
    assert np.max(np.abs(run.us[:, 0, 0] - want) / want) < 1e-11
    assert np.max(np.abs(run.us[:, 0, 1])) == 0.0
    # second order in h: endpoint agrees with exp to O(h^2)
    assert abs(run.us[-1, 0, 0] - np.exp(THETA0)) < 1e-6


def test_scalar_final_sample_loss_closed_form():
    eta = np.zeros(N)
    eta[-1] = 1.0
    x_hat = 1.1 * np.exp(THETA0)
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N, eta=eta)
    win.u_hat[0, -1, 0] = x_hat
    run = training.teacher_forward(model, win, cfg)
    loss, flags = training._teacher_loss(run, win)
    x_n = oracles.heun_scalar_solution(THETA0, 1.0, H, N)
    want = 0.5 * (x_n - x_hat) ** 2
    assert not flags.any()
    assert abs(loss - want) / want < 1e-10


def test_scalar_adjoint_gradient_closed_form():
    eta = np.zeros(N)
    eta[-1] = 1.0
    x_hat = 1.1 * np.exp(THETA0)
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N, eta=eta)
    win.u_hat[0, -1, 0] = x_hat
    run = training.teacher_forward(model, win, cfg)
    adj = training._teacher_backward(model, run, win, model.theta)
    x_n = oracles.heun_scalar_solution(THETA0, 1.0, H, N)
    res = x_n - x_hat
    # d loss / d W[0,0]: chain through the growth factor
    want_theta = res * oracles.heun_scalar_dgrad(THETA0, 1.0, H, N)
    assert abs(adj.g[0] - want_theta) / abs(want_theta) < 1e-10
    # d loss / d b[0]: constant-forcing sensitivity
    want_bias = res * oracles.heun_scalar_csens(THETA0, H, N)
    assert abs(adj.g[4] - want_bias) / abs(want_bias) < 1e-10
    # decoupled parameters see zero gradient at this point
    assert abs(adj.g[1]) < 1e-15 and abs(adj.g[3]) < 1e-15


def test_scalar_uniform_eta_loss_closed_form():
    # constant target keeps residuals O(1) so quadrature structure is what
    # the tolerance actually measures
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N)
    win.u_hat[0, 1:, 0] = 0.5
    loss, _ = training._teacher_loss(
        training.teacher_forward(model, win, cfg), win)
    ks = np.arange(1, N + 1)
    want = 0.5 * np.sum(
        (oracles.heun_scalar_solution(THETA0, 1.0, H, ks) - 0.5) ** 2)
    assert abs(loss - want) / want < 1e-10


def test_zero_residual_zero_adjoint():
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N)
    probe = training.teacher_forward(model, win, cfg)
    win.u_hat[0] = probe.us[:, 0, :]
    run = training.teacher_forward(model, win, cfg)
    loss, _ = training._teacher_loss(run, win)
    adj = training._teacher_backward(model, run, win, model.theta)
    assert loss == 0.0
    assert np.max(np.abs(adj.g)) == 0.0
    assert np.max(np.abs(adj.lambda_)) == 0.0


def test_eta_all_zero_gives_zero_loss():
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, H, N, eta=np.zeros(N))
    run = training.teacher_forward(model, win, cfg)
    loss, _ = training._teacher_loss(run, win)
    adj = training._teacher_backward(model, run, win, model.theta)
    assert loss == 0.0
    assert np.max(np.abs(adj.g)) == 0.0


def test_stage_a_reads_post_switch_sample():
    # net output equals the feature pair, so the rollout exposes exactly
    # which sample each trapezoid stage consumed around the switches
    _, part = one_tie_grid()
    h, n = 0.1, 4
    rng = np.random.default_rng(3)
    data = np.zeros((n + 2, 4))
    data[:, 2:] = rng.normal(size=(n + 2, 2))
    scn = FaultScenario(fault_bus=1, t_fault=0.2, t_clear=0.3)
    traj = Trajectory(dt=h, t0=0.0,
                      channels=["tie1.i.re", "tie1.i.im",
                                "port1.v.re", "port1.v.im"],
                      data=data, meta={"scenario": scn.to_json_dict()})
    cfg = TrainConfig(window_s=n * h, dt=h, variant="dp", max_iters=0, arch=[])
    w = np.zeros((2, 4))
    w[:, 2:] = np.eye(2)
    model = neuralnet.NeuralEquivalence(
        layer_sizes=[4, 2], activation="tanh",
        feature_spec=["port1.v.re", "port1.v.im"],
        theta=np.concatenate([w.ravel(), np.zeros(2)]))
    win = prepare_windows([(traj, part)], cfg, ["tie1.i.re", "tie1.i.im"],
                          feature_channels=["port1.v.re", "port1.v.im"])
    assert win.k0 == 1
    keys = [s[0] for s in win.schedule]
    assert keys == [None, (1, 1.0e4), None, None]
    run = training.teacher_forward(model, win, cfg)
    z = data[1:, 2:]
    u = np.zeros(2)
    prev = None
    want = [u.copy()]
    for k in range(n):
        za = z[k + 1] if keys[k] != prev else z[k]
        u = u + 0.5 * h * (za + z[k + 1])
        want.append(u.copy())
        prev = keys[k]
    assert np.allclose(run.us[:, 0, :], np.array(want), atol=1e-14)


# ---------------------------------------------------------------------------
# adjoint vs finite differences


def linear_fixture_dataset():
    grid, part, _ = fixtures.linear_port_synth()
    sim = SimConfig(dt=0.01, t_end=1.2)
    out = []
    for bus, tc in [(1, 0.56), (2, 0.60)]:
        scn = FaultScenario(fault_bus=bus, t_fault=0.5, t_clear=tc)
        out.append((simulate_full(grid, scn, sim, partition=part), part))
    return grid, part, out


def fresh_model(sizes, spec, activation="tanh", recurrent=False, seed=2):
    return neuralnet.NeuralEquivalence(
        layer_sizes=sizes, activation=activation, feature_spec=spec,
        theta=neuralnet.init_params(sizes, recurrent, seed=seed),
        recurrent=recurrent)


def port_spec():
    return ["port1.v.re", "port1.v.im", "port2.v.re", "port2.v.im"]


def test_grad_check_closed_loop():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=2, variant="pi",
                      max_iters=1)
    model = fresh_model([8, 6, 4], port_spec())
    rep = grad_check(model, dataset, cfg, variant="pi")
    assert rep.max_rel_err < 1e-4


def test_grad_check_closed_loop_rich_selector():
    grid, part, dataset = linear_fixture_dataset()
    spec = ["port1.v.re", "port1.v.im", "gen1.delta", "gen1.omega",
            "line1.i.re", "bus2.v.im"]
    cfg = TrainConfig(window_s=0.5, dt=0.01, arch=[5], seed=5, variant="pi",
                      max_iters=1)
    model = fresh_model([10, 5, 4], spec, seed=5)
    rep = grad_check(model, dataset, cfg, variant="pi")
    assert rep.max_rel_err < 1e-4


def test_grad_check_teacher_forced():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=2, variant="dp",
                      max_iters=1)
    model = fresh_model([8, 6, 4], port_spec())
    rep = grad_check(model, dataset, cfg, variant="ex_only")
    assert rep.max_rel_err < 1e-4


def test_grad_check_teacher_forced_recurrent():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=2,
                      variant="dp-rnn", max_iters=1)
    model = fresh_model([8, 6, 4], port_spec(), recurrent=True)
    rep = grad_check(model, dataset, cfg, variant="ex_only")
    assert rep.max_rel_err < 1e-4


def test_grad_check_teacher_forced_data_features():
    grid, part, dataset = linear_fixture_dataset()
    spec = ["port1.v.re", "port1.v.im", "gen1.delta", "bus2.v.re"]
    cfg = TrainConfig(window_s=0.5, dt=0.01, arch=[5], seed=7, variant="dp",
                      max_iters=1)
    model = fresh_model([8, 5, 4], spec, seed=7)
    rep = grad_check(model, dataset, cfg, variant="ex_only")
    assert rep.max_rel_err < 1e-4


# ---------------------------------------------------------------------------
# optimizer


def test_optimizer_sgd_closed_form():
    cfg = TrainConfig(optimizer="sgd", lr=0.05)
    theta = np.array([1.0, -2.0, 3.0])
    grad = np.array([0.5, 0.5, -1.0])
    new, state = optimizer_step(None, theta, grad, cfg)
    assert state is None
    assert np.allclose(new, theta - 0.05 * grad, atol=1e-15)


def test_optimizer_adam_first_step_closed_form():
    cfg = TrainConfig(optimizer="adam", lr=0.01)
    theta = np.zeros(4)
    grad = np.array([1.0, -3.0, 0.25, 1e-12])
    new, state = optimizer_step(None, theta, grad, cfg)
    want = oracles.adam_first_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, grad)
    assert np.allclose(new, theta + want, atol=1e-15)
    assert state["t"] == 1
    # second step with the same gradient keeps moving the same direction
    new2, state = optimizer_step(state, new, grad, cfg)
    assert state["t"] == 2
    assert np.all(np.sign(new2 - new)[:3] == -np.sign(grad)[:3])


def test_optimizer_rejects_bad_gradients():
    cfg = TrainConfig()
    with pytest.raises(NumericalError):
        optimizer_step(None, np.zeros(2), np.array([1.0, np.nan]), cfg)
    with pytest.raises(ValidationError):
        optimizer_step(None, np.zeros(2), np.zeros(3), cfg)


def test_batch_round_robin_frozen():
    rounds = [training._batch_indices(it, 5, 2) for it in range(5)]
    assert rounds == [[0, 1], [2, 3], [4, 0], [1, 2], [3, 4]]
    assert training._batch_indices(3, 4, 0) == [0, 1, 2, 3]
    assert training._batch_indices(3, 4, 9) == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# config and window plumbing


def test_train_config_json_round_trip():
    cfg = TrainConfig(lr=0.02, optimizer="sgd", max_iters=7, tol=1e-6,
                      batch=3, window_s=1.5, dt=0.01, seed=9, arch=[16, 8],
                      activation="relu", variant="dp-rnn")
    doc = cfg.to_json_dict()
    assert set(doc) == {"lr", "optimizer", "max_iters", "tol", "batch",
                        "window_s", "dt", "seed", "arch", "activation",
                        "variant"}
    back = TrainConfig.from_json_dict(doc)
    assert back.to_json_dict() == doc
    with pytest.raises(ValidationError):
        TrainConfig.from_json_dict({**doc, "extra": 1})
    short = dict(doc)
    del short["lr"]
    with pytest.raises(ValidationError):
        TrainConfig.from_json_dict(short)


def test_train_config_validation():
    assert TrainConfig(window_s=1.5, dt=0.01).window == 150
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValidationError):
        TrainConfig(variant="continuous")
    with pytest.raises(ValidationError):
        TrainConfig(window_s=0.01, dt=0.01)
    with pytest.raises(ValidationError):
        TrainConfig(window_s=1.0, dt=0.01, eta_weights=np.ones(99))
    with pytest.raises(ValidationError):
        TrainConfig(window_s=1.0, dt=0.01, eta_weights=-np.ones(100))


def test_prepare_windows_alignment_and_validation():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, variant="pi", max_iters=0)
    win = prepare_windows(dataset, cfg, tie_channels(part),
                          x_channels=machine_channels(grid, part))
    assert win.k0 == 40
    assert win.u_hat.shape == (2, 61, 4)
    assert win.x_hat.shape == (2, 61, 2)
    # fault occupies steps 50..55 and 50..59 in absolute indices
    keys = [[step[j] for step in win.schedule] for j in range(2)]
    assert keys[0][9] is None and keys[0][10] == (1, 1.0e4)
    assert keys[0][15] == (1, 1.0e4) and keys[0][16] is None
    assert keys[1][19] == (2, 1.0e4) and keys[1][20] is None

    with pytest.raises(ValidationError):
        prepare_windows([], cfg, tie_channels(part))
    other_part = make_partition(grid, [1])
    mixed = [dataset[0], (dataset[1][0], other_part)]
    with pytest.raises(ValidationError):
        prepare_windows(mixed, cfg, tie_channels(part))
    bad_dt = TrainConfig(window_s=0.6, dt=0.02, variant="pi", max_iters=0)
    with pytest.raises(ValidationError):
        prepare_windows(dataset, bad_dt, tie_channels(part))
    long_win = TrainConfig(window_s=2.0, dt=0.01, variant="pi", max_iters=0)
    with pytest.raises(ValidationError):
        prepare_windows(dataset, long_win, tie_channels(part))
    shifted = FaultScenario(fault_bus=1, t_fault=0.7, t_clear=0.76)
    other = simulate_full(grid, shifted, SimConfig(dt=0.01, t_end=1.4),
                          partition=part)
    with pytest.raises(ValidationError):
        prepare_windows(dataset + [(other, part)], cfg, tie_channels(part))


def test_prepare_windows_rejects_diverged():
    _, part = one_tie_grid()
    data = np.zeros((40, 2))
    data[30:, 0] = np.nan
    traj = Trajectory(dt=0.01, t0=0.0,
                      channels=["tie1.i.re", "tie1.i.im"], data=data,
                      diverged=True)
    cfg = TrainConfig(window_s=0.2, dt=0.01, variant="dp", max_iters=0)
    with pytest.raises(ValidationError):
        prepare_windows([(traj, part)], cfg, ["tie1.i.re", "tie1.i.im"],
                        feature_channels=[])


def test_loss_continuous_matches_hybrid_simulation():
    grid, part, _ = fixtures.linear_port_synth()
    scn = FaultScenario(fault_bus=1, t_fault=0.1, t_clear=0.16)
    full = simulate_full(grid, scn, SimConfig(dt=0.01, t_end=1.0),
                         partition=part)
    model = fresh_model([8, 6, 4], port_spec(), seed=11)
    cfg = TrainConfig(window_s=0.9, dt=0.01, variant="pi", max_iters=0)
    win = prepare_windows([(full, part)], cfg, tie_channels(part),
                          x_channels=machine_channels(grid, part))
    from neudye.simulator import internal_region
    _, region = internal_region(grid, part)
    sel = region.compile_selector(model.feature_spec)
    run = coupled_forward(region, sel, model, win, cfg)
    hyb = simulate_hybrid_pi(grid, part, model, scn,
                             SimConfig(dt=0.01, t_end=0.9,
                                       newton_tol=training.TRAIN_NEWTON_TOL,
                                       max_newton_iters=60))
    us = run.us[:, 0, :]
    hu = hyb.values(tie_channels(part))
    hx = hyb.values(machine_channels(grid, part))
    assert np.max(np.abs(us - hu)) < 1e-12
    assert np.max(np.abs(run.xs[:, 0, :] - hx)) < 1e-12


def test_adjoint_backward_entry_validation():
    model = scalar_model(THETA0)
    win, cfg = scalar_window(THETA0, 0.01, 50)
    run = training.teacher_forward(model, win, cfg)
    with pytest.raises(ValidationError):
        adjoint_backward(model, run, win, cfg, "pi")
    with pytest.raises(ValidationError):
        adjoint_backward(model, run, win, cfg, "nope")
    with pytest.raises(ValidationError):
        adjoint_backward(model, "not a run", win, cfg, "ex_only")
    adj = adjoint_backward(model, run, win, cfg, "ex_only")
    assert adj.g.shape == (6,)
    with pytest.raises(ValidationError):
        loss_continuous(model, [], cfg, "bogus")


# ---------------------------------------------------------------------------
# trainers end to end


def test_train_pi_zero_iterations_keeps_init():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=3, variant="pi",
                      max_iters=0)
    rep = train_pi_neudye(grid, part, dataset, cfg)
    assert rep.iterations == 0
    assert rep.loss_history == [] and not rep.converged
    assert np.array_equal(rep.model.theta,
                          neuralnet.init_params([8, 6, 4], seed=3))
    doc = rep.to_json_dict()
    assert set(doc) == {"loss_history", "grad_norm_history", "iterations",
                        "converged", "model", "meta"}


def test_train_variant_mismatch_rejected():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, variant="dp", max_iters=0)
    with pytest.raises(ValidationError):
        train_pi_neudye(grid, part, dataset, cfg)
    with pytest.raises(ValidationError):
        train_discrete_baseline(dataset, cfg)


def synthetic_affine_dataset():
    _, part = one_tie_grid()
    a = np.array([[-1.0, 0.4], [-0.3, -0.8]])
    b = np.array([[0.5, -0.2], [0.1, 0.3]])
    c = np.array([0.05, -0.02])
    h, n = 0.02, 250
    t = np.arange(n + 1) * h
    z = np.column_stack([0.1 * np.sin(2 * np.pi * t),
                         0.1 * np.cos(np.pi * t)])
    u = np.empty((n + 1, 2))
    u[0] = [0.2, -0.1]
    lhs = np.eye(2) - 0.5 * h * a
    for k in range(n):
        rhs = u[k] + 0.5 * h * (a @ u[k] + b @ (z[k] + z[k + 1]) + 2 * c)
        u[k + 1] = np.linalg.solve(lhs, rhs)
    traj = Trajectory(dt=h, t0=0.0,
                      channels=["tie1.i.re", "tie1.i.im",
                                "port1.v.re", "port1.v.im"],
                      data=np.column_stack([u, z]))
    return part, traj, (a, b, c), h, n


def test_discrete_baseline_recovers_affine_map():
    part, traj, (a, b, c), h, n = synthetic_affine_dataset()
    model = None
    for lr, iters in [(3e-2, 1200), (3e-3, 1200)]:
        cfg = TrainConfig(window_s=(n - 1) * h, dt=h, arch=[], seed=1,
                          variant="discrete", lr=lr, max_iters=iters,
                          tol=1e-30)
        rep = train_discrete_baseline([(traj, part)], cfg, model=model)
        model = rep.model
    assert rep.loss_history[-1] < 1e-7
    u, z = traj.data[:, :2], traj.data[:, 2:]
    got, _ = neuralnet.forward(model, u, z)
    want = u @ a.T + z @ b.T + c
    assert np.max(np.abs(got - want)) < 1e-3


def test_discrete_baseline_constant_data_zero_loss_at_zero_net():
    _, part = one_tie_grid()
    data = np.tile([0.3, -0.1, 1.0, 0.02], (60, 1))
    traj = Trajectory(dt=0.01, t0=0.0,
                      channels=["tie1.i.re", "tie1.i.im",
                                "port1.v.re", "port1.v.im"], data=data)
    cfg = TrainConfig(window_s=0.5, dt=0.01, arch=[8], seed=2,
                      variant="discrete", max_iters=1)
    zero = neuralnet.NeuralEquivalence(
        layer_sizes=[4, 8, 2], activation="tanh",
        feature_spec=["port1.v.re", "port1.v.im"],
        theta=np.zeros(4 * 8 + 8 + 8 * 2 + 2))
    rep = train_discrete_baseline([(traj, part)], cfg, model=zero)
    assert rep.loss_history[0] == 0.0


def test_sgd_descends_affine_least_squares():
    part, traj, _, h, n = synthetic_affine_dataset()
    cfg = TrainConfig(window_s=(n - 1) * h, dt=h, arch=[], seed=1,
                      variant="discrete", optimizer="sgd", lr=1e-3,
                      max_iters=60, tol=1e-30)
    rep = train_discrete_baseline([(traj, part)], cfg)
    diffs = np.diff(rep.loss_history)
    assert np.all(diffs <= 1e-12)
    assert rep.loss_history[-1] < rep.loss_history[0]


def test_divergent_model_aborts_training():
    grid, part, dataset = linear_fixture_dataset()
    spec = port_spec()
    w = np.zeros((4, 8))
    w[:, :4] = 60.0 * np.eye(4)
    bad = neuralnet.NeuralEquivalence(
        layer_sizes=[8, 4], activation="tanh", feature_spec=spec,
        theta=np.concatenate([w.ravel(), np.zeros(4)]))
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[], seed=2, variant="pi",
                      max_iters=50, lr=1e-4)
    rep = train_pi_neudye(grid, part, dataset, cfg, model=bad)
    assert rep.iterations == 10
    assert rep.loss_history == [training.DIVERGED_LOSS] * 10
    assert "aborted" in rep.meta
    assert not rep.converged


def test_convergence_tolerance_stops_early():
    part, traj, _, h, n = synthetic_affine_dataset()
    cfg = TrainConfig(window_s=(n - 1) * h, dt=h, arch=[], seed=1,
                      variant="discrete", lr=1e-9, max_iters=50, tol=1e3)
    rep = train_discrete_baseline([(traj, part)], cfg)
    assert rep.converged
    assert rep.iterations == 2


def test_training_is_bit_reproducible():
    grid, part, dataset = linear_fixture_dataset()
    cfg = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=4, variant="pi",
                      max_iters=5, lr=1e-3, batch=1)
    rep1 = train_pi_neudye(grid, part, dataset, cfg)
    cfg2 = TrainConfig(window_s=0.6, dt=0.01, arch=[6], seed=4, variant="pi",
                       max_iters=5, lr=1e-3, batch=1)
    rep2 = train_pi_neudye(grid, part, dataset, cfg2)
    assert rep1.loss_history == rep2.loss_history
    assert np.array_equal(rep1.model.theta, rep2.model.theta)
