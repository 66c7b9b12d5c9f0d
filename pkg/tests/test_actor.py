import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safefql import actor as act
from safefql import critics, flow, nn

from oracles import affine_params


def _affine_critics(q_r_w=(0, 0, 0, 0), q_r_b=0.0, q_c_w=(0, 0, 0, 0), q_c_b=-1.0):
    """Critics that are affine in (x, a); both twins of each kind are identical."""
    col = lambda w: np.array(w, dtype=np.float64)[:, None]  # noqa: E731
    return critics.CriticBundle(
        q_r=[affine_params(col(q_r_w), [q_r_b], f"q_r{i}") for i in (1, 2)],
        v_r=affine_params(np.zeros((2, 1)), [0.0], "v_r"),
        q_c=[affine_params(col(q_c_w), [q_c_b], f"q_c{i}") for i in (1, 2)],
        v_c=affine_params(np.zeros((2, 1)), [0.0], "v_c"))


def _zero_teacher():
    return flow.FlowTeacher(affine_params(np.zeros((5, 2)), [0.0, 0.0], "teacher"))


def _small_actor(seed=0, lam=1.0, dtype=np.float32):
    return act.OneStepActor(nn.mlp_init(nn.LayerSpec(4, (16, 16), 2), seed, dtype=dtype,
                                        name="actor"), lam)


def test_student_action_is_deterministic_and_projected():
    a = _small_actor()
    x, z = np.array([0.1, 0.2]), np.array([0.5, -0.5])
    np.testing.assert_array_equal(act.student_action(a, x, z), act.student_action(a, x, z))
    zero = act.OneStepActor(nn.mlp_init(nn.LayerSpec(4, (4,), 2), 0, zero=True))
    np.testing.assert_array_equal(act.student_action(zero, x, z), [0.0, 0.0])
    three_four = act.OneStepActor(affine_params(np.zeros((4, 2)), [3.0, 4.0], "actor"))
    np.testing.assert_allclose(act.student_action(three_four, x, z), [0.6, 0.8])


@pytest.mark.parametrize("q, expected", [(-0.01, 1), (0.0, 0), (0.3, 0)])
def test_gate_examples(q, expected):
    assert act.feasibility_gate(q) == expected


@settings(max_examples=100)
@given(q=st.floats(-10, 10), bump=st.floats(0, 5))
def test_gate_is_non_increasing(q, bump):
    assert act.feasibility_gate(q + bump) <= act.feasibility_gate(q)
    assert act.feasibility_gate(q) == (1 if q < 0 else 0)


def test_gated_objective_examples():
    assert act.gated_objective(0.5, 2.0, -0.1, 1.0) == pytest.approx(-1.5)
    assert act.gated_objective(0.5, 2.0, 0.3, 1.0) == pytest.approx(0.8)
    assert act.gated_objective(0.5, 2.0, 0.0, 1.0) == pytest.approx(0.5)


def test_naive_objective_examples():
    assert act.naive_objective(0.5, 2.0, -0.1, 1.0, 5.0) == pytest.approx(-1.5)
    assert act.naive_objective(0.5, 2.0, 0.3, 1.0, 5.0) == pytest.approx(0.0)
    assert act.naive_objective(0.5, 2.0, 0.3, 1.0, 0.0) == pytest.approx(-1.5)


def test_batch_losses_match_per_sample_objectives():
    rng = np.random.default_rng(0)
    bundle = _affine_critics(q_r_w=(0.3, -0.2, 1.0, 0.5), q_r_b=0.1,
                             q_c_w=(0.0, 0.0, 1.0, 0.0), q_c_b=-0.1)
    teacher, actor = _zero_teacher(), _small_actor(lam=0.7)
    x, z = rng.normal(size=(32, 2)), rng.normal(size=(32, 2))
    a = act.student_action(actor, x, z)
    raw = act.student_action(actor, x, z, project=False)
    distill = np.sum((raw - act.distill_target(teacher, x, z)) ** 2, axis=1)
    q_r, q_c = bundle.reward_q(x, a), bundle.safety_q(x, a)
    expected = np.mean(act.gated_objective(distill, q_r, q_c, 0.7))
    assert act.gated_actor_loss(x, z, actor, bundle, teacher) == pytest.approx(expected, rel=1e-5)
    naive = np.mean(act.naive_objective(distill, q_r, q_c, 0.7, 5.0))
    assert act.naive_lagrangian_loss(x, z, actor, bundle, teacher, eta=5.0) == \
        pytest.approx(naive, rel=1e-5)


def test_actor_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    spec = nn.LayerSpec(4, (8,), 1)
    bundle = critics.CriticBundle(
        q_r=[nn.mlp_init(spec, s, dtype=np.float64, name=f"q_r{s}") for s in (1, 2)],
        v_r=affine_params(np.zeros((2, 1)), [0.0]),
        q_c=[nn.mlp_init(spec, s, dtype=np.float64, name=f"q_c{s}") for s in (3, 4)],
        v_c=affine_params(np.zeros((2, 1)), [0.0]))
    teacher = flow.FlowTeacher(nn.mlp_init(nn.LayerSpec(5, (8,), 2), 5, dtype=np.float64))
    actor = _small_actor(seed=6, lam=0.5, dtype=np.float64)
    x, z = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
    for objective in ("gated", "naive"):
        actor.eta = 3.0
        info, grads = act.actor_loss(x, z, actor, bundle, teacher, objective=objective,
                                     need_grads=True)
        assert 0 < info.gate_open_fraction < 1
        h = 1e-7
        for layer in range(actor.net.n_layers):
            w = actor.net.weights[layer]
            for idx in list(np.ndindex(w.shape))[::7]:
                old = w[idx]
                w[idx] = old + h
                fp = act.actor_loss(x, z, actor, bundle, teacher, objective=objective).loss
                w[idx] = old - h
                fm = act.actor_loss(x, z, actor, bundle, teacher, objective=objective).loss
                w[idx] = old
                assert grads.weights[layer][idx] == pytest.approx((fp - fm) / (2 * h),
                                                                  rel=1e-4, abs=1e-7)


def test_safety_only_regime_reduces_the_hinge():
    # Q_c = 1 + a1 >= 0 on the disk, so the gate never opens
    bundle = _affine_critics(q_r_w=(0, 0, 0, 1), q_c_w=(0, 0, 1, 0), q_c_b=1.0)
    states = np.random.default_rng(0).uniform(-1, 1, (512, 2))
    cfg = act.ActorConfig(hidden=(16, 16), lam=0.01, steps=600, lr=1e-3, batch_size=64,
                          log_every=100)
    _, hist = act.train_actor(states, bundle, _zero_teacher(), cfg)
    safety = [row[4] for row in hist.rows]
    assert all(row[1] == 0.0 for row in hist.rows)
    assert all(b <= a + 1e-9 for a, b in zip(safety, safety[1:]))
    assert safety[-1] < 0.5 * safety[0]


def test_always_feasible_regime():
    bundle = _affine_critics(q_r_w=(0.2, 0, 1, 0), q_c_b=-2.0)
    states = np.random.default_rng(0).uniform(-1, 1, (256, 2))
    teacher = _zero_teacher()
    cfg = act.ActorConfig(hidden=(8,), steps=50, batch_size=32, log_every=10)
    actor, hist = act.train_actor(states, bundle, teacher, cfg)
    assert all(row[1] == 1.0 for row in hist.rows)
    assert all(row[4] == 0.0 for row in hist.rows)
    rng = np.random.default_rng(1)
    x, z = states[:20], rng.normal(size=(20, 2))
    a = act.student_action(actor, x, z)
    raw = act.student_action(actor, x, z, project=False)
    expected = actor.lam * np.mean(np.sum((raw - act.distill_target(teacher, x, z)) ** 2, axis=1)) \
        - np.mean(bundle.reward_q(x, a))
    assert act.gated_actor_loss(x, z, actor, bundle, teacher) == pytest.approx(expected, rel=1e-5)


def test_large_distillation_weight_copies_the_teacher():
    teacher = flow.init_teacher(flow.FlowConfig(hidden=(16,), seed=3))
    for w in teacher.net.weights:
        w *= 0.3
    bundle = _affine_critics(q_r_w=(0, 0, 1, 1), q_c_w=(0, 0, 0, 1), q_c_b=0.0)
    states = np.random.default_rng(0).uniform(-1, 1, (2048, 2))
    cfg = act.ActorConfig(hidden=(64, 64), lam=1e3, steps=3000, lr=1e-3, batch_size=128)
    actor, _ = act.train_actor(states, bundle, teacher, cfg)
    rng = np.random.default_rng(9)
    x, z = rng.uniform(-1, 1, (200, 2)), rng.normal(size=(200, 2))
    gap = np.linalg.norm(act.student_action(actor, x, z) - flow.one_step_teacher(teacher, x, z), axis=1)
    assert np.median(gap) < 0.05


def test_gate_exclusivity_is_instrumented():
    rng = np.random.default_rng(0)
    bundle = _affine_critics(q_r_w=(0, 0, 1, 0), q_c_w=(1, 0, 0.5, 0), q_c_b=0.0)
    cfg = act.ActorConfig(hidden=(8,), steps=40, batch_size=50)
    _, hist = act.train_actor(rng.uniform(-1, 1, (500, 2)), bundle, _zero_teacher(), cfg,
                              check_exclusivity=True)
    assert hist.exclusivity_checked == 2000 and hist.exclusivity_violations == 0
    assert 0 < hist.rows[-1][1] < 1


def test_deploy_is_one_forward_and_reproducible():
    a = _small_actor()
    with nn.counting_forwards() as c:
        out = act.deploy_action(a, np.array([0.1, 0.2]), np.random.default_rng(3))
    assert dict(c) == {"actor": 1}
    again = act.deploy_action(a, np.array([0.1, 0.2]), np.random.default_rng(3))
    np.testing.assert_array_equal(out, again)
    big = act.OneStepActor(affine_params(np.eye(4, 2) * 50, [0.0, 0.0], "actor"))
    batch = act.deploy_action(big, np.random.default_rng(0).normal(size=(100, 2)),
                              np.random.default_rng(1))
    assert np.all(np.linalg.norm(batch, axis=1) <= 1 + 1e-12)


CANDIDATES = np.array([[0.5, 0.0], [0.3, 0.1], [-0.4, 0.2], [0.2, -0.3]])


def test_rejection_sampling_picks_the_only_feasible_candidate():
    # zero velocity: candidates are the latents; Q_c = a1 marks only the third feasible
    bundle = _affine_critics(q_r_w=(0, 0, 1, 0), q_c_w=(0, 0, 1, 0), q_c_b=0.0)
    out = act.rejection_sampling_action(_zero_teacher(), bundle, [0.0, 0.0], 4, z=CANDIDATES)
    np.testing.assert_array_equal(out, CANDIDATES[2])


def test_rejection_sampling_single_and_all_feasible():
    infeasible = _affine_critics(q_c_b=1.0)
    out = act.rejection_sampling_action(_zero_teacher(), infeasible, [0.0, 0.0], 1, z=CANDIDATES[:1])
    np.testing.assert_array_equal(out, CANDIDATES[0])
    feasible = _affine_critics(q_r_w=(0, 0, 0, 1), q_c_b=-1.0)
    out = act.rejection_sampling_action(_zero_teacher(), feasible, [0.0, 0.0], 4, z=CANDIDATES)
    np.testing.assert_array_equal(out, CANDIDATES[2])


def test_rejection_sampling_falls_back_to_the_safest():
    bundle = _affine_critics(q_r_w=(0, 0, 1, 0), q_c_w=(0, 0, 0, 1), q_c_b=1.0)
    out = act.rejection_sampling_action(_zero_teacher(), bundle, [0.0, 0.0], 4, z=CANDIDATES)
    np.testing.assert_array_equal(out, CANDIDATES[3])


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_rejection_choice_is_invariant_to_reward_scale(scale, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=4)
    q_c_w = rng.normal(size=4)
    z = rng.normal(size=(8, 2))
    base = _affine_critics(q_r_w=w, q_c_w=q_c_w, q_c_b=0.0)
    scaled = _affine_critics(q_r_w=w * scale, q_c_w=q_c_w, q_c_b=0.0)
    x = rng.uniform(-1, 1, 2)
    np.testing.assert_array_equal(
        act.rejection_sampling_action(_zero_teacher(), base, x, 8, z=z),
        act.rejection_sampling_action(_zero_teacher(), scaled, x, 8, z=z))


def test_rejection_forward_counts():
    teacher = flow.init_teacher(flow.FlowConfig(hidden=(8,)))
    bundle = critics.init_critics(critics.CriticConfig(hidden=(8,)), seed=0)
    for n in (1, 4, 16):
        with nn.counting_forwards() as c:
            act.rejection_sampling_action(teacher, bundle, [0.0, 0.0], n, rng=np.random.default_rng(0))
        assert c["teacher"] == n * teacher.k_steps
        assert c["q_c1"] + c["q_c2"] + c["q_r1"] == 3 * n
        assert sum(c.values()) == n * teacher.k_steps + 3 * n


def test_batched_rejection_policy_matches_single_state_version():
    teacher = flow.init_teacher(flow.FlowConfig(hidden=(8,)))
    bundle = critics.init_critics(critics.CriticConfig(hidden=(8,)), seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    batched = act.rejection_policy(teacher, bundle, 4, 0.0, np.random.default_rng(7))(x)
    z = np.random.default_rng(7).standard_normal((5, 4, 2))
    single = np.stack([act.rejection_sampling_action(teacher, bundle, x[i], 4, z=z[i])
                       for i in range(5)])
    np.testing.assert_allclose(batched, single, atol=1e-6)


def test_rejection_needs_a_candidate():
    with pytest.raises(ValueError):
        act.rejection_sampling_action(_zero_teacher(), _affine_critics(), [0.0, 0.0], 0,
                                      rng=np.random.default_rng(0))


@pytest.mark.parametrize("bad", [dict(objective="soft"), dict(distill_target="half"),
                                 dict(lam=-1.0), dict(objective="naive", eta=0.0)])
def test_config_validation(bad):
    with pytest.raises(nn.ConfigError):
        act.ActorConfig(**bad).validate()
