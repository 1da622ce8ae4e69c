import numpy as np
import pytest
from scipy import stats

from cmidrl import envs
from cmidrl.errors import ConfigurationError, UsageError


def test_table_at_095_matches_the_stated_cells():
    table = envs.CorrelationSpec(0.95, "train").joint_table()
    assert table[0, 0] == pytest.approx(0.475)   # A, blue
    assert table[0, 1] == pytest.approx(0.025)   # A, green
    assert table[1, 1] == pytest.approx(0.475)
    assert table[1, 0] == pytest.approx(0.025)


@pytest.mark.parametrize("rho", [0.5, 0.7, 0.9, 0.99, 1.0])
@pytest.mark.parametrize("phase", envs.PHASES)
def test_tables_are_distributions_with_equiprobable_variants(rho, phase):
    table = envs.CorrelationSpec(rho, phase).joint_table()
    assert np.all(table >= 0)
    assert table.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(table.sum(axis=1), [0.5, 0.5])


def test_rho_half_is_the_uncorrelated_table():
    np.testing.assert_allclose(envs.CorrelationSpec(0.5, "train").joint_table(),
                               envs.CorrelationSpec(0.9, "uncorrelated").joint_table())


def test_reversed_equals_train_with_colours_swapped():
    train = envs.CorrelationSpec(0.9, "train").joint_table()
    rev = envs.CorrelationSpec(0.9, "reversed").joint_table()
    np.testing.assert_allclose(rev, train[:, ::-1])


def test_invalid_specs_rejected():
    with pytest.raises(ConfigurationError):
        envs.CorrelationSpec(0.3)
    with pytest.raises(ConfigurationError):
        envs.CorrelationSpec(0.9, "sideways")


def _frequencies(spec, n, seed):
    rng = np.random.default_rng(seed)
    counts = np.zeros((2, 2))
    for _ in range(n):
        v, c = envs.sample_episode_factors(spec, rng)
        counts[envs.VARIANTS.index(v), ("blue", "green").index(c)] += 1
    return counts


def test_monte_carlo_frequencies_at_09():
    spec = envs.CorrelationSpec(0.9)
    freq = _frequencies(spec, 100_000, 3) / 100_000
    assert np.max(np.abs(freq - spec.joint_table())) < 0.01


@pytest.mark.parametrize("phase", envs.PHASES)
def test_chi_square_on_10k_episodes(phase):
    spec = envs.CorrelationSpec(0.8, phase)
    counts = _frequencies(spec, 10_000, 11).ravel()
    expected = spec.joint_table().ravel() * 10_000
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_zero_action_from_rest_keeps_position():
    s = envs.initial_state("A", "blue")
    nxt, r, done = envs.step(s, 0.0)
    assert nxt.position == 0.0 and nxt.velocity == 0.0
    assert r == pytest.approx(-abs(0.0 - envs.GOAL))
    assert not done


def test_variants_respond_with_opposite_signs():
    a, _, _ = envs.step(envs.initial_state("A", "blue"), 1.0)
    b, _, _ = envs.step(envs.initial_state("B", "blue"), 1.0)
    assert a.velocity == pytest.approx(envs.GAIN["A"] * envs.DT)
    assert b.velocity == pytest.approx(-a.velocity)
    assert b.position == pytest.approx(-a.position)


def test_actions_are_clipped():
    s = envs.initial_state("A", "blue")
    assert envs.step(s, 7.0)[0] == envs.step(s, 1.0)[0]


def test_step_after_done_is_a_usage_error():
    s = envs.initial_state("A", "blue", horizon=2)
    s, _, _ = envs.step(s, 0.0)
    s, _, done = envs.step(s, 0.0)
    assert done
    with pytest.raises(UsageError):
        envs.step(s, 0.0)


def test_kinematics_stay_in_bounds(rng):
    s = envs.initial_state("B", "green")
    while not s.done:
        s, _, _ = envs.step(s, rng.uniform(-1, 1) * 3)
        assert envs.POS_BOUNDS[0] <= s.position <= envs.POS_BOUNDS[1]
        assert envs.VEL_BOUNDS[0] <= s.velocity <= envs.VEL_BOUNDS[1]


def test_colour_never_affects_dynamics_or_reward(rng):
    actions = rng.uniform(-1, 1, size=100)
    for variant in envs.VARIANTS:
        s1 = envs.initial_state(variant, "blue")
        s2 = envs.initial_state(variant, (0.3, 0.1, 0.9))
        for a in actions:
            s1, r1, _ = envs.step(s1, a)
            s2, r2, _ = envs.step(s2, a)
            assert (s1.position, s1.velocity, r1) == (s2.position, s2.velocity, r2)


def test_variant_changes_trajectory():
    ra, ta = envs.rollout(lambda s: 0.5, ("A", "blue"))
    rb, tb = envs.rollout(lambda s: 0.5, ("B", "blue"))
    assert [s.position for s, _, _ in ta] != [s.position for s, _, _ in tb]


def _reference_return(actions, gain):
    # independent straight-line simulator
    pos = vel = 0.0
    total = 0.0
    for a in actions:
        a = min(max(a, -1.0), 1.0)
        vel = min(max(vel + gain * a * 0.05, -2.0), 2.0)
        pos = pos + vel * 0.05
        if pos <= -1.0 or pos >= 1.0:
            pos = min(max(pos, -1.0), 1.0)
            vel = 0.0
        total += -abs(pos - 0.8)
    return total


def test_random_policy_returns_match_reference_simulator():
    rng = np.random.default_rng(5)
    ours, ref = [], []
    for ep in range(1000):
        variant = envs.VARIANTS[ep % 2]
        acts = rng.uniform(-1, 1, size=100)
        it = iter(acts)
        ours.append(envs.rollout(lambda s: next(it), (variant, "blue"))[0])
        ref.append(_reference_return(acts, 1.0 if variant == "A" else -1.0))
    assert abs(np.mean(ours) - np.mean(ref)) < 1e-9


def test_pinned_reference_returns():
    # oracle controller, wrong-sign controller and zero action
    assert envs.rollout(envs.oracle_action, ("A", "blue"))[0] == pytest.approx(
        envs.ORACLE_RETURN, abs=1e-9)
    assert envs.rollout(envs.oracle_action, ("B", "green"))[0] == pytest.approx(
        envs.ORACLE_RETURN, abs=1e-9)
    wrong = envs.rollout(lambda s: -envs.oracle_action(s), ("A", "blue"))[0]
    assert wrong < -150
    assert envs.ORACLE_RETURN > -14


def test_factor_render_definition():
    s = envs.initial_state("A", "blue")
    np.testing.assert_array_equal(envs.render(s, "factor"), [0.0, 0.2, 0.0, 0.0, 1.0])


def test_greyscale_collapses_to_luminance():
    s = envs.initial_state("B", "green")
    obs = envs.render(s, "factor", greyscale=True)
    np.testing.assert_allclose(obs[2:], [0.587] * 3)


@pytest.mark.parametrize("pos", [-1.0, -0.55, 0.0, 0.3, 0.97, 1.0])
def test_wider_variant_lights_more_pixels(pos):
    a = envs.render(envs.FactorState("A", envs.BLUE, position=pos), "image16")
    b = envs.render(envs.FactorState("B", envs.BLUE, position=pos), "image16")
    lit = lambda img: int((img.reshape(16, 16, 3).sum(axis=2) > 0).sum())  # noqa: E731
    assert lit(b) > lit(a)


def test_image_pixels_in_unit_interval_and_black_background():
    img = envs.render(envs.FactorState("B", envs.GREEN, position=0.4), "image16")
    assert img.shape == (768,)
    assert img.min() >= 0 and img.max() <= 1
    grid = img.reshape(16, 16, 3)
    assert grid[:6].sum() == 0 and grid[10:].sum() == 0
    assert grid[..., 0].sum() == 0 and grid[..., 2].sum() == 0


def test_rendering_is_deterministic():
    s = envs.FactorState("A", (0.2, 0.4, 0.6), position=0.123)
    assert envs.render(s, "image16").tobytes() == envs.render(s, "image16").tobytes()


def test_env_keeps_factors_fixed_within_episode(rng):
    env = envs.PointMassEnv(envs.CorrelationSpec(0.5), rng=rng)
    for _ in range(5):
        env.reset()
        first = (env.state.variant, env.state.colour)
        done = False
        while not done:
            _, _, done, info = env.step(rng.uniform(-1, 1))
            assert (info["state"].variant, info["state"].colour) == first


def test_trace_csv(tmp_path):
    _, trace = envs.rollout(envs.oracle_action, ("B", "green"), horizon=5)
    path = tmp_path / "trace.csv"
    envs.write_trace_csv(path, trace)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("episode,step,variant,colour")
    assert len(lines) == 6


def test_colour_grid_has_216_colours():
    grid = envs.colour_grid(6)
    assert len(grid) == 216 == len(set(grid))
    assert (0.0, 0.0, 1.0) in grid and (0.0, 1.0, 0.0) in grid


def test_pinned_random_return():
    rng = np.random.default_rng(8)
    rets = [envs.rollout(lambda s: rng.uniform(-1, 1), (envs.VARIANTS[i % 2], "blue"))[0]
            for i in range(2000)]
    se = np.std(rets) / np.sqrt(len(rets))
    assert abs(np.mean(rets) - envs.RANDOM_RETURN) < 4 * se
