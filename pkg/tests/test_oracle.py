import numpy as np
import pytest

from klflow.errors import DomainError, InputError
from klflow.oracle import (
    QuadratureGrid,
    TinyInstance,
    decoded_distribution,
    exact_posterior,
    exact_posterior_batch,
    exact_velocity,
    expected_clean_logits,
    integrate_exact_ode,
    posterior_grid,
    quadrature_posterior,
    transition_density,
    validate_optimal_denoiser,
)
from klflow.simplex import (
    SequenceState,
    canonicalize,
    kl_geodesic,
    path_velocity_simplex,
    smooth_onehot,
    smooth_onehot_logits,
    softmax,
)

INST2 = TinyInstance(vocab_size=2, seq_len=1, p1=[0.7, 0.3], beta=0.01)
INST3 = TinyInstance(vocab_size=3, seq_len=1, p1=[0.5, 0.3, 0.2], beta=0.01)

# posterior of token 0 at (p1=(0.7,0.3), beta=0.01, t=0.5, x_t=(0.6,0.4)),
# frozen from the pushforward quadrature at resolution 1e4 (first verified
# build); the analytic change-of-variables route agrees to ~1e-5
GOLDEN_POSTERIOR_060 = 0.9206557


def _state(probs, t):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return SequenceState(canonicalize(np.log(probs)), t=t)


class TestInstance:
    def test_p1_must_normalize(self):
        with pytest.raises(InputError):
            TinyInstance(vocab_size=2, seq_len=1, p1=[0.7, 0.7])

    def test_size_limits(self):
        with pytest.raises(InputError):
            TinyInstance(vocab_size=5, seq_len=1, p1=np.full(5, 0.2))

    def test_marginals_of_coupled_pair(self):
        # p1 puts mass only on (0,1) and (1,0)
        p1 = np.zeros(4)
        p1[0 * 2 + 1] = 0.6
        p1[1 * 2 + 0] = 0.4
        inst = TinyInstance(vocab_size=2, seq_len=2, p1=p1)
        np.testing.assert_allclose(inst.marginals(), [[0.6, 0.4], [0.4, 0.6]])


class TestExactPosterior:
    def test_t_zero_returns_data_marginals(self):
        post = exact_posterior(INST3, _state([0.2, 0.5, 0.3], t=0.0))
        np.testing.assert_allclose(post, [[0.5, 0.3, 0.2]], atol=0)

    def test_t_one_is_point_mass_on_decode(self):
        post = exact_posterior(INST3, _state([0.1, 0.8, 0.1], t=1.0))
        np.testing.assert_array_equal(post, [[0.0, 1.0, 0.0]])

    def test_deterministic_instance_posterior_constant(self):
        inst = TinyInstance(vocab_size=2, seq_len=1, p1=[1.0, 0.0], beta=0.01)
        for t in (0.1, 0.5, 0.9):
            for x in (0.05, 0.5, 0.95):
                post = exact_posterior(inst, _state([x, 1 - x], t=t))
                np.testing.assert_allclose(post, [[1.0, 0.0]], atol=1e-12)

    def test_rows_are_simplex_points(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            probs = rng.dirichlet(np.ones(3))
            post = exact_posterior(INST3, _state(probs, t=rng.uniform(0.05, 0.95)))
            assert abs(post.sum() - 1.0) < 1e-9
            assert post.min() >= 0

    def test_golden_value_and_quadrature_agreement(self):
        state = _state([0.6, 0.4], t=0.5)
        q3 = quadrature_posterior(INST2, state, 10**3, halfwidth=0.005)
        q4 = quadrature_posterior(INST2, state, 10**4, halfwidth=0.005)
        assert abs(q4[0, 0] - GOLDEN_POSTERIOR_060) < 1e-6
        assert np.abs(q4 - q3).max() < 1e-4  # self-convergence
        ana = exact_posterior(INST2, state)
        assert np.abs(ana - q4).max() < 2e-4  # independent-route agreement

    def test_quadrature_matches_analytic_v3(self):
        # V=3 pushforward quadrature is indicator-based, so it only resolves
        # the bulk (moderate t, central states); the sliver regime is covered
        # by the V=2 refined route and the cell-average reference
        grid = QuadratureGrid.build(3, 200)
        rng = np.random.default_rng(1)
        for _ in range(5):
            probs = np.full(3, 1 / 3) + 0.4 * (rng.dirichlet(np.ones(3)) - 1 / 3)
            state = _state(probs, t=rng.uniform(0.2, 0.5))
            quad = quadrature_posterior(INST3, state, 200, halfwidth=0.02, grid=grid)
            ana = exact_posterior(INST3, state)
            assert 0.5 * np.abs(quad - ana).sum() < 0.02

    def test_quadrature_resolves_sliver_preimages(self):
        # near-pure state at large t: the noise preimages are slivers that a
        # global grid would miss entirely; the locally refined grid must
        # still agree with the analytic route
        state = _state([0.9, 0.05, 0.05], t=0.85)
        quad = quadrature_posterior(INST3, state, 200, halfwidth=0.005)
        ana = exact_posterior(INST3, state)
        assert 0.5 * np.abs(quad - ana).sum() < 0.02

    def test_infeasible_box_has_zero_mass(self):
        # a box around (0.7, 0.7) holds no simplex point, so no candidate
        # can put mass there
        from klflow.oracle import QuadratureGrid, quadrature_transition_mass
        grid = QuadratureGrid.build(3, 50)
        for j in range(3):
            mass = quadrature_transition_mass(grid, j, 0.5, INST3.smoothing,
                                              np.array([0.7, 0.7]),
                                              np.array([0.75, 0.75]))
            assert mass == 0.0

    def test_cell_average_posterior_self_convergence(self):
        from klflow.oracle import cell_average_posterior
        lo, hi = np.array([4 / 12, 3 / 12]), np.array([5 / 12, 4 / 12])
        coarse = cell_average_posterior(INST3, lo, hi, 0.2, 0.3, resolution=12, t_nodes=8)
        fine = cell_average_posterior(INST3, lo, hi, 0.2, 0.3, resolution=24, t_nodes=16)
        assert np.abs(coarse - fine).max() < 1e-4

    def test_cell_average_interpolates_point_posterior(self):
        # as the cell shrinks around a point, the cell average approaches the
        # exact posterior at that point
        from klflow.oracle import cell_average_posterior
        center = np.array([0.4, 0.3])
        for half, tol in ((0.05, 0.05), (0.005, 0.005)):
            avg = cell_average_posterior(INST3, center - half, center + half,
                                         0.5 - half, 0.5 + half, resolution=16)
            point = exact_posterior(INST3, _state([0.4, 0.3, 0.3], t=0.5))
            assert np.abs(avg - point).max() < tol

    def test_posterior_concentrates_toward_t1(self):
        # move along the geodesic toward token 0's smoothed one-hot; the
        # winning margin is checked in log-odds because the posterior itself
        # saturates to 1.0 in float64 well before t=0.999
        from klflow.oracle import _position_log_likelihood
        x0 = np.array([0.45, 0.55])
        x1 = smooth_onehot(0, INST2.smoothing)
        margins, tops = [], []
        for t in (0.9, 0.99, 0.999):
            xt = kl_geodesic(x0, x1, t)
            state = _state(xt, t=t)
            terms = _position_log_likelihood(INST2, state.logits[None], t)[0, 0]
            log_odds = (np.log(INST2.p1[0]) + terms[0]) - (np.log(INST2.p1[1]) + terms[1])
            margins.append(log_odds)
            tops.append(exact_posterior(INST2, state).max())
        assert margins[0] < margins[1] < margins[2]
        assert tops[0] <= tops[1] <= tops[2]
        assert tops[-1] > 1 - 1e-12

    def test_pair_instance_couples_positions(self):
        # only sequences (0,1) and (1,0) exist: seeing position 0 near token 0
        # must push position 1 toward token 1
        p1 = np.zeros(4)
        p1[0 * 2 + 1] = 0.5
        p1[1 * 2 + 0] = 0.5
        inst = TinyInstance(vocab_size=2, seq_len=2, p1=p1, beta=0.01)
        probs = np.array([[0.95, 0.05], [0.5, 0.5]])
        state = SequenceState(canonicalize(np.log(probs)), t=0.7)
        post = exact_posterior(inst, state)
        assert post[0, 0] > 0.9          # position 0 is nearly decided
        assert post[1, 1] > 0.9          # so position 1 must be the other token
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)


class TestTransitionDensity:
    def test_integrates_to_one_v2(self):
        xs = np.linspace(1e-4, 1 - 1e-4, 20001)
        dens = np.array([transition_density(INST2, np.array([x, 1 - x]), 0, 0.5)
                         for x in xs])
        integral = np.trapezoid(dens, xs)
        assert abs(integral - 1.0) < 1e-3

    def test_integrates_to_one_v3(self):
        # midpoint rule on a peaked density: a few permille at this resolution
        grid = QuadratureGrid.build(3, 150)
        dens = np.array([
            transition_density(INST3, node, 1, 0.4) for node in grid.nodes])
        assert abs(float((dens * grid.weights).sum()) - 1.0) < 5e-3

    def test_rejects_endpoint_times(self):
        with pytest.raises(DomainError):
            transition_density(INST2, np.array([0.5, 0.5]), 0, 1.0)


class TestExactVelocity:
    def test_point_mass_posterior_gives_smoothed_logit(self):
        inst = TinyInstance(vocab_size=2, seq_len=1, p1=[1.0, 0.0], beta=0.01)
        state = _state([0.5, 0.5], t=0.5)
        e_l1 = expected_clean_logits(inst, state.logits[None], state.t)[0]
        np.testing.assert_allclose(
            e_l1, smooth_onehot_logits(np.array([0]), inst.smoothing), atol=1e-12)

    def test_uniform_posterior_symmetric(self):
        inst = TinyInstance(vocab_size=2, seq_len=1, p1=[0.5, 0.5], beta=0.01)
        e_l1 = expected_clean_logits(inst, _state([0.5, 0.5], 0.5).logits[None], 0.5)[0]
        assert abs(e_l1[0, 0] - e_l1[0, 1]) < 1e-12

    def test_expectation_unfolds_by_definition(self):
        state = _state([0.3, 0.2, 0.5], t=0.6)
        post = exact_posterior(INST3, state)
        table = INST3.clean_logit_table()
        manual = sum(post[0, j] * table[j] for j in range(3))
        e_l1 = expected_clean_logits(INST3, state.logits[None], 0.6)[0]
        np.testing.assert_allclose(e_l1[0], manual, atol=1e-12)

    def test_velocity_undefined_at_t1(self):
        with pytest.raises(DomainError):
            exact_velocity(INST2, _state([0.6, 0.4], t=1.0))

    def test_tower_identity_small_step(self):
        # pushing the logit velocity through the softmax Jacobian must match
        # the finite-difference motion of the simplex point under the flow
        state = _state([0.35, 0.65], t=0.4)
        vel = exact_velocity(INST2, state)
        eps = 1e-5
        l = canonicalize(state.logits)
        x_plus = softmax(l + eps * vel, axis=-1)
        x_minus = softmax(l - eps * vel, axis=-1)
        fd = (x_plus - x_minus) / (2 * eps)
        x_t = softmax(l, axis=-1)[0]
        analytic = path_velocity_simplex(x_t, np.zeros(2), vel[0])
        assert np.abs(fd[0] - analytic).max() < 1e-3


class TestExactOde:
    def test_deterministic_instance_always_decodes_target(self):
        inst = TinyInstance(vocab_size=2, seq_len=1, p1=[0.0, 1.0], beta=0.01)
        for steps in (1, 4, 32):
            decoded, _ = integrate_exact_ode(inst, 64, steps, np.random.default_rng(2))
            assert (decoded == 1).all()

    def test_decoded_distribution_approaches_p1(self):
        decoded, _ = integrate_exact_ode(INST2, 20000, 64, np.random.default_rng(3))
        dist = decoded_distribution(decoded, INST2)
        tv = 0.5 * np.abs(dist - INST2.p1).sum()
        assert tv < 0.05

    def test_coarser_grid_does_not_blow_up(self):
        d256, _ = integrate_exact_ode(INST2, 20000, 256, np.random.default_rng(4))
        d128, _ = integrate_exact_ode(INST2, 20000, 128, np.random.default_rng(4))
        tv256 = 0.5 * np.abs(decoded_distribution(d256, INST2) - INST2.p1).sum()
        tv128 = 0.5 * np.abs(decoded_distribution(d128, INST2) - INST2.p1).sum()
        assert tv128 <= tv256 + 0.02

    def test_final_state_near_smoothed_corner(self):
        _, states = integrate_exact_ode(INST2, 16, 64, np.random.default_rng(5))
        probs = softmax(states, axis=-1)
        assert probs.max(axis=-1).min() > 0.9


class TestQuadratureGrid:
    def test_weights_sum_to_simplex_volume_v2(self):
        grid = QuadratureGrid.build(2, 200)
        assert abs(grid.weights.sum() - 1.0) < 1e-6

    def test_weights_sum_to_simplex_volume_v3(self):
        grid = QuadratureGrid.build(3, 60)
        assert abs(grid.weights.sum() - 0.5) < 1e-6

    def test_nodes_strictly_interior(self):
        for v, r in ((2, 200), (3, 60)):
            grid = QuadratureGrid.build(v, r)
            assert grid.nodes.min() > 1e-6
            np.testing.assert_allclose(grid.nodes.sum(axis=1), 1.0, atol=1e-12)

    def test_v4_not_supported(self):
        with pytest.raises(InputError):
            QuadratureGrid.build(4, 10)


class TestValidateOptimalDenoiser:
    class UniformDenoiser:
        def __init__(self, v, s):
            self.v, self.s = v, s

        def predict_probs(self, state):
            return np.full((self.s, self.v), 1.0 / self.v)

    class OracleDenoiser:
        def __init__(self, inst):
            self.inst = inst

        def predict_probs(self, state):
            return exact_posterior(self.inst, state)

    def test_uniform_denoiser_fails_on_skewed_instance(self):
        report = validate_optimal_denoiser(INST3, self.UniformDenoiser(3, 1),
                                           num_times=5, points_per_time=10)
        assert report["mean_tv"] > 0.1

    def test_oracle_denoiser_is_perfect(self):
        report = validate_optimal_denoiser(INST3, self.OracleDenoiser(INST3),
                                           num_times=5, points_per_time=10)
        assert report["mean_tv"] < 1e-12
        assert report["max_tv"] < 1e-12

    def test_grid_is_deterministic(self):
        a = posterior_grid(INST3, 4, 10)
        b = posterior_grid(INST3, 4, 10)
        assert len(a) == len(b) == 40
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.logits, sb.logits)
            assert sa.t == sb.t


def test_generative_sampler_matches_marginal_statistics():
    rng = np.random.default_rng(6)
    states, t, targets = INST3.sample_generative(20000, rng)
    freq = np.bincount(targets[:, 0], minlength=3) / targets.shape[0]
    assert 0.5 * np.abs(freq - INST3.p1).sum() < 0.02
    assert states.shape == (20000, 1, 3)
    # high-t states should sit near the smoothed one-hot of their target
    hi = t > 0.95
    probs = softmax(states[hi], axis=-1)
    agree = (np.argmax(probs[:, 0, :], axis=-1) == targets[hi, 0]).mean()
    assert agree > 0.95
