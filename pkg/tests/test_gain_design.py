import math

import numpy as np
import pytest

from lpobs.control_law import perturbation_sigma
from lpobs.gain_design import (CascadeOverflowError, CertificateError,
                               GainCertificate, bounded_real_certificate,
                               build_F, cascade_margins, coupling_column,
                               design_K, error_loop_transform,
                               estimate_auxiliary_bounds, gain_cascade,
                               gain_cascade_thresholds, is_hurwitz,
                               loop_gain_sweep, lyapunov_solve,
                               saturation_level, weighted_innovation_matrix)
from lpobs.normal_form import PlantState, prime_B
from lpobs.observer import ObserverGains, error_coordinates
from lpobs.plants import PAPER_VX_MATRIX, default_gamma
from lpobs.sampling import BoxSampler, SublevelSampler, quadratic_form_box


class TestDesignK:
    def test_second_order_half_poles(self):
        assert np.array_equal(design_K(2, [-0.5, -0.5]), [0.25, 1.0])

    def test_third_order_half_poles(self):
        assert np.array_equal(design_K(3, [-0.5, -0.5, -0.5]), [0.125, 0.75, 1.5])

    def test_first_order(self):
        assert np.array_equal(design_K(1, [-1.0]), [1.0])

    def test_nonnegative_pole_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            design_K(2, [-1.0, 0.0])

    def test_achieved_poles_match(self, rng):
        for _ in range(25):
            r = int(rng.integers(1, 6))
            poles = -rng.uniform(0.2, 4.0, size=r)
            K = design_K(r, poles)
            A = np.eye(r, k=1)
            A[-1, :] -= K
            achieved = np.sort(np.linalg.eigvals(A).real)
            assert np.max(np.abs(achieved - np.sort(poles))) < 1e-8


class TestBuildF:
    def test_paper_channels_hurwitz(self, paper_gamma):
        assert is_hurwitz(build_F(paper_gamma[0]))
        assert is_hurwitz(build_F(paper_gamma[1]))

    def test_zero_gains_not_hurwitz(self):
        assert not is_hurwitz(build_F(np.zeros((2, 2))))

    def test_determinant_equals_gain_product(self, paper_gamma):
        # the constant characteristic coefficient is the gamma2 product
        assert np.linalg.det(build_F(paper_gamma[0])) == pytest.approx(4.6 * 1.533,
                                                                       rel=1e-12)
        assert np.linalg.det(build_F(paper_gamma[1])) == pytest.approx(
            4.6 * 1.533 * 0.511, rel=1e-12)


class TestGainCascade:
    def test_paper_pair(self):
        ell = gain_cascade([12.5, 1.0], 200.0, (2, 3))
        assert np.allclose(ell, [5e5, 200.0], rtol=1e-14)

    def test_single_channel(self):
        assert np.allclose(gain_cascade([3.0], 10.0, (2,)), [30.0])

    def test_equal_orders_unit_exponent(self):
        assert np.allclose(gain_cascade([1.0, 1.0], 7.0, (2, 2)), [7.0, 7.0])

    def test_monotone_in_kappa(self):
        lo = gain_cascade([2.0, 1.0], 50.0, (2, 3))
        hi = gain_cascade([2.0, 1.0], 80.0, (2, 3))
        assert np.all(hi > lo)

    def test_log_linear_exponents(self):
        # slope of ln(ell_i) against ln(kappa) recovers the integer exponents
        kappas = np.linspace(10.0, 1000.0, 12)
        logs = np.array([np.log(gain_cascade([1.0, 2.0, 1.0], k, (2, 2, 4))) for k in kappas])
        slopes = [np.polyfit(np.log(kappas), logs[:, i], 1)[0] for i in range(3)]
        assert slopes == pytest.approx([3.0, 3.0, 1.0], abs=1e-9)

    def test_overflow_guard(self):
        with pytest.raises(CascadeOverflowError):
            gain_cascade([1e100, 1e100], 1e100, (2, 12))


class TestLyapunovSolve:
    def test_scalar(self):
        assert lyapunov_solve(np.array([[-1.0]]), np.array([[2.0]]))[0, 0] \
            == pytest.approx(1.0, rel=1e-12)

    def test_identity_pair(self):
        P = lyapunov_solve(-np.eye(2), np.eye(2))
        assert np.allclose(P, 0.5 * np.eye(2), atol=1e-12)

    def test_paper_blocks(self, paper_gamma):
        for G in paper_gamma:
            F = build_F(G)
            P = lyapunov_solve(F, np.eye(F.shape[0]))
            assert np.min(np.linalg.eigvalsh(P)) > 0
            assert np.linalg.norm(P @ F + F.T @ P + np.eye(F.shape[0])) < 1e-9

    def test_unstable_matrix_rejected(self):
        with pytest.raises(CertificateError):
            lyapunov_solve(np.array([[1.0, 0.0], [0.0, -1.0]]), np.eye(2))


class TestErrorLoopTransform:
    def test_constant_coefficient_identity(self, paper_gamma):
        tr = error_loop_transform(paper_gamma[0])
        assert tr.minpoly[-1] == pytest.approx(4.6 * 1.533, rel=1e-8)

    def test_random_gains_invertible(self, rng):
        for _ in range(25):
            r = int(rng.integers(2, 5))
            G = rng.uniform(0.2, 5.0, size=(r, 2))
            tr = error_loop_transform(G)
            assert abs(np.linalg.det(tr.T)) > 1e-12

    def test_triangular_sparsity_pattern(self, paper_gamma):
        for G in paper_gamma:
            tr = error_loop_transform(G)
            r = tr.order
            n = 2 * r
            allowed = np.zeros((n, n), dtype=bool)
            for k in range(1, n):
                allowed[k - 1, k] = True          # superdiagonal chain
            for k in range(1, r + 1):
                allowed[k - 1, k - 1] = True      # damped top rows
            for k in range(1, r):
                allowed[r + k - 1, r - k] = True  # anti-diagonal feedback
            allowed[n - 1, 0] = True
            off_pattern = np.where(allowed, 0.0, np.abs(tr.F_bar))
            assert off_pattern.max() < 1e-9

    def test_input_output_shape(self, paper_gamma):
        tr = error_loop_transform(paper_gamma[1])
        expect_G = np.zeros(6)
        expect_G[-1] = -tr.gamma2_product
        assert np.allclose(tr.G_bar, expect_G, atol=1e-12)
        assert np.allclose(tr.H_bar, prime_B(6)[::-1], atol=1e-12)   # e_1 row

    def test_static_gain_is_unity(self, paper_gamma):
        # |transfer at s=0| = (gamma2 product) / constant coefficient = 1
        for G in paper_gamma:
            tr = error_loop_transform(G)
            g0 = abs(tr.H_bar @ np.linalg.solve(-tr.F_bar, tr.G_bar))
            assert g0 == pytest.approx(1.0, rel=1e-12)


class TestLoopGainSweep:
    def test_paper_peaks_below_bound(self, paper_gamma):
        mu0 = 1.0 / 3.0
        for G in paper_gamma:
            peak, w_star = loop_gain_sweep(error_loop_transform(G))
            assert peak < 1.0 / mu0
            assert peak >= 1.0 - 1e-6       # static gain 1 is a lower bound

    def test_first_channel_peak_value(self, paper_gamma):
        peak, _ = loop_gain_sweep(error_loop_transform(paper_gamma[0]))
        assert peak == pytest.approx(1.06295, abs=2e-4)


class TestBoundedRealCertificate:
    def test_paper_channels(self, paper_gamma, rng):
        transforms = [error_loop_transform(G) for G in paper_gamma]
        br = bounded_real_certificate(transforms, 1.0 / 3.0, rng, n_samples=2000,
                                      n_delta=8)
        assert np.all(br.lambdas > 0)
        assert br.worst_sample_slack <= 0
        for P in br.P_blocks:
            assert np.min(np.linalg.eigvalsh(P)) > 0

    def test_sign_symmetry_of_combined_form(self, paper_gamma, rng):
        transforms = [error_loop_transform(G) for G in paper_gamma]
        br = bounded_real_certificate(transforms, 1.0 / 3.0, rng, n_samples=500,
                                      n_delta=4)
        F_blocks = [build_F(G) for G in paper_gamma]
        M0 = np.zeros((10, 10))
        M0[:4, :4] = br.P_blocks[0] @ F_blocks[0] + F_blocks[0].T @ br.P_blocks[0]
        M0[4:, 4:] = br.P_blocks[1] @ F_blocks[1] + F_blocks[1].T @ br.P_blocks[1]
        PG = np.zeros((10, 2))
        PG[:4, 0] = br.P_blocks[0] @ prime_B(4)
        PG[4:, 1] = br.P_blocks[1] @ prime_B(6)
        H = np.zeros((2, 10))
        H[0, 1] = 1.533      # gamma2 of the last channel-1 block, on eta2_{1,1}
        H[0, 2] = -1.533     # and on eta1_{1,2}
        H[1, 7] = 0.511
        H[1, 8] = -0.511
        lam = np.diag([br.lambdas[0]] * 4 + [br.lambdas[1]] * 6)
        for _ in range(10):
            D = rng.normal(size=(2, 2))
            D *= (1.0 / 3.0) / np.linalg.norm(D, 2)
            for sign in (1.0, -1.0):
                M = M0 + PG @ (sign * D) @ H + (PG @ (sign * D) @ H).T + lam
                assert np.linalg.eigvalsh(M).max() <= 1e-10

    def test_tiny_mu0_reduces_to_lyapunov_decay(self, paper_gamma, rng):
        transforms = [error_loop_transform(paper_gamma[0])]
        br = bounded_real_certificate(transforms, 1e-3, rng, n_samples=200, n_delta=2)
        assert br.lambdas[0] > 0

    def test_inconsistent_mu0_rejected(self, paper_gamma, rng):
        # the loop gain peak is ~1.063, so mu0 = 0.97 demands a bound below it
        transforms = [error_loop_transform(paper_gamma[0])]
        with pytest.raises(CertificateError, match="loop gain"):
            bounded_real_certificate(transforms, 0.97, rng, n_samples=100, n_delta=2)


class TestErrorDynamicsStructure:
    """The coupling columns and the weighted-innovation matrix reproduce the
    finite-difference derivative of the rescaled errors along the flow."""

    def test_coupling_column_pattern(self, paper_plant, rng):
        for ell in (1.0, 3.0, 17.0):
            y = rng.normal(size=2)
            col = coupling_column(paper_plant, 2, 1, ell, y)
            d = np.cos(y[0])
            expect = np.zeros(6)
            expect[1] = expect[2] = ell ** 2 * d   # 2 r_1 - 3 = 1 leading zero
            assert np.allclose(col, expect, rtol=1e-14)

    def test_rescaled_error_derivative_identity(self, paper_plant, paper_cfg,
                                                paper_gamma, rng):
        """d(eta_tilde)/dt == ell F eta~ + sum_j L_kj sigma~_j + B sigma_dot,
        checked against a finite difference of the definition along the
        coupled flow with the input held constant."""
        from lpobs.normal_form import plant_rhs
        from lpobs.observer import ObserverState, observer_rhs

        idx = paper_plant.indices
        gains = ObserverGains(gamma=paper_gamma, ell=np.array([6.0, 3.0]))
        F_blocks = [build_F(G) for G in paper_gamma]
        h = 1e-6

        def eta_tilde_at(state, eta, u):
            return error_coordinates(paper_plant, paper_cfg, gains, state, eta, u).flat()

        for _ in range(20):
            z = rng.normal(size=7) * 0.6
            ef = rng.normal(size=10) * 0.6
            u = rng.normal(size=2) * 0.5

            def step(sign):
                state = PlantState.from_flat(idx, z)
                eta = ObserverState.from_flat(idx.r, ef)
                # one Euler micro-step of the joint flow at frozen input
                ds = plant_rhs(paper_plant, state, u).flat()
                de = observer_rhs(paper_plant, paper_cfg, gains, eta, state.y, u).flat()
                state2 = PlantState.from_flat(idx, z + sign * h * ds)
                eta2 = ObserverState.from_flat(idx.r, ef + sign * h * de)
                return eta_tilde_at(state2, eta2, u)

            fd = (step(+1.0) - step(-1.0)) / (2 * h)

            state = PlantState.from_flat(idx, z)
            eta = ObserverState.from_flat(idx.r, ef)
            et = eta_tilde_at(state, eta, u)
            sig_t = np.array([et[2 * sum(idx.r[:k]) - 1] for k in (1, 2)])
            # sigma_dot by finite differences of the definition along the flow
            ds = plant_rhs(paper_plant, state, u).flat()
            sp = perturbation_sigma(paper_plant, paper_cfg,
                                    PlantState.from_flat(idx, z + h * ds), u)
            sm = perturbation_sigma(paper_plant, paper_cfg,
                                    PlantState.from_flat(idx, z - h * ds), u)
            sigma_dot = (sp - sm) / (2 * h)
            y = state.y
            analytic = np.zeros(10)
            analytic[:4] = gains.ell[0] * (F_blocks[0] @ et[:4]) \
                + prime_B(4) * sigma_dot[0]
            analytic[4:] = gains.ell[1] * (F_blocks[1] @ et[4:]) \
                + coupling_column(paper_plant, 2, 1, gains.ell[1], y) * sig_t[0] \
                + prime_B(6) * sigma_dot[1]
            assert np.max(np.abs(fd - analytic)) < 5e-4 * max(1.0, np.max(np.abs(analytic)))

    def test_weighted_innovation_consistency(self, paper_plant, paper_gamma, rng):
        # rows of J agree with the weighted first-component error dynamics
        idx = paper_plant.indices
        gains = ObserverGains(gamma=paper_gamma, ell=np.array([9.0, 2.0]))
        F_blocks = [build_F(G) for G in paper_gamma]
        from lpobs.observer import lambda_weights
        w = lambda_weights(gains)
        for _ in range(25):
            et = rng.normal(size=10)
            y = rng.normal(size=2)
            sig1 = et[3]
            full = np.zeros(10)
            full[:4] = gains.ell[0] * (F_blocks[0] @ et[:4])
            full[4:] = gains.ell[1] * (F_blocks[1] @ et[4:]) \
                + coupling_column(paper_plant, 2, 1, gains.ell[1], y) * sig1
            lhs = full[0::2] / w
            J = weighted_innovation_matrix(paper_plant, gains, y)
            assert np.allclose(lhs, J @ et, rtol=1e-12, atol=1e-12)

    def test_weighted_innovation_bounded_in_ell(self, paper_plant, paper_gamma, rng):
        norms = []
        for ell1 in (1.0, 10.0, 1e3, 1e6):
            gains = ObserverGains(gamma=paper_gamma, ell=np.array([ell1, max(1.0, ell1 / 10)]))
            J = weighted_innovation_matrix(paper_plant, gains, rng.normal(size=2))
            norms.append(np.linalg.norm(J, 2))
        assert max(norms) < 10.0


def paper_region_sampler(level=3.0):
    lo, hi = quadratic_form_box(PAPER_VX_MATRIX, level)
    return SublevelSampler(vx=lambda x: float(x @ PAPER_VX_MATRIX @ x), level=level,
                           box=BoxSampler(lo, hi), label="paper-region")


class TestAuxiliaryBounds:
    def test_paper_values(self, paper_plant, paper_cfg, paper_gains_ci, rng):
        aux = estimate_auxiliary_bounds(paper_plant, paper_cfg, paper_gains_ci,
                                        paper_region_sampler(), 160, rng)
        # |cos| <= 1 under the Euclidean pair weighting gives sqrt(2) <= iota
        assert aux.iota[(2, 1)] <= math.sqrt(2.0) * 1.05 + 1e-12
        assert aux.iota[(2, 1)] >= 1.40
        assert 2.0 < aux.delta2 < 8.0
        assert 0.0 < aux.delta1 < 1e3

    def test_zero_multipliers_zero_iota(self, paper_cfg, rng):
        from lpobs.normal_form import PlantModel, StructureIndices
        idx = StructureIndices(m=2, n0=0, r=(2, 3))
        plant = PlantModel(indices=idx, f0=lambda x0, xi, u: np.zeros(0),
                           a=lambda x: np.zeros(2), b=lambda x: np.eye(2))
        gains = ObserverGains(gamma=[default_gamma(2), default_gamma(3)],
                              ell=np.array([4.0, 2.0]))
        box = BoxSampler(-np.ones(5), np.ones(5))
        aux = estimate_auxiliary_bounds(plant, paper_cfg, gains, box, 32, rng)
        assert aux.iota[(2, 1)] == 0.0

    def test_constant_nominal_plant_zero_delta1(self, paper_cfg, rng):
        # a = 0 and b = Bhat leave nothing in the derivative bound
        from lpobs.normal_form import PlantModel, StructureIndices
        idx = StructureIndices(m=2, n0=0, r=(2, 3))
        plant = PlantModel(indices=idx, f0=lambda x0, xi, u: np.zeros(0),
                           a=lambda x: np.zeros(2), b=lambda x: np.eye(2))
        gains = ObserverGains(gamma=[default_gamma(2), default_gamma(3)],
                              ell=np.array([4.0, 2.0]))
        box = BoxSampler(-np.ones(5), np.ones(5))
        aux = estimate_auxiliary_bounds(plant, paper_cfg, gains, box, 32, rng)
        assert aux.delta1 == 0.0


class TestSaturationLevel:
    def test_trivial_level_one(self, paper_cfg, rng):
        # sampling only the zero chain state leaves nothing to dominate
        from lpobs.normal_form import PlantModel, StructureIndices
        idx = StructureIndices(m=2, n0=2, r=(2, 3))
        plant = PlantModel(indices=idx, f0=lambda x0, xi, u: np.zeros(2),
                           a=lambda x: np.zeros(2), b=lambda x: np.eye(2))
        box = BoxSampler(np.r_[-np.ones(2), np.zeros(5)], np.r_[np.ones(2), np.zeros(5)])
        est = saturation_level(plant, paper_cfg, box, 1.0 / 3.0, 100, rng)
        assert est.level == 1.0 and est.raw_sup == 0.0

    def test_paper_region_estimate(self, paper_plant, paper_cfg, rng):
        est = saturation_level(paper_plant, paper_cfg, paper_region_sampler(),
                               1.0 / 3.0, 4000, rng)
        assert 2.5 < est.raw_sup < 3.4      # sampled sup of |a + K xi|
        assert 4.0 <= est.level <= 8.0      # minimal admissible level
        assert est.level <= 25.0            # the shipped design level is safe

    def test_mu0_scaling(self, paper_plant, paper_cfg):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        lo = saturation_level(paper_plant, paper_cfg, paper_region_sampler(),
                              1.0 / 3.0, 500, rng1)
        hi = saturation_level(paper_plant, paper_cfg, paper_region_sampler(),
                              2.0 / 3.0, 500, rng2)
        assert hi.sup_term == pytest.approx(2.0 * lo.sup_term, rel=1e-12)


class TestCascadeThresholds:
    def test_single_channel_closed_form(self):
        lam, rho0 = 0.7, 2.3
        res = gain_cascade_thresholds([lam], [1.0], {}, rho0, (2,))
        g = 2.0 / lam + 1.0
        mu = lam * g * g / 2.0 - g
        assert res.g[0] == pytest.approx(g, rel=1e-12)
        assert res.theta_star == pytest.approx(max(1.0, math.sqrt(rho0 / mu)), rel=1e-12)

    def test_zero_rho0_threshold_is_one(self):
        res = gain_cascade_thresholds([0.5], [1.0], {}, 0.0, (2,))
        assert res.theta_star == 1.0

    def test_two_channel_hand_values(self):
        res = gain_cascade_thresholds([1.0, 1.0], [1.0, 1.0], {(2, 1): 1.0}, 1.0, (2, 3))
        assert res.g[1] == pytest.approx(3.0)
        assert res.mu[1] == pytest.approx(1.5)
        # doubling search from 1: mu_1(g1) = (g1^2/4) 81 - 2*81 - 9 g1 > 0 at g1 = 4
        assert res.g[0] == pytest.approx(4.0)
        assert res.mu[0] == pytest.approx(0.25 * 16 * 81 - 2 * 81 - 36)
        assert res.theta_star == 1.0

    def test_margins_nonnegative_above_threshold(self):
        lam = [1.0, 1.0]
        iota = {(2, 1): 1.0}
        res = gain_cascade_thresholds(lam, [1.0, 1.0], iota, 1.0, (2, 3))
        for kappa in np.linspace(res.theta_star, 10 * res.theta_star, 100):
            psi = cascade_margins(lam, [1.0, 1.0], iota, 1.0, (2, 3), res.g, kappa)
            assert np.min(psi) >= -1e-9


class TestGainCertificateRoundTrip:
    def test_serialize_verify(self, paper_gamma, rng):
        transforms = [error_loop_transform(G) for G in paper_gamma]
        br = bounded_real_certificate(transforms, 1.0 / 3.0, rng, n_samples=500,
                                      n_delta=4)
        P_norms = [float(np.linalg.norm(P, 2)) for P in br.P_blocks]
        iota = {(2, 1): math.sqrt(2.0) * 1.05}
        rho0 = float(np.min(br.lambdas)) * max(P_norms) ** 2 * (1 / 3.0) ** 2 \
            * 1.6817 ** 2 * 4.5 ** 2 / 8.0
        th = gain_cascade_thresholds(br.lambdas, P_norms, iota, rho0, (2, 3))
        ell = gain_cascade(th.g, th.theta_star, (2, 3))
        eigs = np.concatenate([np.linalg.eigvalsh(P) for P in br.P_blocks])
        cert = GainCertificate(
            P_blocks=br.P_blocks, lambdas=br.lambdas, mu0=1 / 3.0, iota=iota,
            delta1=20.0, delta2=4.5, rho0=rho0,
            rho1=8.0 * 20.0 ** 2 * max(P_norms) ** 2 / float(np.min(br.lambdas)),
            g=th.g, theta_star=th.theta_star, kappa=max(th.theta_star, 1.0),
            ell=ell, alpha1=float(eigs.min()), alpha2=float(eigs.max()),
            orders=(2, 3))
        cert.verify()
        back = GainCertificate.from_dict(cert.as_dict())
        assert back.theta_star == cert.theta_star
        assert np.allclose(back.P_blocks[0], cert.P_blocks[0])
        assert back.iota == cert.iota


class TestCompactErrorDynamics:
    """The full compact form of the rescaled error dynamics,

        d(eta~)/dt = F_big L_ell eta~ + G Delta0 H L_ell eta~
                     + G Delta0 K J eta~ + G Delta1,

    evaluated along the *actual* closed loop (feedback control, perturbation
    derivative eliminated through Delta0/Delta1), must match a finite
    difference of the recorded rescaled errors.  This exercises every piece
    of the stability machinery at once.
    """

    def test_identity_along_closed_loop(self, paper_plant, paper_cfg, paper_gamma):
        import numpy as np
        from lpobs.control_law import satv_jacobian
        from lpobs.normal_form import PlantState, plant_rhs, prime_B
        from lpobs.observer import (ObserverState, extract_estimates,
                                    lambda_weights)
        from lpobs.simulator import IntegratorConfig, simulate_closed_loop

        plant, cfg = paper_plant, paper_cfg
        idx = plant.indices
        gains = ObserverGains(gamma=paper_gamma, ell=np.array([6.0, 3.0]))
        dt = 1e-4
        x0 = PlantState(x0=np.array([0.8, 0.6]),
                        xi=[np.array([0.05, -0.05]), np.array([0.3, -0.2, 0.1])])
        traj = simulate_closed_loop(plant, cfg, gains, x0, None,
                                    IntegratorConfig(dt=dt, t_final=0.4,
                                                     record_stride=1),
                                    waive_certificate=True,
                                    record_eta_tilde=True)
        F_blocks = [build_F(G) for G in paper_gamma]
        Hrows = []
        for G in paper_gamma:
            r = G.shape[0]
            row = np.zeros(2 * r)
            row[2 * (r - 1) - 1] = G[r - 1, 1]
            row[2 * r - 2] = -G[r - 1, 1]
            Hrows.append(row)
        w = lambda_weights(gains)

        checked = 0
        for i in range(200, 3800, 450):
            fd = (traj.eta_tilde[i + 1] - traj.eta_tilde[i - 1]) / (2 * dt)
            z = np.concatenate([traj.x0[i], traj.xi[i]])
            state = PlantState.from_flat(idx, z)
            eta = ObserverState.from_flat(idx.r, traj.eta[i])
            et = traj.eta_tilde[i]
            u = traj.u[i]
            # saturation argument straight from the estimates
            xi_hat, sigma_hat = extract_estimates(eta)
            arg = sigma_hat + cfg.stabilizing_term(xi_hat)
            Delta0 = (plant.b_eval(z) - cfg.Bhat) @ cfg.Bhat_inv \
                @ satv_jacobian(arg, cfg.sat_level, cfg.eps0)
            xdot = plant_rhs(plant, state, u).flat()
            h = 1e-6 / max(1.0, float(np.linalg.norm(xdot)))
            a_dot = (plant.a_eval(z + h * xdot) - plant.a_eval(z - h * xdot)) / (2 * h)
            b_dot = (plant.b_eval(z + h * xdot) - plant.b_eval(z - h * xdot)) / (2 * h)
            Delta1 = a_dot + b_dot @ u \
                - Delta0 @ cfg.stabilizing_term(xdot[idx.n0:])
            J = weighted_innovation_matrix(plant, gains, state.y)
            sig_t = np.array([et[2 * sum(idx.r[:k]) - 1] for k in (1, 2)])
            # channel-wise F L eta~ plus coupling columns
            compact = np.zeros(10)
            compact[:4] = gains.ell[0] * (F_blocks[0] @ et[:4])
            compact[4:] = gains.ell[1] * (F_blocks[1] @ et[4:]) \
                + coupling_column(plant, 2, 1, gains.ell[1], state.y) * sig_t[0]
            HL = np.array([gains.ell[0] * (Hrows[0] @ et[:4]),
                           gains.ell[1] * (Hrows[1] @ et[4:])])
            drive = Delta0 @ HL + Delta0 @ cfg.stabilizing_term(J @ et) + Delta1
            compact[:4] += prime_B(4) * drive[0]
            compact[4:] += prime_B(6) * drive[1]
            scale = max(1.0, float(np.max(np.abs(compact))))
            # measured mismatch is ~3e-7 (finite-difference limited)
            assert np.max(np.abs(fd - compact)) < 1e-5 * scale
            checked += 1
        assert checked >= 5
