"""End-to-end acceptance gate.

Each test exercises one published claim at its stated tolerance on the
reference setup (double integrator, one-sided truncated noise, window 10)
and prints a PASS line with the measured quantities.  The heavy pipeline
pieces (datasets, training, verification, the 200-run benchmark, the
stability audit) are built once per session and shared.
"""

import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest

from pdmhe import (
    CertBudget,
    SamplerConfig,
    TrainConfig,
    audit_trajectory,
    build_solution,
    build_stability_cert,
    dual_function,
    dual_gradient,
    forward,
    gen_dataset,
    grad,
    init_mlp,
    instance_stream,
    min_sample_size,
    mlp_dual_estimator,
    mlp_primal_estimator,
    oracle_dual_estimator,
    oracle_primal_estimator,
    project_half,
    sample_instance,
    simulate_trajectory,
    solve_dual,
    solve_primal,
    stable_variant,
    train,
    verify_dual,
    verify_primal,
    zero_primal_estimator,
)
from pdmhe.certify import clamp_primal
from pdmhe.model import BoxSet
from pdmhe.runtime import (
    BenchSetup,
    armse,
    example_system,
    rmse_per_step,
    run_benchmark,
    run_certified,
    summarize_benchmark,
)

GAMMA = 0.65
WINDOW = 10
T_RUN = 100
EPS, BETA = 0.05, 1e-6
DELTA_P = DELTA_D = 3.0

TIMINGS = {}


@pytest.fixture(scope="session")
def ref():
    model, noise = example_system()
    sampler = SamplerConfig(gamma=GAMMA, window_cap=WINDOW, P0=np.eye(2), prior0=np.zeros(2))
    budget = CertBudget.symmetric(eps=EPS, beta=BETA, delta_p=DELTA_P, delta_d=DELTA_D)
    return model, noise, sampler, budget


@pytest.fixture(scope="session")
def trained_nets(ref):
    model, noise, sampler, _ = ref
    tic = time.perf_counter()
    cfg = TrainConfig(epochs=400, batch_size=64, learning_rate=2e-3, momentum=0.9, seed=7, val_frac=0.1)
    ds_p = gen_dataset(model, noise, 2500, seed=1000, kind="primal", sampler=sampler)
    ds_d = gen_dataset(model, noise, 2500, seed=1001, kind="dual", sampler=sampler)
    net_p, _ = train(ds_p, cfg)
    net_d, _ = train(ds_d, cfg)
    TIMINGS["train"] = time.perf_counter() - tic
    return net_p, net_d


@pytest.fixture(scope="session")
def verification(ref, trained_nets):
    model, noise, sampler, budget = ref
    net_p, net_d = trained_nets
    tic = time.perf_counter()
    rep_p = verify_primal(
        mlp_primal_estimator(net_p), budget, instance_stream(model, noise, sampler, seed=2000),
        seed_info={"seed": 2000},
    )
    rep_d = verify_dual(
        mlp_dual_estimator(net_d), budget, instance_stream(model, noise, sampler, seed=2001),
        seed_info={"seed": 2001},
    )
    TIMINGS["verify"] = time.perf_counter() - tic
    return rep_p, rep_d


@pytest.fixture(scope="session")
def bench(ref, trained_nets, verification):
    model, noise, sampler, budget = ref
    rep_p, rep_d = verification
    assert rep_p.passed and rep_d.passed, "benchmark requires verified nets"
    net_p, net_d = trained_nets
    tic = time.perf_counter()
    setup = BenchSetup(
        model=model, noise=noise, gamma=GAMMA, window_cap=WINDOW,
        prior0=np.zeros(2), P0=np.eye(2), x0=np.zeros(2), T=T_RUN,
        delta=budget.delta, primal_net=net_p, dual_net=net_d,
    )
    records = run_benchmark(setup, seeds=range(5000, 5200))
    summary = summarize_benchmark(records)
    TIMINGS["bench"] = time.perf_counter() - tic
    return records, summary


class TestCriterion1:
    def test_duality_gap_closes_on_random_instances(self, ref):
        model, noise, sampler, _ = ref
        tic = time.perf_counter()
        worst = 0.0
        for draw in range(100):
            inst, _ = sample_instance(model, noise, sampler, (4000, draw))
            p = solve_primal(inst)
            d = solve_dual(inst)
            rel = abs(p.cost - d.value) / (1.0 + abs(p.cost))
            worst = max(worst, rel)
            assert rel <= 1e-6
        wall = time.perf_counter() - tic
        assert wall <= 120.0
        print(f"\nACCEPTANCE 1: PASS - worst relative duality gap {worst:.3e} over 100 instances in {wall:.1f}s")


class TestCriterion2:
    def test_accepted_checks_sound_under_exact_resolve(self, ref, trained_nets):
        model, noise, _, budget = ref
        net_p, net_d = trained_nets
        delta = budget.delta
        accepted = 0
        worst = -np.inf
        for seed in range(9000, 9015):
            traj = simulate_trajectory(model, noise, np.zeros(2), T_RUN, seed=seed)
            _, results, _, state = run_certified(
                model, noise, traj.measurements, GAMMA, WINDOW, np.zeros(2), np.eye(2),
                primal_net=net_p, dual_net=net_d, delta=delta, keep_instances=True,
            )
            for r, inst in zip(results, state.instances):
                if r.provenance != "learned":
                    continue
                star = solve_primal(inst)
                excess = r.cost - star.cost
                worst = max(worst, excess - delta)
                assert excess <= delta + 1e-9, f"certificate violated: excess {excess} > {delta}"
                accepted += 1
            if accepted >= 1200:
                break
        assert accepted >= 1000, f"needed >= 1000 accepted checks, got {accepted}"
        print(f"\nACCEPTANCE 2: PASS - {accepted} accepted checks, worst excess-minus-delta {worst:.3e}, zero violations")


class TestCriterion3:
    def test_benchmark_armse_reproduction(self, bench):
        _, summary = bench
        a_mhe = summary["mhe"]["armse"]
        a_pd = summary["pd-mhe"]["armse"]
        a_kf = summary["kf"]["armse"]
        assert 0.8 <= a_mhe <= 1.2
        assert a_pd <= a_mhe + 0.15
        assert a_kf >= 1.6
        total = TIMINGS.get("train", 0) + TIMINGS.get("verify", 0) + TIMINGS.get("bench", 0)
        assert total <= 1800.0, f"pipeline took {total:.0f}s, budget is 30 min"
        print(
            f"\nACCEPTANCE 3: PASS - ARMSE mhe={a_mhe:.4f} (in [0.8,1.2]), pd-mhe={a_pd:.4f} "
            f"(<= mhe+0.15), kf={a_kf:.4f} (>= 1.6); pipeline {total:.0f}s <= 1800s"
        )


class TestCriterion4:
    def test_speedup_ordering(self, bench):
        _, summary = bench
        t_pd = summary["pd-mhe"]["median_step_ms"]
        t_mhe = summary["mhe"]["median_step_ms"]
        assert t_pd < t_mhe
        ratio = t_mhe / t_pd
        assert ratio >= 2.0
        print(f"\nACCEPTANCE 4: PASS - median step pd-mhe {t_pd:.3f}ms < mhe {t_mhe:.3f}ms, ratio {ratio:.1f}x (>= 2)")


class TestCriterion5:
    def test_sample_size_formula(self):
        assert min_sample_size(0.05, 1e-6) == 270
        assert min_sample_size(0.01, 1e-6) == 1375
        getcontext().prec = 60
        for eps, beta, expected in [("0.05", "1e-6", 270), ("0.01", "1e-6", 1375)]:
            ratio = (Decimal(1) / Decimal(beta)).ln() / (Decimal(1) / (1 - Decimal(eps))).ln()
            assert min_sample_size(float(eps), float(beta)) == int(math.ceil(ratio))
            assert int(math.ceil(ratio)) == expected
        print("\nACCEPTANCE 5: PASS - minimum sample sizes 270 and 1375 match 60-digit evaluation")


class TestCriterion6:
    def test_oracle_passes_zero_fails(self, ref):
        model, noise, sampler, _ = ref
        tight = CertBudget.symmetric(eps=EPS, beta=BETA, delta_p=1e-6, delta_d=1e-6)
        rep_oracle = verify_primal(
            oracle_primal_estimator(), tight, instance_stream(model, noise, sampler, seed=2100)
        )
        assert rep_oracle.passed and rep_oracle.n_samples == min_sample_size(EPS / 2, BETA / 2)
        rep_zero = verify_primal(
            zero_primal_estimator(), tight, instance_stream(model, noise, sampler, seed=2101)
        )
        assert not rep_zero.passed
        rep_do = verify_dual(oracle_dual_estimator(), tight, instance_stream(model, noise, sampler, seed=2102))
        assert rep_do.passed
        print(
            f"\nACCEPTANCE 6a: PASS - oracle estimators verified at delta=1e-6 over N={rep_oracle.n_samples}; "
            f"zero estimator rejected (worst excess {rep_zero.worst_excess:.2f})"
        )

    def test_trained_nets_pass_and_fresh_violation_rate_bounded(self, ref, trained_nets, verification):
        model, noise, sampler, budget = ref
        rep_p, rep_d = verification
        assert rep_p.passed, f"primal verification failed: worst excess {rep_p.worst_excess}"
        assert rep_d.passed, f"dual verification failed: worst shortfall {rep_d.worst_shortfall}"
        net_p, net_d = trained_nets
        primal_est = mlp_primal_estimator(net_p)
        dual_est = mlp_dual_estimator(net_d)
        violations = 0
        n_test = 10_000
        for draw in range(n_test):
            inst, _ = sample_instance(model, noise, sampler, (3000, draw))
            x0_raw, xi_raw = primal_est(inst)
            x0, xi, _ = clamp_primal(inst, x0_raw, xi_raw)
            cand = build_solution(inst, x0, xi)
            star = solve_primal(inst)
            bad_primal = (cand.cost - star.cost > budget.delta_p) or (not inst.xi_set.contains(xi, 1e-8))
            g_hat = dual_function(dual_est(inst), inst)
            g_star = solve_dual(inst).value
            bad_dual = g_star - g_hat > budget.delta_d
            violations += int(bad_primal or bad_dual)
        rate = violations / n_test
        assert rate <= 2 * EPS, f"fresh violation rate {rate} exceeds 2*eps = {2 * EPS}"
        print(
            f"\nACCEPTANCE 6b: PASS - trained nets verified at N={rep_p.n_samples}/{rep_d.n_samples} "
            f"(worst excess {rep_p.worst_excess:.3f}, worst shortfall {rep_d.worst_shortfall:.3f}); "
            f"fresh 10^4-sample violation rate {rate:.4f} <= {2 * EPS}"
        )


class TestCriterion7:
    def test_backup_trigger_frequency(self, bench):
        records, summary = bench
        flags = []
        for rec in records:
            provs = rec.provenance["pd-mhe"]
            flags.extend(p == "backup" for t, p in enumerate(provs, start=1) if t >= WINDOW)
        rate = float(np.mean(flags))
        assert rate <= EPS + 0.02, f"reject rate {rate} above eps + 0.02"
        print(f"\nACCEPTANCE 7: PASS - online backup rate {rate:.4f} <= {EPS + 0.02} over 200 held-out runs")


@pytest.fixture(scope="session")
def audit_pipeline():
    """Stable sibling system where the stability hypotheses hold: frozen
    LMI-feasible weight, lambda_max = 1, rho = 4^(1/10) * 0.8 < 1."""
    model, noise = stable_variant()
    gamma_a, window = 0.8, 10
    P = 0.2 * np.eye(2)
    cert = build_stability_cert(model, noise.Q, noise.R, [P] * 40, gamma_a, window)
    sampler = SamplerConfig(gamma=gamma_a, window_cap=window, P0=P, prior0=np.zeros(2))
    cfg = TrainConfig(epochs=250, batch_size=64, learning_rate=2e-3, seed=11, val_frac=0.1)
    net_p, _ = train(gen_dataset(model, noise, 900, seed=7100, kind="primal", sampler=sampler), cfg)
    net_d, _ = train(gen_dataset(model, noise, 900, seed=7101, kind="dual", sampler=sampler), cfg)
    return model, noise, gamma_a, window, P, cert, net_p, net_d


class TestCriterion8:
    def test_stability_audit(self, audit_pipeline):
        model, noise, gamma_a, window, P, cert, net_p, net_d = audit_pipeline
        assert cert.lmi_ok and cert.satisfied and cert.lambda_max == pytest.approx(1.0, abs=1e-9)
        delta = 2 * DELTA_P
        prior0 = np.array([20.0, 0.0])  # deliberate initial estimation error
        worst_margin = np.inf
        for seed in range(7200, 7400):
            traj = simulate_trajectory(model, noise, np.zeros(2), 60, seed=seed)
            est, results, _, state = run_certified(
                model, noise, traj.measurements, gamma_a, window, prior0, P,
                primal_net=net_p, dual_net=net_d, delta=delta, riccati_policy="frozen",
            )
            report = audit_trajectory(
                traj, est, cert, delta=delta, weight_seq=state.weights, P0=P, Q=noise.Q,
                window_cap=window, provenance=[r.provenance for r in results],
            )
            worst_margin = min(worst_margin, report.worst_margin)
            assert report.passed, f"seed {seed}: bound violated, margin {report.worst_margin}"
        # negative control: an estimator that never leaves the (wrong) prior
        traj = simulate_trajectory(model, noise, np.zeros(2), 60, seed=7500)
        frozen = np.tile(prior0, (61, 1))
        control = audit_trajectory(traj, frozen, cert, delta=delta, weight_seq=[P] * 61, P0=P, Q=noise.Q, window_cap=window)
        assert not control.passed
        print(
            f"\nACCEPTANCE 8: PASS - error bound held on 200 audited runs (worst margin {worst_margin:.3f}); "
            f"negative control violated it (margin {control.worst_margin:.3f})"
        )


class TestCriterion9:
    def test_numerical_hygiene(self, ref):
        rng = np.random.default_rng(99)
        # backprop vs central differences on 50 random coordinates
        p = init_mlp((8, 16, 16, 5), seed=3)
        X, Y = rng.normal(size=(6, 8)), rng.normal(size=(6, 5))
        _, gs = grad(p, X, Y)
        eps = 1e-5
        for _ in range(50):
            li = int(rng.integers(len(p.weights)))
            r = int(rng.integers(p.weights[li].shape[0]))
            c = int(rng.integers(p.weights[li].shape[1]))
            wp = [w.copy() for w in p.weights]
            wm = [w.copy() for w in p.weights]
            wp[li][r, c] += eps
            wm[li][r, c] -= eps
            from pdmhe import MlpParams

            lp, _ = grad(MlpParams(p.layer_dims, tuple(wp), p.biases), X, Y)
            lm, _ = grad(MlpParams(p.layer_dims, tuple(wm), p.biases), X, Y)
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(gs[li][0][r, c]), 1e-8)
            assert abs(gs[li][0][r, c] - fd) / denom <= 1e-4

        # dual gradient vs central differences
        model, noise, sampler, _ = ref
        inst, _ = sample_instance(model, noise, sampler, (4100, 0))
        for _ in range(5):
            mu = rng.normal(size=WINDOW)
            g = dual_gradient(mu, inst)
            fd = np.empty(WINDOW)
            for i in range(WINDOW):
                e = np.zeros(WINDOW)
                e[i] = 1e-5
                fd[i] = (dual_function(mu + e, inst) - dual_function(mu - e, inst)) / 2e-5
            assert np.abs(g - fd).max() <= max(1e-6, 1e-4 * np.linalg.norm(g))

        # projection vs brute force on 100 random pairs
        from test_dual_core import brute_force_projection

        for _ in range(100):
            dim = int(rng.integers(1, 4))
            lo = rng.normal(size=dim) - rng.uniform(0.2, 2.0, size=dim)
            hi = lo + rng.uniform(0.3, 3.0, size=dim)
            lo[rng.random(dim) < 0.25] = -np.inf
            hi[rng.random(dim) < 0.25] = np.inf
            box = BoxSet(lo, hi)
            z = rng.normal(scale=3.0, size=dim)
            assert np.allclose(project_half(z, box), brute_force_projection(z, box), atol=1e-9)
        print("\nACCEPTANCE 9: PASS - backprop, dual gradient, and projection all match their independent oracles")
