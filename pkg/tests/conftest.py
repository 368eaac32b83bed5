import numpy as np
import pytest

from pdmhe import (
    BoxSet,
    NoiseSpec,
    SamplerConfig,
    SystemModel,
    TrainConfig,
    build_info_vector,
    gen_dataset,
    make_instance,
    simulate_trajectory,
    train,
)


def _double_integrator():
    model = SystemModel(np.array([[1.0, 0.1], [0.0, 1.0]]), np.array([[1.0, 0.0]]))
    noise = NoiseSpec(
        Q=0.01 * np.eye(2),
        R=np.array([[1.0]]),
        xi_set=BoxSet.nonnegative(2),
        zeta_set=BoxSet.nonpositive(1),
    )
    return model, noise


@pytest.fixture(scope="session")
def tiny_nets():
    """Small nets trained once per session, good enough to exercise the
    certified runtime (not meant to pass the full verification budgets)."""
    model, noise = _double_integrator()
    sampler = SamplerConfig(gamma=0.65, window_cap=10, P0=np.eye(2), prior0=np.zeros(2))
    cfg = TrainConfig(epochs=150, batch_size=64, learning_rate=2e-3, seed=7)
    net_p, _ = train(gen_dataset(model, noise, 300, seed=1000, kind="primal", sampler=sampler), cfg)
    net_d, _ = train(gen_dataset(model, noise, 300, seed=1001, kind="dual", sampler=sampler), cfg)
    return net_p, net_d


@pytest.fixture
def double_integrator():
    return _double_integrator()


def window_instance(model, noise, *, seed=7, t=15, window_cap=10, gamma=0.65, prior=None, P0=None):
    """One solved-window instance drawn from a simulated run."""
    prior = np.zeros(model.n) if prior is None else prior
    P0 = np.eye(model.n) if P0 is None else P0
    traj = simulate_trajectory(model, noise, np.zeros(model.n), t, seed=seed)
    iv = build_info_vector(traj.measurements, model, prior, P0, t=t, window_cap=window_cap)
    return make_instance(iv, gamma, noise), traj


@pytest.fixture
def example_instance(double_integrator):
    model, noise = double_integrator
    inst, traj = window_instance(model, noise)
    return inst, traj
