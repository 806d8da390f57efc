# Copyright 2021 - 2023 Universität Tübingen, DKFZ, EMBL, and Universität zu Köln
# for the German Human Genome-Phenome Archive (GHGA)
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Tests for the HMC kernel, its adaptation and the pilot/short-chain protocol."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from numpy.testing import assert_allclose

from seqfa.core.hmc import (
    DualAveraging,
    HmcTuningConfig,
    adapt,
    hmc_step,
    initial_config,
    leapfrog,
    pilot_then_short_chains,
    run_chain,
    sample_posterior,
)
from seqfa.core.models import HmcConfig
from seqfa.ports.inbound.engine import SequentialEnginePort

SCALES = np.array([1.0, 0.5])


def gaussian_target(position: np.ndarray) -> tuple[float, np.ndarray]:
    """Independent normals with standard deviations SCALES."""
    return -0.5 * float(np.sum((position / SCALES) ** 2)), -position / SCALES**2


def standard_normal_target(position: np.ndarray) -> tuple[float, np.ndarray]:
    """A standard normal in any dimension."""
    return -0.5 * float(np.sum(position**2)), -position


def nowhere_target(position: np.ndarray) -> tuple[float, np.ndarray]:
    """Finite only at the origin, so every trajectory diverges."""
    if np.all(position == 0):
        return 0.0, np.zeros_like(position)
    return -np.inf, np.zeros_like(position)


def energy(position: np.ndarray, momentum: np.ndarray, mass: np.ndarray) -> float:
    """Hamiltonian of the Gaussian target."""
    return -gaussian_target(position)[0] + 0.5 * float(np.sum(mass * momentum**2))


def test_leapfrog_is_reversible():
    """Negating the momentum and integrating again returns to the start."""
    config = HmcConfig(step_size=0.1, n_leapfrog=25, mass_diag=(1.0, 2.0))
    start = np.array([0.3, -0.8])
    momentum = np.array([1.1, 0.4])

    forward = leapfrog(start, momentum, gaussian_target, config)
    backward = leapfrog(forward.position, -forward.momentum, gaussian_target, config)

    assert not forward.divergent
    assert_allclose(backward.position, start, atol=1e-10)
    assert_allclose(backward.momentum, -momentum, atol=1e-10)


def test_energy_error_is_second_order():
    """Halving the step size over the same trajectory length quarters the energy error."""
    start = np.array([0.9, 0.2])
    momentum = np.array([-0.4, 1.3])
    mass = np.ones(2)
    errors = []
    for step_size, n_steps in ((0.1, 10), (0.05, 20)):
        config = HmcConfig(step_size=step_size, n_leapfrog=n_steps, mass_diag=(1.0, 1.0))
        end = leapfrog(start, momentum, gaussian_target, config)
        errors.append(abs(energy(end.position, end.momentum, mass) - energy(start, momentum, mass)))

    assert 3.0 < errors[0] / errors[1] < 5.0


def test_divergent_trajectory_is_rejected():
    """A trajectory leaving the support is flagged and the chain stays put."""
    config = HmcConfig(step_size=0.5, n_leapfrog=3, mass_diag=(1.0,))
    start = np.zeros(1)
    result = hmc_step(start, nowhere_target, config, np.random.default_rng(0))

    assert result.divergent
    assert not result.accepted
    assert result.accept_prob == 0.0
    assert_allclose(result.position, start)


def test_dual_averaging_moves_towards_target():
    """Low acceptance shrinks the step size, high acceptance grows it."""
    shrinking = DualAveraging(1.0, 0.8)
    growing = DualAveraging(1.0, 0.8)
    for _ in range(50):
        shrinking.update(0.1)
        growing.update(1.0)

    assert shrinking.final_step_size < 1.0 < growing.final_step_size


def test_chain_samples_standard_normal():
    """An adapted chain reproduces the moments of its target."""
    rng = np.random.default_rng(1)
    tuning = HmcTuningConfig(n_leapfrog=10)
    config, start, stats = adapt(
        np.zeros(2), standard_normal_target, initial_config(2, tuning, 400), rng
    )
    draws, chain_stats = run_chain(start, standard_normal_target, config, 4000, rng)

    assert stats.n_steps == 400
    assert config.adapt_steps == 0
    assert chain_stats.accept_rate > 0.5
    assert_allclose(draws.mean(axis=0), 0.0, atol=0.1)
    assert_allclose(draws.var(axis=0), 1.0, atol=0.15)


def test_adaptation_learns_the_scales():
    """The adapted inverse metric tracks the target variances."""
    rng = np.random.default_rng(2)
    tuning = HmcTuningConfig(n_leapfrog=10)
    config, _, _ = adapt(np.zeros(2), gaussian_target, initial_config(2, tuning, 1000), rng)

    assert config.mass[0] > config.mass[1]


def test_run_chain_thinning():
    """Thinning keeps every thin-th state."""
    config = HmcConfig(step_size=0.3, n_leapfrog=5, mass_diag=(1.0, 1.0))
    draws, stats = run_chain(
        np.zeros(2), standard_normal_target, config, 30, np.random.default_rng(3), thin=5
    )

    assert draws.shape == (6, 2)
    assert stats.n_steps == 30


def test_pilot_then_short_chains_preserves_the_target():
    """Moving exact draws with the frozen kernel leaves their distribution invariant."""
    rng = np.random.default_rng(4)
    points = rng.standard_normal((500, 2))
    tuning = HmcTuningConfig(pilot_steps=200, short_steps=5, n_leapfrog=10)
    generators = [np.random.default_rng(100 + m) for m in range(500)]

    moved, report = pilot_then_short_chains(
        points, standard_normal_target, tuning, rng, generators
    )

    assert moved.shape == points.shape
    assert not np.allclose(moved, points)
    assert report.pilot.n_steps == 200
    assert report.short.n_steps == 500 * 5
    assert_allclose(moved.mean(axis=0), 0.0, atol=0.15)
    assert_allclose(moved.var(axis=0), 1.0, atol=0.2)


def test_short_steps_zero_keeps_points():
    """Without short chains the points are returned unchanged."""
    points = np.arange(6, dtype=float).reshape(3, 2)
    tuning = HmcTuningConfig(short_steps=0)
    moved, report = pilot_then_short_chains(
        points, standard_normal_target, tuning, np.random.default_rng(0), []
    )

    assert_allclose(moved, points)
    assert report.pilot.n_steps == 0


def test_short_chains_do_not_depend_on_the_executor():
    """Chains run in threads give exactly the same result as sequential chains."""
    points = np.random.default_rng(5).standard_normal((20, 3))
    tuning = HmcTuningConfig(pilot_steps=50, short_steps=4, n_leapfrog=6)

    def run(executor):
        return pilot_then_short_chains(
            points,
            standard_normal_target,
            tuning,
            np.random.default_rng(6),
            [np.random.default_rng(200 + m) for m in range(20)],
            executor,
        )[0]

    sequential = run(None)
    with ThreadPoolExecutor(max_workers=4) as executor:
        threaded = run(executor)

    assert_allclose(threaded, sequential)


def test_pilot_divergence_raises_tuning_failure():
    """A pilot chain that diverges everywhere cannot be tuned."""
    tuning = HmcTuningConfig(pilot_steps=20, short_steps=2, n_leapfrog=3)
    points = np.zeros((2, 1))
    generators = [np.random.default_rng(m) for m in range(2)]

    with pytest.raises(SequentialEnginePort.TuningFailureError) as error:
        pilot_then_short_chains(
            points, nowhere_target, tuning, np.random.default_rng(7), generators
        )
    assert error.value.divergence_rate == pytest.approx(1.0)
    assert error.value.n_steps == 20


def test_sample_posterior_returns_thinned_draws():
    """A batch run returns exactly the requested number of draws."""
    tuning = HmcTuningConfig(pilot_steps=100, batch_steps=300, n_leapfrog=8)
    draws, report = sample_posterior(
        np.zeros(2), standard_normal_target, tuning, 50, np.random.default_rng(8)
    )

    assert draws.shape == (50, 2)
    assert report.short.n_steps == 300
