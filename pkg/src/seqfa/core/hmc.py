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

"""Hamiltonian Monte Carlo with a diagonal metric and the pilot/short-chain protocol.

Targets are callables returning the log density and its gradient at an unconstrained
point. The number of leapfrog steps of each transition is drawn uniformly from
1..n_leapfrog.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from pydantic import Field
from pydantic_settings import BaseSettings

from seqfa.core.models import ChainStats, HmcConfig
from seqfa.ports.inbound.engine import SequentialEnginePort

log = logging.getLogger(__name__)

LogDensityAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

DIVERGENCE_THRESHOLD = 1000.0
MASS_REGULARIZATION = 1e-3


class HmcTuningConfig(BaseSettings):
    """Config parameters of the jitter and batch HMC runs."""

    pilot_steps: int = Field(
        500,
        ge=0,
        description="Length of the adaptive pilot chain run on the first particle.",
    )
    short_steps: int = Field(
        10,
        ge=0,
        description="Length of the chains run on every particle with frozen tuning.",
    )
    n_leapfrog: int = Field(
        32, ge=1, description="Maximum number of leapfrog steps per transition."
    )
    target_accept: float = Field(
        0.8, gt=0, lt=1, description="Acceptance rate targeted by dual averaging."
    )
    batch_steps: int = Field(
        2000,
        ge=1,
        description="Length of the batch chain used to initialize the particles.",
    )
    max_pilot_divergence: float = Field(
        0.5,
        gt=0,
        le=1,
        description="Largest tolerated share of divergent pilot transitions.",
    )


@dataclass(frozen=True)
class LeapfrogState:
    """End point of a leapfrog trajectory."""

    position: np.ndarray
    momentum: np.ndarray
    log_density: float
    grad: np.ndarray
    divergent: bool


@dataclass(frozen=True)
class StepResult:
    """Outcome of one HMC transition."""

    position: np.ndarray
    log_density: float
    grad: np.ndarray
    accepted: bool
    accept_prob: float
    divergent: bool
    energy_error: float


@dataclass(frozen=True)
class JitterReport:
    """Tuning and diagnostics of one pilot-then-short-chains run."""

    config: HmcConfig
    pilot: ChainStats
    short: ChainStats


def kinetic_energy(momentum: np.ndarray, mass_diag: np.ndarray) -> float:
    """0.5 p^T M^-1 p, with mass_diag being the diagonal of M^-1."""
    return 0.5 * float(np.sum(mass_diag * momentum**2))


def leapfrog(
    position: np.ndarray,
    momentum: np.ndarray,
    target: LogDensityAndGrad,
    config: HmcConfig,
    n_steps: Optional[int] = None,
    start: Optional[tuple[float, np.ndarray]] = None,
) -> LeapfrogState:
    """Integrate Hamilton's equations with `n_steps` (default n_leapfrog) leapfrog steps.

    `start` may carry the log density and gradient at `position` to save one
    evaluation. Integration stops early at the first non-finite value.
    """
    n_steps = config.n_leapfrog if n_steps is None else n_steps
    step_size = config.step_size
    mass = config.mass
    log_density, grad = target(position) if start is None else start
    position = np.array(position, dtype=float)
    momentum = np.array(momentum, dtype=float)
    for _ in range(n_steps):
        momentum = momentum + 0.5 * step_size * grad
        position = position + step_size * mass * momentum
        log_density, grad = target(position)
        if not (np.isfinite(log_density) and np.all(np.isfinite(grad))):
            return LeapfrogState(position, momentum, -np.inf, grad, divergent=True)
        momentum = momentum + 0.5 * step_size * grad
    return LeapfrogState(position, momentum, float(log_density), grad, divergent=False)


def hmc_step(
    position: np.ndarray,
    target: LogDensityAndGrad,
    config: HmcConfig,
    rng: np.random.Generator,
    current: Optional[tuple[float, np.ndarray]] = None,
) -> StepResult:
    """One Metropolis-corrected HMC transition.

    Divergent trajectories (non-finite values or an energy error above
    DIVERGENCE_THRESHOLD) are always rejected.
    """
    mass = config.mass
    log_density, grad = target(position) if current is None else current
    momentum = rng.standard_normal(position.size) / np.sqrt(mass)
    n_steps = int(rng.integers(1, config.n_leapfrog + 1))
    uniform = rng.uniform()

    end = leapfrog(position, momentum, target, config, n_steps, (log_density, grad))
    energy_error = np.inf
    if not end.divergent:
        energy_error = (kinetic_energy(end.momentum, mass) - end.log_density) - (
            kinetic_energy(momentum, mass) - log_density
        )
    divergent = end.divergent or not np.isfinite(energy_error)
    divergent = divergent or abs(energy_error) > DIVERGENCE_THRESHOLD
    accept_prob = 0.0 if divergent else float(min(1.0, np.exp(-energy_error)))

    if not divergent and uniform < accept_prob:
        return StepResult(
            end.position, end.log_density, end.grad, True, accept_prob, False, energy_error
        )
    return StepResult(
        np.array(position, dtype=float),
        log_density,
        grad,
        False,
        accept_prob,
        divergent,
        float(energy_error),
    )


class DualAveraging:
    """Step size adaptation towards a target acceptance probability."""

    def __init__(
        self,
        initial_step_size: float,
        target_accept: float,
        gamma: float = 0.05,
        t0: float = 10.0,
        kappa: float = 0.75,
    ):
        self.mu = np.log(10.0 * initial_step_size)
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_step = np.log(initial_step_size)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.iteration = 0

    def update(self, accept_prob: float) -> float:
        """Feed one acceptance probability and return the next step size."""
        self.iteration += 1
        weight = 1.0 / (self.iteration + self.t0)
        self.h_bar = (1.0 - weight) * self.h_bar + weight * (
            self.target_accept - accept_prob
        )
        self.log_step = self.mu - np.sqrt(self.iteration) * self.h_bar / self.gamma
        avg_weight = self.iteration ** (-self.kappa)
        self.log_step_bar = (
            avg_weight * self.log_step + (1.0 - avg_weight) * self.log_step_bar
        )
        return float(np.exp(self.log_step))

    @property
    def final_step_size(self) -> float:
        """The averaged step size used once adaptation is over."""
        return float(np.exp(self.log_step_bar))


def find_reasonable_step_size(
    position: np.ndarray,
    target: LogDensityAndGrad,
    mass_diag: np.ndarray,
    rng: np.random.Generator,
    initial: float = 0.1,
) -> float:
    """Double or halve a single-leapfrog step until the acceptance crosses 1/2."""
    log_density, grad = target(position)
    momentum = rng.standard_normal(position.size) / np.sqrt(mass_diag)
    config = HmcConfig(step_size=initial, n_leapfrog=1, mass_diag=tuple(mass_diag))

    def log_accept(step_size: float) -> float:
        trial = config.model_copy(update={"step_size": step_size})
        end = leapfrog(position, momentum, target, trial, 1, (log_density, grad))
        if end.divergent:
            return -np.inf
        return float(
            end.log_density
            - kinetic_energy(end.momentum, mass_diag)
            - log_density
            + kinetic_energy(momentum, mass_diag)
        )

    step_size = initial
    direction = 1.0 if log_accept(step_size) > np.log(0.5) else -1.0
    for _ in range(50):
        candidate = step_size * 2.0**direction
        crossed = (direction > 0 and log_accept(candidate) <= np.log(0.5)) or (
            direction < 0 and log_accept(candidate) > np.log(0.5)
        )
        step_size = candidate
        if crossed:
            break
    return float(step_size)


def _regularized_variance(samples: np.ndarray) -> np.ndarray:
    n_samples = samples.shape[0]
    variance = np.var(samples, axis=0, ddof=1)
    shrink = n_samples / (n_samples + 5.0)
    return shrink * variance + MASS_REGULARIZATION * (5.0 / (n_samples + 5.0))


def adapt(
    position: np.ndarray,
    target: LogDensityAndGrad,
    config: HmcConfig,
    rng: np.random.Generator,
) -> tuple[HmcConfig, np.ndarray, ChainStats]:
    """Tune step size and diagonal mass over `config.adapt_steps` transitions.

    The first half adapts the step size by dual averaging, the third quarter also
    collects draws for the mass estimate, and the last quarter re-adapts the step
    size under the new mass. The returned config has adaptation switched off.
    """
    n_steps = config.adapt_steps
    position = np.array(position, dtype=float)
    if n_steps == 0:
        return config, position, ChainStats(final_step_size=config.step_size)

    mass = config.mass
    step_size = find_reasonable_step_size(position, target, mass, rng, config.step_size)
    averaging = DualAveraging(step_size, config.target_accept)
    current = target(position)
    window_start, window_end = n_steps // 2, (3 * n_steps) // 4
    window: list[np.ndarray] = []
    stats = ChainStats()

    for it in range(n_steps):
        if it == window_end and len(window) >= 3:
            mass = _regularized_variance(np.stack(window))
            step_size = find_reasonable_step_size(position, target, mass, rng, step_size)
            averaging = DualAveraging(step_size, config.target_accept)
        trial = config.model_copy(
            update={"step_size": step_size, "mass_diag": tuple(mass)}
        )
        result = hmc_step(position, target, trial, rng, current)
        position, current = result.position, (result.log_density, result.grad)
        stats = stats.merge(
            ChainStats(
                n_steps=1,
                n_accepted=int(result.accepted),
                n_divergent=int(result.divergent),
            )
        )
        step_size = averaging.update(result.accept_prob)
        if window_start <= it < window_end:
            window.append(position.copy())

    final = config.model_copy(
        update={
            "step_size": averaging.final_step_size,
            "mass_diag": tuple(float(m) for m in mass),
            "adapt_steps": 0,
        }
    )
    stats = stats.model_copy(update={"final_step_size": final.step_size})
    log.debug(
        "Adapted HMC over %i steps to step size %.3g.",
        n_steps,
        final.step_size,
        extra={"accept_rate": stats.accept_rate, "divergent": stats.n_divergent},
    )
    return final, position, stats


def run_chain(
    position: np.ndarray,
    target: LogDensityAndGrad,
    config: HmcConfig,
    n_steps: int,
    rng: np.random.Generator,
    thin: int = 1,
) -> tuple[np.ndarray, ChainStats]:
    """Run a frozen chain and return every `thin`-th state (last state included)."""
    position = np.array(position, dtype=float)
    current = target(position)
    draws = []
    n_accepted = n_divergent = 0
    for it in range(n_steps):
        result = hmc_step(position, target, config, rng, current)
        position, current = result.position, (result.log_density, result.grad)
        n_accepted += int(result.accepted)
        n_divergent += int(result.divergent)
        if (it + 1) % thin == 0:
            draws.append(position.copy())
    stats = ChainStats(
        n_steps=n_steps,
        n_accepted=n_accepted,
        n_divergent=n_divergent,
        final_step_size=config.step_size,
    )
    return (np.stack(draws) if draws else np.empty((0, position.size))), stats


def initial_config(dim: int, tuning: HmcTuningConfig, adapt_steps: int) -> HmcConfig:
    """Unit mass and a placeholder step size, to be refined by adaptation."""
    return HmcConfig(
        step_size=0.1,
        n_leapfrog=tuning.n_leapfrog,
        mass_diag=tuple(np.ones(dim)),
        target_accept=tuning.target_accept,
        adapt_steps=adapt_steps,
    )


def tune_pilot(
    position: np.ndarray,
    target: LogDensityAndGrad,
    tuning: HmcTuningConfig,
    rng: np.random.Generator,
) -> tuple[HmcConfig, np.ndarray, ChainStats]:
    """Adapt on a pilot chain and fail when too many of its transitions diverge."""
    config, end, stats = adapt(
        position, target, initial_config(position.size, tuning, tuning.pilot_steps), rng
    )
    if stats.n_steps and stats.divergence_rate > tuning.max_pilot_divergence:
        error = SequentialEnginePort.TuningFailureError(
            divergence_rate=stats.divergence_rate,
            n_steps=stats.n_steps,
            step_size=config.step_size,
        )
        log.error(error, extra={"divergent": stats.n_divergent})
        raise error
    return config, end, stats


def pilot_then_short_chains(
    points: np.ndarray,
    target: LogDensityAndGrad,
    tuning: HmcTuningConfig,
    pilot_rng: np.random.Generator,
    generators: Sequence[np.random.Generator],
    executor: Optional[Executor] = None,
) -> tuple[np.ndarray, JitterReport]:
    """Tune on the first point, then move every point with a short frozen chain.

    Each short chain starts at its own point, uses its own generator and returns its
    last state. Chains run on the executor when one is given.
    """
    points = np.asarray(points, dtype=float)
    if tuning.short_steps == 0:
        config = initial_config(points.shape[1], tuning, 0)
        return points.copy(), JitterReport(config, ChainStats(), ChainStats())

    config, _, pilot_stats = tune_pilot(points[0], target, tuning, pilot_rng)

    def move(index: int) -> tuple[np.ndarray, ChainStats]:
        draws, stats = run_chain(
            points[index], target, config, tuning.short_steps, generators[index]
        )
        return draws[-1], stats

    indices = range(points.shape[0])
    results = list(executor.map(move, indices)) if executor else [move(i) for i in indices]

    short_stats = ChainStats(final_step_size=config.step_size)
    for _, stats in results:
        short_stats = short_stats.merge(stats)
    moved = np.stack([end for end, _ in results])
    return moved, JitterReport(config=config, pilot=pilot_stats, short=short_stats)


def sample_posterior(
    position: np.ndarray,
    target: LogDensityAndGrad,
    tuning: HmcTuningConfig,
    n_draws: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, JitterReport]:
    """A batch run: adapt, then keep `n_draws` thinned states of a long chain."""
    config, start, pilot_stats = tune_pilot(np.asarray(position, dtype=float), target, tuning, rng)
    thin = max(1, tuning.batch_steps // n_draws)
    draws, stats = run_chain(start, target, config, n_draws * thin, rng, thin=thin)
    return draws, JitterReport(config=config, pilot=pilot_stats, short=stats)
