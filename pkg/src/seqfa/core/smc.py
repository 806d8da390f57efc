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

"""Iterated batch importance sampling over parameters, with or without latent rows.

Observations enter one at a time. Each particle is reweighted by the predictive
density of the new observation; when the effective sample size drops below the
threshold the population is resampled and moved by HMC targeting the current
posterior. The weighted average of the incremental weights, taken before the
update, is booked in the evidence ledger.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol

import numpy as np
import pandas as pd
from pydantic import Field, model_validator
from pydantic_settings import BaseSettings

from seqfa.core import approx
from seqfa.core.distributions import (
    ContractViolationError,
    RngStream,
    log_weighted_mean_exp,
    multinomial_resample,
    normalized_weights,
)
from seqfa.core.hmc import (
    HmcTuningConfig,
    JitterReport,
    pilot_then_short_chains,
    sample_posterior,
)
from seqfa.core.models import (
    DegeneracyPolicy,
    DrawSnapshot,
    EngineSnapshot,
    EvidenceLedger,
    InitEvidenceMode,
    ParticleSet,
    ProposalKind,
    StreamState,
)
from seqfa.ports.inbound.engine import SequentialEnginePort
from seqfa.ports.outbound.checkpoint import CheckpointStorePort

log = logging.getLogger(__name__)

QUANTILES = (0.025, 0.5, 0.975)

# keys used to derive independent child streams from an engine stream
_PARTICLE_STREAMS = 1
_INIT_EVIDENCE_STREAM = 2


class EngineConfig(BaseSettings):
    """Config parameters of the sequential engines."""

    n_particles: int = Field(1000, ge=1, description="Number of parameter particles.")
    ess_fraction: float = Field(
        0.5,
        gt=0,
        le=1,
        description="Resampling fires when the ESS drops below this share of particles.",
    )
    proposal: ProposalKind = Field(
        ProposalKind.LAPLACE,
        description="Proposal for the latent rows of binary observations.",
    )
    information: approx.InformationKind = Field(
        approx.InformationKind.EXPECTED,
        description="Information matrix used for the Laplace covariance.",
    )
    vb_iters: int = Field(200, ge=1, description="Iterations of each variational fit.")
    vb_mc_samples: int = Field(
        4, ge=1, description="Monte Carlo draws per variational gradient estimate."
    )
    n_init: int = Field(
        0,
        ge=0,
        description="Number of leading observations used for a batch initialization.",
    )
    init_evidence: InitEvidenceMode = Field(
        InitEvidenceMode.IMPORTANCE,
        description="How the evidence of the initialization block is booked.",
    )
    n_workers: int = Field(
        1, ge=1, description="Number of threads used for the particle chains."
    )

    @model_validator(mode="after")
    def check_ess_threshold(self) -> "EngineConfig":
        """The resampling threshold must exceed a single particle."""
        if self.ess_fraction * self.n_particles <= 1:
            raise ValueError(
                "`ess_fraction * n_particles` must exceed 1, got"
                + f" {self.ess_fraction * self.n_particles}."
            )
        return self

    def proposal_options(self) -> approx.ProposalOptions:
        """Numerical settings handed to the latent proposals."""
        return approx.ProposalOptions(
            information=self.information,
            vb_iters=self.vb_iters,
            vb_mc_samples=self.vb_mc_samples,
        )


class SequentialModel(Protocol):
    """What the engines need to know about a model bound to a dataset."""

    @property
    def key(self) -> str:
        """Identifies the model."""
        ...

    @property
    def n_observations(self) -> int:
        """Number of observations available."""
        ...

    @property
    def latent_dim(self) -> int:
        """Latent coordinates per observation, zero for marginal models."""
        ...

    def prior_sample(self, rng: np.random.Generator, size: int) -> list:
        """Draw parameter points from the prior."""
        ...

    def loglik_point(self, thetas: Sequence, index: int) -> np.ndarray:
        """Marginal log likelihood of one observation under each point."""
        ...

    def augmented_loglik_point(
        self, thetas: Sequence, latent: np.ndarray, index: int
    ) -> np.ndarray:
        """Log likelihood of one observation given a latent row per point."""
        ...

    def latent_prior_logpdf(self, thetas: Sequence, latent: np.ndarray) -> np.ndarray:
        """Prior log density of a latent row per point."""
        ...

    def posterior_target(self, n_data: int) -> Any:
        """Unconstrained posterior target given a data prefix."""
        ...

    def predictive_draw(self, thetas: Sequence, rng: np.random.Generator) -> np.ndarray:
        """A draw of the next observation per point."""
        ...

    def parameter_names(self) -> list[str]:
        """Names of the reported scalar parameters."""
        ...

    def readout(self, thetas: Sequence) -> np.ndarray:
        """Reported scalar parameters, one row per point."""
        ...

    def encode(self, theta: Any) -> dict:
        """JSON-friendly record of a point."""
        ...

    def decode(self, record: dict) -> Any:
        """Inverse of `encode`."""
        ...


@dataclass(frozen=True)
class StepOutcome:
    """What happened while assimilating one observation."""

    observation: int
    log_increment: float
    ess: float
    resampled: bool
    jitter: Optional[JitterReport] = None


def ess(logw: np.ndarray) -> float:
    """Effective sample size (sum w)^2 / sum w^2 computed from log-weights."""
    weights = normalized_weights(logw, operation="ess")
    return float(1.0 / np.sum(weights**2))


def _book_increment(
    particles: ParticleSet, logu: np.ndarray, ledger: EvidenceLedger
) -> float:
    """Book the predictive increment and reweight; fails when nothing survives."""
    observation = particles.i_processed + 1
    logu = np.where(np.isnan(logu), -np.inf, logu)
    logw = particles.logw + logu
    if not np.any(np.isfinite(logw)):
        error = SequentialEnginePort.DegeneratePopulationError(
            observation_index=observation
        )
        log.critical(error, extra={"observation": observation})
        raise error
    increment = log_weighted_mean_exp(particles.logw, logu)
    ledger.append(increment)
    particles.logw = logw - np.max(logw)
    particles.i_processed = observation
    return increment


def resample_move(
    particles: ParticleSet,
    model: SequentialModel,
    tuning: HmcTuningConfig,
    stream: RngStream,
    executor: Optional[Executor] = None,
) -> JitterReport:
    """Resample multinomially, then jitter with HMC targeting the current posterior.

    For augmented models parameters and latent rows are resampled and moved jointly.
    Afterwards all log-weights are zero.
    """
    rng = stream.generator()
    ancestors = multinomial_resample(particles.logw, rng)
    thetas = [particles.thetas[a] for a in ancestors]
    latent = None if particles.latent is None else particles.latent[ancestors]
    generators = [particle_stream.generator() for particle_stream in particles.rng_streams]

    target = model.posterior_target(particles.i_processed)
    points = np.stack(
        [
            target.pack(theta, None if latent is None else latent[m])
            for m, theta in enumerate(thetas)
        ]
    )
    moved, report = pilot_then_short_chains(
        points, target.logpdf_and_grad, tuning, rng, generators, executor
    )
    if tuning.short_steps > 0:
        unpacked = [target.unpack(point) for point in moved]
        thetas = [theta for theta, _ in unpacked]
        if latent is not None:
            latent = np.stack([rows for _, rows in unpacked])

    particles.thetas = thetas
    particles.latent = latent
    particles.logw = np.zeros(particles.size)
    return report


def _maybe_resample(
    particles: ParticleSet,
    model: SequentialModel,
    policy: DegeneracyPolicy,
    tuning: HmcTuningConfig,
    stream: RngStream,
    executor: Optional[Executor],
    increment: float,
) -> StepOutcome:
    observation = particles.i_processed
    current_ess = ess(particles.logw)
    log.debug(
        "Assimilated observation %i.",
        observation,
        extra={"observation": observation, "ess": current_ess, "increment": increment},
    )
    if not policy.should_resample(current_ess):
        return StepOutcome(observation, increment, current_ess, resampled=False)

    policy.trigger_log.append(observation)
    policy.trigger_ess.append(current_ess)
    report = resample_move(particles, model, tuning, stream, executor)
    log.info(
        "Resampled and jittered after observation %i.",
        observation,
        extra={
            "observation": observation,
            "ess": current_ess,
            "n_triggers": len(policy.trigger_log),
            "accept_rate": report.short.accept_rate,
            "step_size": report.config.step_size,
        },
    )
    return StepOutcome(observation, increment, current_ess, True, report)


def ibis_step(  # noqa: PLR0913
    particles: ParticleSet,
    model: SequentialModel,
    ledger: EvidenceLedger,
    policy: DegeneracyPolicy,
    tuning: HmcTuningConfig,
    stream: RngStream,
    executor: Optional[Executor] = None,
) -> StepOutcome:
    """Assimilate the next observation under a marginal (latent-free) model."""
    if model.latent_dim:
        raise ContractViolationError(
            operation="ibis_step", problem="the model carries latent variables"
        )
    logu = model.loglik_point(particles.thetas, particles.i_processed)
    increment = _book_increment(particles, logu, ledger)
    return _maybe_resample(
        particles, model, policy, tuning, stream, executor, increment
    )


def ibis_lvm_step(  # noqa: PLR0913
    particles: ParticleSet,
    model: Any,
    proposal: ProposalKind,
    ledger: EvidenceLedger,
    policy: DegeneracyPolicy,
    tuning: HmcTuningConfig,
    stream: RngStream,
    executor: Optional[Executor] = None,
    options: Optional[approx.ProposalOptions] = None,
) -> StepOutcome:
    """Assimilate the next observation of an augmented model.

    Every particle draws a latent row from the proposal, which is appended to its
    latent block. The incremental weight is f(y | theta, z) pi(z) / q(z).
    """
    if not model.latent_dim or particles.latent is None:
        raise ContractViolationError(
            operation="ibis_lvm_step", problem="the model carries no latent variables"
        )
    index = particles.i_processed
    generators = [particle_stream.generator() for particle_stream in particles.rng_streams]
    latent, log_q = approx.propose_batch(
        model=model,
        thetas=particles.thetas,
        index=index,
        kind=proposal,
        generators=generators,
        options=options or approx.ProposalOptions(),
    )
    logu = model.augmented_loglik_point(particles.thetas, latent, index)
    if proposal != ProposalKind.PRIOR:
        logu = logu + model.latent_prior_logpdf(particles.thetas, latent) - log_q
    particles.latent = np.concatenate([particles.latent, latent[:, None, :]], axis=1)
    increment = _book_increment(particles, logu, ledger)
    return _maybe_resample(
        particles, model, policy, tuning, stream, executor, increment
    )


def particle_streams(stream: RngStream, n_particles: int) -> list[RngStream]:
    """Independent streams for the particle slots of an engine."""
    return [stream.derive(_PARTICLE_STREAMS, m) for m in range(n_particles)]


def importance_evidence(
    model: SequentialModel, n_obs: int, n_particles: int, stream: RngStream
) -> EvidenceLedger:
    """Evidence of the first `n_obs` observations by plain importance sampling from the prior.

    Latent rows, if any, are drawn from their prior.
    """
    rng = stream.generator()
    thetas = model.prior_sample(rng, n_particles)
    logw = np.zeros(n_particles)
    ledger = EvidenceLedger()
    for index in range(n_obs):
        if model.latent_dim:
            latent, _ = approx.propose_batch(
                model=model,
                thetas=thetas,
                index=index,
                kind=ProposalKind.PRIOR,
                generators=[rng] * n_particles,
                options=approx.ProposalOptions(),
            )
            logu = model.augmented_loglik_point(thetas, latent, index)
        else:
            logu = model.loglik_point(thetas, index)
        logu = np.where(np.isnan(logu), -np.inf, logu)
        if not np.any(np.isfinite(logw + logu)):
            error = SequentialEnginePort.DegeneratePopulationError(
                observation_index=index + 1
            )
            log.critical(error, extra={"observation": index + 1})
            raise error
        ledger.append(log_weighted_mean_exp(logw, logu))
        logw = logw + logu
    return ledger


def run_batch_hmc(
    model: SequentialModel,
    n_draws: int,
    tuning: HmcTuningConfig,
    stream: RngStream,
    n_data: Optional[int] = None,
) -> tuple[list, JitterReport]:
    """Reference batch HMC run on the first `n_data` observations (default: all).

    Returns `n_draws` thinned parameter points; latent rows are sampled alongside but
    dropped.
    """
    n_data = model.n_observations if n_data is None else n_data
    rng = stream.generator()
    target = model.posterior_target(n_data)
    start_theta = model.prior_sample(rng, 1)[0]
    start_latent = (
        rng.standard_normal((n_data, model.latent_dim)) if model.latent_dim else None
    )
    draws, report = sample_posterior(
        target.pack(start_theta, start_latent),
        target.logpdf_and_grad,
        tuning,
        n_draws,
        rng,
    )
    log.info(
        "Batch HMC run on %i observations finished.",
        n_data,
        extra={
            "n_draws": n_draws,
            "accept_rate": report.short.accept_rate,
            "step_size": report.config.step_size,
        },
    )
    return [target.unpack(draw)[0] for draw in draws], report


def initialize_with_batch(  # noqa: PLR0913
    model: SequentialModel,
    n_init: int,
    n_particles: int,
    tuning: HmcTuningConfig,
    stream: RngStream,
    init_evidence: InitEvidenceMode = InitEvidenceMode.IMPORTANCE,
) -> tuple[ParticleSet, EvidenceLedger]:
    """Build an equally weighted population.

    Without an initialization block the particles are prior draws. Otherwise they are
    thinned draws of a batch HMC chain on the first `n_init` observations, and the
    ledger is seeded according to `init_evidence`.
    """
    streams = particle_streams(stream, n_particles)
    rng = stream.generator()
    k = model.latent_dim

    if n_init == 0:
        thetas = model.prior_sample(rng, n_particles)
        latent = np.zeros((n_particles, 0, k)) if k else None
        return (
            ParticleSet(thetas, np.zeros(n_particles), streams, 0, latent),
            EvidenceLedger(),
        )

    if n_init > model.n_observations:
        raise ContractViolationError(
            operation="initialize_with_batch",
            problem=f"{n_init} initial observations requested, only"
            + f" {model.n_observations} available",
        )

    target = model.posterior_target(n_init)
    start_theta = model.prior_sample(rng, 1)[0]
    start_latent = rng.standard_normal((n_init, k)) if k else None
    draws, report = sample_posterior(
        target.pack(start_theta, start_latent),
        target.logpdf_and_grad,
        tuning,
        n_particles,
        rng,
    )
    unpacked = [target.unpack(draw) for draw in draws]
    thetas = [theta for theta, _ in unpacked]
    latent = np.stack([rows for _, rows in unpacked]) if k else None
    log.info(
        "Initialized %i particles from a batch chain on %i observations.",
        n_particles,
        n_init,
        extra={
            "accept_rate": report.short.accept_rate,
            "step_size": report.config.step_size,
        },
    )

    if init_evidence == InitEvidenceMode.IMPORTANCE:
        ledger = importance_evidence(
            model, n_init, n_particles, stream.derive(_INIT_EVIDENCE_STREAM)
        )
    else:
        ledger = EvidenceLedger(available_from=n_init)
        for _ in range(n_init):
            ledger.append(0.0)

    particles = ParticleSet(thetas, np.zeros(n_particles), streams, n_init, latent)
    return particles, ledger


def weighted_quantiles(
    values: np.ndarray, weights: np.ndarray, quantiles: Sequence[float]
) -> np.ndarray:
    """Quantiles of the weighted empirical distribution of the rows of `values`."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, axis=0, kind="stable")
    sorted_values = np.take_along_axis(values, order, axis=0)
    cdf = np.cumsum(weights[order], axis=0)
    result = np.empty((len(quantiles),) + values.shape[1:])
    for qi, q in enumerate(quantiles):
        position = np.minimum(
            np.sum(cdf < q * cdf[-1], axis=0), values.shape[0] - 1
        )
        result[qi] = np.take_along_axis(
            sorted_values, np.atleast_1d(position)[None, ...], axis=0
        )[0]
    return result


def weighted_expectation(
    particles: ParticleSet, g: Callable[[Any], Any]
) -> np.ndarray:
    """Self-normalized estimate of E[g(theta) | data so far]."""
    weights = normalized_weights(particles.logw, operation="weighted_expectation")
    values = np.stack([np.asarray(g(theta), dtype=float) for theta in particles.thetas])
    return np.tensordot(weights, values, axes=1)


def posterior_summary(particles: ParticleSet, model: SequentialModel) -> pd.DataFrame:
    """Weighted mean, sd and 2.5/50/97.5% quantiles of every reported parameter.

    Loadings are sign-fixed before summarizing.
    """
    weights = normalized_weights(particles.logw, operation="posterior_summary")
    values = model.readout(particles.thetas)
    mean = weights @ values
    sd = np.sqrt(np.maximum(weights @ (values - mean) ** 2, 0.0))
    quantiles = weighted_quantiles(values, weights, QUANTILES)
    return pd.DataFrame(
        {
            "mean": mean,
            "sd": sd,
            "q025": quantiles[0],
            "q500": quantiles[1],
            "q975": quantiles[2],
        },
        index=pd.Index(model.parameter_names(), name="parameter"),
    )


def predictive_draw(
    particles: ParticleSet, model: SequentialModel, rng: np.random.Generator
) -> np.ndarray:
    """One draw of the next observation per particle; weights stay with the particles."""
    return model.predictive_draw(particles.thetas, rng)


def latent_readout(
    particles: ParticleSet, model: Any, index: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One factor draw per particle for observation `index`, with inherited log-weights."""
    draws = model.latent_readout(particles.thetas, index, rng)
    return draws, particles.logw.copy()


def _stream_state(stream: RngStream) -> StreamState:
    return StreamState(seed=stream.seed, stream_id=stream.stream_id, counter=stream.counter)


def _stream_from_state(state: StreamState) -> RngStream:
    return RngStream(seed=state.seed, stream_id=state.stream_id, counter=state.counter)


class SequentialEngine(SequentialEnginePort):
    """Streams the observations of one model through a particle population."""

    def __init__(  # noqa: PLR0913
        self,
        *,
        model: SequentialModel,
        config: EngineConfig,
        tuning: HmcTuningConfig,
        stream: RngStream,
        label: str = "model",
        executor: Optional[Executor] = None,
        checkpoint_store: Optional[CheckpointStorePort] = None,
        record_draws: bool = True,
    ):
        self._model = model
        self._config = config
        self._tuning = tuning
        self._stream = stream
        self._label = label
        self._executor = executor
        self._checkpoint_store = checkpoint_store
        self._record_draws = record_draws
        self._particles: Optional[ParticleSet] = None
        self._ledger = EvidenceLedger()
        self.policy = DegeneracyPolicy(
            ess_threshold=config.ess_fraction * config.n_particles
        )
        self.policy.check(config.n_particles)
        self.ess_history: list[float] = []
        self.draw_snapshots: list[DrawSnapshot] = []

    @property
    def label(self) -> str:
        """Name of the model run by this engine."""
        return self._label

    @property
    def model(self) -> SequentialModel:
        """The model run by this engine."""
        return self._model

    @property
    def particles(self) -> ParticleSet:
        """The current particle population."""
        if self._particles is None:
            raise RuntimeError("The engine has not been initialized.")
        return self._particles

    @property
    def ledger(self) -> EvidenceLedger:
        """The evidence booked so far."""
        return self._ledger

    @property
    def finished(self) -> bool:
        """Whether all observations have been assimilated."""
        return self.particles.i_processed >= self._model.n_observations

    def initialize(self) -> None:
        """Create the initial population, optionally from a batch of observations."""
        self._particles, self._ledger = initialize_with_batch(
            self._model,
            self._config.n_init,
            self._config.n_particles,
            self._tuning,
            self._stream,
            self._config.init_evidence,
        )
        log.info(
            "Initialized engine for model '%s'.",
            self._label,
            extra={"model": self._label, "n_particles": self._config.n_particles},
        )

    def step(self) -> StepOutcome:
        """Assimilate the next observation."""
        particles = self.particles
        if self._model.latent_dim:
            outcome = ibis_lvm_step(
                particles,
                self._model,
                self._config.proposal,
                self._ledger,
                self.policy,
                self._tuning,
                self._stream,
                self._executor,
                self._config.proposal_options(),
            )
        else:
            outcome = ibis_step(
                particles,
                self._model,
                self._ledger,
                self.policy,
                self._tuning,
                self._stream,
                self._executor,
            )
        self.ess_history.append(outcome.ess)
        if outcome.resampled:
            self._record(outcome.observation)
        return outcome

    def run(self, until: Optional[int] = None) -> EvidenceLedger:
        """Assimilate observations until `until` of them (default: all) are processed."""
        if self._particles is None:
            self.initialize()
        until = self._model.n_observations if until is None else until
        while self.particles.i_processed < until:
            self.step()
        if self.finished:
            self._record(self.particles.i_processed, final=True)
            log.info(
                "Model '%s' assimilated all observations.",
                self._label,
                extra={
                    "model": self._label,
                    "log_evidence": self._ledger.log_evidence,
                    "n_triggers": len(self.policy.trigger_log),
                },
            )
        return self._ledger

    def _record(self, observation: int, final: bool = False) -> None:
        if self._record_draws and not (
            final
            and self.draw_snapshots
            and self.draw_snapshots[-1].index == observation
        ):
            self.draw_snapshots.append(
                DrawSnapshot(
                    index=observation,
                    logw=self.particles.logw.copy(),
                    values=self._model.readout(self.particles.thetas),
                )
            )
        if self._checkpoint_store is not None:
            self._checkpoint_store.save(label=self._label, snapshot=self.snapshot())

    def posterior_summary(self) -> pd.DataFrame:
        """Weighted means, standard deviations and quantiles of all parameters."""
        return posterior_summary(self.particles, self._model)

    def predictive_draw(self) -> np.ndarray:
        """One draw of the next observation per particle."""
        return predictive_draw(self.particles, self._model, self._stream.generator())

    def snapshot(self) -> EngineSnapshot:
        """Capture the full engine state."""
        particles = self.particles
        return EngineSnapshot(
            label=self._label,
            model_key=self._model.key,
            i_processed=particles.i_processed,
            thetas=[self._model.encode(theta) for theta in particles.thetas],
            logw=[float(w) if np.isfinite(w) else None for w in particles.logw],
            latent=None if particles.latent is None else particles.latent.tolist(),
            stream=_stream_state(self._stream),
            particle_streams=[_stream_state(s) for s in particles.rng_streams],
            increments=list(self._ledger.increments),
            cumulative=list(self._ledger.cumulative),
            available_from=self._ledger.available_from,
            ess_threshold=self.policy.ess_threshold,
            trigger_log=list(self.policy.trigger_log),
            trigger_ess=list(self.policy.trigger_ess),
            ess_history=list(self.ess_history),
        )

    @classmethod
    def from_snapshot(  # noqa: PLR0913
        cls,
        snapshot: EngineSnapshot,
        *,
        model: SequentialModel,
        config: EngineConfig,
        tuning: HmcTuningConfig,
        executor: Optional[Executor] = None,
        checkpoint_store: Optional[CheckpointStorePort] = None,
        record_draws: bool = True,
    ) -> "SequentialEngine":
        """Resume an engine from a snapshot taken with the same model."""
        if snapshot.model_key != model.key:
            error = cls.CheckpointMismatchError(
                label=snapshot.label, reason="it was taken with a different model"
            )
            log.error(error, extra={"model": snapshot.label})
            raise error
        if len(snapshot.thetas) != config.n_particles:
            error = cls.CheckpointMismatchError(
                label=snapshot.label,
                reason=f"it holds {len(snapshot.thetas)} particles, the config asks"
                + f" for {config.n_particles}",
            )
            log.error(error, extra={"model": snapshot.label})
            raise error

        engine = cls(
            model=model,
            config=config,
            tuning=tuning,
            stream=_stream_from_state(snapshot.stream),
            label=snapshot.label,
            executor=executor,
            checkpoint_store=checkpoint_store,
            record_draws=record_draws,
        )
        latent = None
        if snapshot.latent is not None:
            latent = np.asarray(snapshot.latent, dtype=float).reshape(
                len(snapshot.thetas), snapshot.i_processed, model.latent_dim
            )
        engine._particles = ParticleSet(
            thetas=[model.decode(record) for record in snapshot.thetas],
            logw=np.array(
                [-np.inf if w is None else w for w in snapshot.logw], dtype=float
            ),
            rng_streams=[_stream_from_state(s) for s in snapshot.particle_streams],
            i_processed=snapshot.i_processed,
            latent=latent,
        )
        engine._ledger = EvidenceLedger(
            increments=list(snapshot.increments),
            cumulative=list(snapshot.cumulative),
            available_from=snapshot.available_from,
        )
        engine.policy = DegeneracyPolicy(
            ess_threshold=snapshot.ess_threshold,
            trigger_log=list(snapshot.trigger_log),
            trigger_ess=list(snapshot.trigger_ess),
        )
        engine.ess_history = list(snapshot.ess_history)
        return engine

    @classmethod
    def from_checkpoint(  # noqa: PLR0913
        cls,
        store: CheckpointStorePort,
        *,
        label: str,
        model: SequentialModel,
        config: EngineConfig,
        tuning: HmcTuningConfig,
        executor: Optional[Executor] = None,
        record_draws: bool = True,
    ) -> "SequentialEngine":
        """Resume the engine of model `label` from its latest stored snapshot."""
        return cls.from_snapshot(
            store.load(label=label),
            model=model,
            config=config,
            tuning=tuning,
            executor=executor,
            checkpoint_store=store,
            record_draws=record_draws,
        )
