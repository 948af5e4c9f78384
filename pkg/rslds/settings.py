"""Configuration loading and typed configuration models.

The TOML file next to this module holds every tunable constant. It is read
once at import; ``RSLDS_CONFIG`` may point at an alternative file.
"""

import logging
import os
from typing import Literal, Optional

import toml
from pydantic import BaseModel, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

config_path = os.environ.get(
    'RSLDS_CONFIG', os.path.join(os.path.dirname(__file__), 'config.toml'))
with open(config_path, 'r', encoding='utf-8') as f:
    config = toml.load(f)

FILES = config['settings']['files']

ModelName = Literal['slds', 'rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky', 'rarhmm', 'rarhmm-ro']
InferenceName = Literal['gibbs', 'svi']
GeneratorName = Literal['nascar', 'lorenz-bernoulli', 'from-model-file']


class SamplerConfig(BaseModel):
    """Settings for the blocked Gibbs sampler.

    Attributes:
        n_iters: Number of full sweeps
        thinning: Write a full parameter snapshot every ``thinning`` sweeps
        burn_in: Sweeps discarded before posterior averages are accumulated
        update_omega, update_xi, update_x, update_z: Latent blocks to resample
        update_dynamics, update_emissions, update_recurrence, update_markov:
            Parameter blocks to resample
        progress: Show a progress bar
    """
    n_iters: int = config['sampler']['n_iters']
    thinning: int = config['sampler']['thinning']
    burn_in: int = config['sampler']['burn_in']
    update_omega: bool = True
    update_xi: bool = True
    update_x: bool = True
    update_z: bool = True
    update_dynamics: bool = True
    update_emissions: bool = True
    update_recurrence: bool = True
    update_markov: bool = True
    progress: bool = config['sampler']['progress']

    @field_validator('n_iters', 'thinning')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('burn_in')
    @classmethod
    def _nonnegative(cls, value: int) -> int:
        if value < 0:
            raise ValueError('must be >= 0')
        return value

    @classmethod
    def frozen(cls, *keep: str, **kwargs) -> 'SamplerConfig':
        """Config with every block frozen except the ones named in ``keep``."""
        blocks = {name: False for name in cls.model_fields if name.startswith('update_')}
        for name in keep:
            blocks[f'update_{name}'] = True
        blocks.update(kwargs)
        return cls(**blocks)


class SviConfig(BaseModel):
    """Settings for structured mean-field SVI.

    The step size at outer iteration ``i`` is
    ``min(1, base_rate * (i + 1) ** -decay)``.
    """
    n_iters: int = config['svi']['n_iters']
    base_rate: float = config['svi']['base_rate']
    decay: float = config['svi']['decay']
    minibatch_size: int = config['svi']['minibatch_size']
    n_mc_logpi: int = config['svi']['n_mc_logpi']
    n_mc_zhat: int = config['svi']['n_mc_zhat']
    n_local_iters: int = config['svi']['n_local_iters']
    n_elbo_samples: int = config['svi']['n_elbo_samples']

    @field_validator('n_iters', 'minibatch_size', 'n_mc_logpi', 'n_mc_zhat', 'n_local_iters', 'n_elbo_samples')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('base_rate')
    @classmethod
    def _rate(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError('base_rate must lie in (0, 1]')
        return value

    @field_validator('decay')
    @classmethod
    def _decay(cls, value: float) -> float:
        if value < 0.0:
            raise ValueError('decay must be >= 0')
        return value

    def step_size(self, iteration: int) -> float:
        return min(1.0, self.base_rate * (iteration + 1) ** -self.decay)


class InitConfig(BaseModel):
    """Settings for the three-stage initialiser."""
    n_arhmm_iters: int = config['init']['n_arhmm_iters']
    arhmm_sticky: float = config['init']['arhmm_sticky']
    logistic_prior_precision: float = config['init']['logistic_prior_precision']
    logistic_max_iters: int = config['init']['logistic_max_iters']
    logistic_gtol: float = config['init']['logistic_gtol']
    smoothing_window: int = config['init']['smoothing_window']
    rate_clip: float = config['init']['rate_clip']


class NascarConfig(BaseModel):
    """Constants of the synthetic oval-track generator."""
    T: int = config['nascar']['T']
    K: int = config['nascar']['K']
    M: int = config['nascar']['M']
    N: int = config['nascar']['N']
    angle: float = config['nascar']['angle']
    centers: list[list[float]] = config['nascar']['centers']
    speeds: list[float] = config['nascar']['speeds']
    start: list[float] = config['nascar']['start']
    dynamics_noise: float = config['nascar']['dynamics_noise']
    emission_noise: float = config['nascar']['emission_noise']
    sharpness: list[float] = config['nascar']['sharpness']


class LorenzConfig(BaseModel):
    """Lorenz system and Bernoulli GLM settings.

    ``alpha``, ``beta`` and ``gamma`` are the ODE coefficients, unrelated to
    the Dirichlet concentration.
    """
    alpha: float = config['lorenz']['alpha']
    beta: float = config['lorenz']['beta']
    gamma: float = config['lorenz']['gamma']
    dt: float = config['lorenz']['dt']
    substeps: int = config['lorenz']['substeps']
    burn_in: int = config['lorenz']['burn_in']
    start: list[float] = config['lorenz']['start']
    N: int = config['lorenz']['N']
    weight_scale: float = config['lorenz']['weight_scale']
    bias_scale: float = config['lorenz']['bias_scale']
    weights_seed: Optional[int] = None

    @field_validator('dt')
    @classmethod
    def _dt(cls, value: float) -> float:
        if value <= 0:
            raise ValueError('dt must be > 0')
        return value

    @field_validator('N', 'substeps')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value


class ExperimentSpec(BaseModel):
    """A complete fit request, as assembled by the CLI."""
    generator: GeneratorName = 'nascar'
    T: int = config['experiment']['T']
    seed: int = config['settings']['seed']
    mask: list[tuple[int, int]] = Field(default_factory=lambda: [tuple(m) for m in config['experiment']['mask']])
    model: ModelName = config['experiment']['model']
    inference: InferenceName = config['experiment']['inference']
    K: int = config['experiment']['K']
    M: int = config['experiment']['M']
    iters: Optional[int] = None
    chains: int = config['experiment']['chains']
    data_dir: Optional[str] = None
    out: str = config['settings']['output_dir']

    @field_validator('T', 'K', 'M', 'chains')
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @model_validator(mode='after')
    def _check_mask(self) -> 'ExperimentSpec':
        for start, stop in self.mask:
            if not 0 <= start < stop <= self.T:
                raise ValueError(f'mask interval [{start}, {stop}) outside [0, {self.T}]')
        return self
