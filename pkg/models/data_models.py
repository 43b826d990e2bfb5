"""
Data models for the neatpad workbench.
Uses Pydantic for data validation and serialization.
"""

import math
from datetime import datetime
from typing import Annotated, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


Probability = Annotated[float, Field(ge=0.0, le=1.0)]
NonNegative = Annotated[float, Field(ge=0.0)]


class NodeGene(BaseModel):
    """A decoded node row: historical key plus readable attributes."""
    model_config = ConfigDict(frozen=True)

    key: int = Field(ge=0)
    bias: float
    response: float
    aggregation: str
    activation: str


class ConnGene(BaseModel):
    """A decoded connection row."""
    model_config = ConfigDict(frozen=True)

    in_key: int = Field(ge=0)
    out_key: int = Field(ge=0)
    enabled: bool = True
    weight: float


class GenomeLimits(BaseModel):
    """Fixed tensor sizes shared by every genome of a run."""
    model_config = ConfigDict(frozen=True)

    max_nodes: int = Field(ge=1)
    max_conns: int = Field(ge=1)


class DistanceConfig(BaseModel):
    """Coefficients of the compatibility distance."""
    model_config = ConfigDict(frozen=True)

    compatibility_disjoint: float = Field(default=1.0, ge=0.0)
    compatibility_homologous: float = Field(default=0.5, ge=0.0)


class MutationConfig(BaseModel):
    """Structural probabilities and per-attribute mutation settings."""
    model_config = ConfigDict(frozen=True)

    node_add: Probability
    node_delete: Probability
    conn_add: Probability
    conn_delete: Probability

    bias_init_mean: float = 0.0
    bias_init_std: NonNegative
    bias_mutate_power: NonNegative
    bias_mutate_rate: Probability
    bias_replace_rate: Probability

    response_init_mean: float = 1.0
    response_init_std: NonNegative
    response_mutate_power: NonNegative
    response_mutate_rate: Probability
    response_replace_rate: Probability

    weight_init_mean: float = 0.0
    weight_init_std: NonNegative
    weight_mutate_power: NonNegative
    weight_mutate_rate: Probability
    weight_replace_rate: Probability

    activation_default: str = "tanh"
    activation_options: List[str] = ["tanh"]
    activation_replace_rate: Probability

    aggregation_default: str = "sum"
    aggregation_options: List[str] = ["sum"]
    aggregation_replace_rate: Probability

    @classmethod
    def no_mutation(cls, **overrides) -> "MutationConfig":
        """Build a config where nothing mutates unless overridden."""
        values = {
            "node_add": 0.0, "node_delete": 0.0, "conn_add": 0.0, "conn_delete": 0.0,
            "bias_init_std": 1.0, "bias_mutate_power": 0.0, "bias_mutate_rate": 0.0,
            "bias_replace_rate": 0.0,
            "response_init_std": 0.0, "response_mutate_power": 0.0,
            "response_mutate_rate": 0.0, "response_replace_rate": 0.0,
            "weight_init_std": 1.0, "weight_mutate_power": 0.0, "weight_mutate_rate": 0.0,
            "weight_replace_rate": 0.0,
            "activation_replace_rate": 0.0, "aggregation_replace_rate": 0.0,
        }
        values.update(overrides)
        return cls(**values)


class NeatConfig(BaseModel):
    """
    Full hyperparameter surface of a run.

    Field names mirror the experiment config document verbatim, so a TOML file
    such as ``compatibility_threshold = 3.5`` validates straight into this model.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    # Problem selection
    problem: Literal["xor", "func_fit", "cartpole"] = "xor"
    dataset: Optional[str] = None
    dataset_outputs: int = Field(default=1, ge=1)
    max_steps: int = Field(default=500, ge=1)

    # Algorithmic controls
    seed: int = Field(default=0, ge=0)
    fitness_target: float = math.inf
    generation_limit: int = Field(default=100, ge=1)
    pop_size: int = Field(default=1000, ge=2)
    network_type: Literal["feedforward"] = "feedforward"
    inputs: Optional[int] = Field(default=None, ge=1)
    outputs: Optional[int] = Field(default=None, ge=1)
    max_nodes: int = Field(default=50, ge=1)
    max_conns: int = Field(default=100, ge=1)
    max_species: int = Field(default=10, ge=1)
    compatibility_disjoint: float = Field(default=1.0, ge=0.0)
    compatibility_homologous: float = Field(default=0.5, ge=0.0)
    node_add: float = Field(default=0.2, ge=0.0, le=1.0)
    node_delete: float = Field(default=0.0, ge=0.0, le=1.0)
    conn_add: float = Field(default=0.4, ge=0.0, le=1.0)
    conn_delete: float = Field(default=0.0, ge=0.0, le=1.0)
    compatibility_threshold: float = Field(default=3.5, ge=0.0)
    species_elitism: int = Field(default=2, ge=0)
    max_stagnation: int = Field(default=15, ge=0)
    genome_elitism: int = Field(default=2, ge=0)
    survival_threshold: float = Field(default=0.2, gt=0.0, le=1.0)
    spawn_number_change_rate: float = Field(default=0.5, ge=0.0)

    # Network behaviour controls
    bias_init_mean: float = 0.0
    bias_init_std: float = Field(default=1.0, ge=0.0)
    bias_mutate_power: float = Field(default=0.5, ge=0.0)
    bias_mutate_rate: float = Field(default=0.7, ge=0.0, le=1.0)
    bias_replace_rate: float = Field(default=0.1, ge=0.0, le=1.0)

    response_init_mean: float = 1.0
    response_init_std: float = Field(default=0.0, ge=0.0)
    response_mutate_power: float = Field(default=0.0, ge=0.0)
    response_mutate_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    response_replace_rate: float = Field(default=0.0, ge=0.0, le=1.0)

    weight_init_mean: float = 0.0
    weight_init_std: float = Field(default=1.0, ge=0.0)
    weight_mutate_power: float = Field(default=0.5, ge=0.0)
    weight_mutate_rate: float = Field(default=0.8, ge=0.0, le=1.0)
    weight_replace_rate: float = Field(default=0.1, ge=0.0, le=1.0)

    activation_default: str = "tanh"
    activation_options: List[str] = ["tanh"]
    activation_replace_rate: float = Field(default=0.0, ge=0.0, le=1.0)

    aggregation_default: str = "sum"
    aggregation_options: List[str] = ["sum"]
    aggregation_replace_rate: float = Field(default=0.0, ge=0.0, le=1.0)

    @field_validator("activation_options", "aggregation_options")
    @classmethod
    def _non_empty_options(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one option is required")
        return value

    @model_validator(mode="after")
    def _defaults_are_options(self) -> "NeatConfig":
        if self.activation_default not in self.activation_options:
            raise ValueError("activation_default must be one of activation_options")
        if self.aggregation_default not in self.aggregation_options:
            raise ValueError("aggregation_default must be one of aggregation_options")
        return self

    @property
    def limits(self) -> GenomeLimits:
        return GenomeLimits(max_nodes=self.max_nodes, max_conns=self.max_conns)

    @property
    def distance(self) -> DistanceConfig:
        return DistanceConfig(
            compatibility_disjoint=self.compatibility_disjoint,
            compatibility_homologous=self.compatibility_homologous,
        )

    @property
    def mutation(self) -> MutationConfig:
        return MutationConfig(**{
            name: getattr(self, name) for name in MutationConfig.model_fields
        })


class GenerationStats(BaseModel):
    """One completed generation of a run."""
    generation: int
    best: float
    mean: float
    std: float
    species_count: int
    species_sizes: List[int]
    elapsed_ms: float


class RunStats(BaseModel):
    """Per-generation statistics of one evolve call."""
    generations: List[GenerationStats] = []

    @property
    def best_fitness(self) -> float:
        return max((g.best for g in self.generations), default=-math.inf)


class RunManifest(BaseModel):
    """Everything needed to reproduce a CLI run."""
    config: Dict[str, object]
    seeds: List[int]
    outputs: Dict[str, Dict[str, str]]
    version: str
    started_at: datetime
    finished_at: Optional[datetime] = None


class RunSummary(BaseModel):
    """Structured summary written next to each seed's stats file."""
    seed: int
    problem: str
    generations: int
    best_fitness: float
    solved: bool
    best_genome_nodes: int
    best_genome_conns: int
    elapsed_ms: float


class SchemaDocument(BaseModel):
    """Attribute schema as stored inside a genome document."""
    model_config = ConfigDict(extra="forbid")

    activations: List[str]
    aggregations: List[str]
    node_attrs: List[str]
    conn_attrs: List[str]


class GenomeDocument(BaseModel):
    """Validated shape of a saved genome; rows hold None where the tensor holds NaN."""
    model_config = ConfigDict(extra="forbid")

    format: Literal["neatpad-genome"]
    version: int
    num_inputs: int = Field(ge=1)
    num_outputs: int = Field(ge=1)
    limits: GenomeLimits
    schema_: SchemaDocument = Field(alias="schema")
    nodes: List[List[Optional[float]]]
    conns: List[List[Optional[float]]]
