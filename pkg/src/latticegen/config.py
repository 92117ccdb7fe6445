"""Run configuration files (JSON) and their translation into module objects.

Unknown keys are rejected everywhere and ``schema_version`` is mandatory. A
resolved snapshot written next to a run's outputs is itself a valid config;
feeding it back to ``train`` replays the run.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .dataio import Dataset, SyntheticSpec, downsample, load_dataset, make_synthetic
from .errors import ConfigError
from .metrics import LossSpec
from .prior import Lattice, PriorSpec, build_lattice
from .tensorcore import OptimizerConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PriorSection(_Section):
    kind: Literal["uniform01_coordinatewise", "standard_gaussian_coordinatewise", "uniform_ball"] = (
        "standard_gaussian_coordinatewise"
    )
    dim: int = 2


class LatticeSection(_Section):
    source: Literal["univariate_quantiles", "sobol", "uniform_grid"] = "sobol"
    seed: Optional[int] = 0  # null disables the Sobol digital shift
    size: Optional[int] = None  # null: one lattice row per data row


class LossSection(_Section):
    kind: Literal["l2", "l1", "ssim_l1"] = "l2"
    window: int = 7
    data_range: float = 1.0


class OptimizerSection(_Section):
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    schedule: Literal["constant", "cosine_warm_restarts"] = "cosine_warm_restarts"
    period_epochs: int = 50


class TrainSection(_Section):
    max_epochs: int = 200
    assignment_period: int = 3
    momentum: float = 0.7
    batch_size: int = 64
    assign_method: Literal["auto", "hungarian", "greedy"] = "auto"
    greedy_threshold: int = 2048
    assignment_mode: Literal["full", "minibatch"] = "full"
    patience: int = 25
    seed: int = 0
    decoder_epochs: int = 1
    init: Literal["random", "pca_sorted"] = "random"
    val_fraction: float = 0.1


class DecoderSection(_Section):
    hidden: list[int] = Field(default_factory=lambda: [256, 256])
    activation: Literal["relu", "tanh"] = "relu"
    output_activation: Optional[Literal["sigmoid", "identity"]] = None


class SyntheticSection(_Section):
    latent_dim: int = 2
    ambient_dim: int = 16
    n: int = 512
    kind: Literal["linear", "mlp_fixed_seed"] = "linear"
    noise_sigma: float = 0.01
    seed: int = 0
    hidden: int = 32


class DataSection(_Section):
    source: Literal["file", "synthetic"] = "file"
    path: Optional[str] = None
    labels_path: Optional[str] = None
    format: Literal["auto", "idx", "nsqt", "csv"] = "auto"
    image_shape: Optional[tuple[int, int, int]] = None
    limit: Optional[int] = None
    downsample: int = 1
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)


class RunConfig(_Section):
    schema_version: int
    prior: PriorSection = Field(default_factory=PriorSection)
    lattice: LatticeSection = Field(default_factory=LatticeSection)
    loss: LossSection = Field(default_factory=LossSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    train: TrainSection = Field(default_factory=TrainSection)
    decoder: DecoderSection = Field(default_factory=DecoderSection)
    data: DataSection = Field(default_factory=DataSection)
    output_dir: Optional[str] = None

    # -- translation ----------------------------------------------------

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(self.prior.kind, self.prior.dim)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer.model_dump())

    def loss_spec(self, image_shape=None) -> LossSpec:
        shape = image_shape if self.loss.kind == "ssim_l1" else None
        return LossSpec(self.loss.kind, shape, self.loss.window, self.loss.data_range)

    def train_config(self, image_shape=None) -> TrainConfig:
        return TrainConfig(
            **self.train.model_dump(),
            loss=self.loss_spec(image_shape),
            optimizer=self.optimizer_config(),
            hidden=tuple(self.decoder.hidden),
            activation=self.decoder.activation,
            output_activation=self.decoder.output_activation,
        )

    def lattice_for(self, n_data: int) -> Lattice:
        size = self.lattice.size if self.lattice.size is not None else n_data
        return build_lattice(self.prior_spec(), size, self.lattice.source, self.lattice.seed)

    def load_data(self) -> Dataset:
        """Load (or generate) the training set, then apply ``limit`` and ``downsample``."""
        d = self.data
        if d.source == "synthetic":
            ds, _ = make_synthetic(SyntheticSpec(**d.synthetic.model_dump()))
        else:
            if d.path is None:
                raise ConfigError("data.path is required for file data (or pass --data)")
            ds = load_dataset(d.path, d.labels_path, d.format, d.image_shape)
        if d.limit is not None:
            ds = ds.head(d.limit)
        if d.downsample != 1:
            ds = downsample(ds, d.downsample)
        return ds

    def resolved(self) -> "RunConfig":
        """Copy with file paths made absolute so the snapshot runs from any directory."""
        out = self.model_copy(deep=True)
        if out.data.path is not None:
            out.data.path = str(Path(out.data.path).resolve())
        if out.data.labels_path is not None:
            out.data.labels_path = str(Path(out.data.labels_path).resolve())
        if out.output_dir is not None:
            out.output_dir = str(Path(out.output_dir).resolve())
        return out

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def validate(cfg: RunConfig) -> RunConfig:
    """Check cross-field invariants that do not depend on the data."""
    cfg.prior_spec()
    cfg.optimizer_config()
    # image shape is unknown here; check the rest with a placeholder loss
    cfg.model_copy(update={"loss": LossSection()}).train_config()
    if cfg.lattice.size is not None and cfg.lattice.size < 1:
        raise ConfigError("lattice.size must be >= 1")
    if cfg.data.downsample < 1:
        raise ConfigError("data.downsample must be >= 1")
    if cfg.data.limit is not None and cfg.data.limit < 1:
        raise ConfigError("data.limit must be >= 1")
    try:
        SyntheticSpec(**cfg.data.synthetic.model_dump())
    except ValueError as exc:
        raise ConfigError(f"data.synthetic: {exc}") from exc
    return cfg


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    if "schema_version" not in obj:
        raise ConfigError("config is missing the required schema_version field")
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}; expected {SCHEMA_VERSION}")
    return validate(cfg)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(obj)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)
