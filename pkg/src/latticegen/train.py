"""Alternating decoder regression and quantile assignment.

Each data row ``i`` owns a latent code ``Z[i]`` (the memory bank). One epoch
regresses the data on the bank with AdamW; every ``assignment_period`` epochs
the data are matched to the lattice by solving a linear assignment problem on
``C[i, k] = loss(X[i], G(Q[k]))`` and the bank moves toward the matched
lattice rows: ``Z[i] <- rho * Q[pi(i)] + (1 - rho) * Z[i]``.

Two assignment modes exist: ``full`` solves one n x n problem, ``minibatch``
interleaves generator updates with m x m problems on random batches of data
and lattice rows, touching only the rows of the batch.
"""

from __future__ import annotations

import csv
import logging
import math
import resource
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import assign as assign_mod
from .dataio import write_tensor
from .errors import ConfigError, NumericError, ShapeError
from .metrics import LossSpec, loss_and_grad, pairwise_loss
from .prior import Lattice, PriorSpec, sample_prior
from .tensorcore import (
    DecoderParams,
    OptimizerConfig,
    OptimizerState,
    adamw_step,
    backward,
    early_stop_update,
    forward,
    init_decoder,
    init_optimizer,
    period_fraction,
    save_checkpoint,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "mean_loss", "assignment_cost", "assign_method", "epoch_ms")


@dataclass
class TrainConfig:
    max_epochs: int = 200
    assignment_period: int = 3
    momentum: float = 0.7
    batch_size: int = 64
    assign_method: str = "auto"
    greedy_threshold: int = 2048
    assignment_mode: str = "full"
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    patience: int = 25
    seed: int = 0
    decoder_epochs: int = 1
    init: str = "random"
    val_fraction: float = 0.1
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    output_activation: str | None = None  # None: sigmoid for images, identity otherwise

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum rho must lie in [0, 1), got {self.momentum}")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.assignment_period < 1:
            raise ConfigError("assignment_period K must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.assignment_mode == "minibatch" and self.batch_size < 2:
            raise ConfigError("mini-batch assignment needs batch_size >= 2")
        if self.assign_method not in ("auto", "hungarian", "greedy"):
            raise ConfigError(f"assign_method must be auto, hungarian or greedy, not {self.assign_method!r}")
        if self.assignment_mode not in ("full", "minibatch"):
            raise ConfigError(f"assignment_mode must be full or minibatch, not {self.assignment_mode!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.decoder_epochs < 0:
            raise ConfigError("decoder_epochs must be >= 0")
        if self.init not in ("random", "pca_sorted"):
            raise ConfigError(f"init must be random or pca_sorted, not {self.init!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)

    def method_for(self, n: int) -> str:
        if self.assign_method != "auto":
            return self.assign_method
        return "hungarian" if n <= self.greedy_threshold else "greedy"


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_loss: float | None
    assignment_cost: float | None
    assign_method: str
    epoch_ms: float
    peak_rss_mb: float | None


@dataclass
class TrainState:
    latents: np.ndarray
    params: DecoderParams
    opt_state: OptimizerState
    assignment: np.ndarray  # lattice row currently assigned to each data row
    train_idx: np.ndarray
    val_idx: np.ndarray
    rng: np.random.Generator
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    best_val: float = math.inf
    patience_counter: int = 0
    stopped: bool = False
    last_cost: float | None = None


@dataclass(frozen=True)
class SampleRequest:
    count: int
    mode: str = "prior_draws"
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("sample count must be >= 1")
        if self.mode not in ("lattice_rows", "prior_draws"):
            raise ValueError(f"sample mode must be lattice_rows or prior_draws, not {self.mode!r}")


@dataclass
class FitResult:
    params: DecoderParams
    latents: np.ndarray
    assignment: np.ndarray
    history: list[EpochRecord]
    state: TrainState


# ---------------------------------------------------------------------------


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _pca_order(data: np.ndarray) -> np.ndarray:
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    # sign convention: largest-magnitude loading is positive
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return np.argsort(centered @ axis, kind="stable")


def init_state(data, lattice: Lattice, config: TrainConfig) -> TrainState:
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if data.ndim != 2 or n < 1:
        raise ShapeError(f"data must be a non-empty (n, p) matrix, got {data.shape}")
    if config.assignment_mode == "full" and lattice.n != n:
        raise ShapeError(f"full-batch assignment needs {n} lattice rows, got {lattice.n}")
    if lattice.n < n:
        raise ShapeError(f"lattice has {lattice.n} rows for {n} data rows")
    if config.loss.image_shape is not None and config.loss.dim != data.shape[1]:
        raise ShapeError(f"loss image shape {config.loss.image_shape} does not match width {data.shape[1]}")

    s_init, s_split, s_decoder, s_loop = np.random.SeedSequence(config.seed).spawn(4)
    if config.init == "random":
        assignment = np.random.default_rng(s_init).permutation(lattice.n)[:n]
    else:
        data_order = _pca_order(data)
        lattice_order = np.argsort(lattice.points[:, 0], kind="stable")
        assignment = np.empty(n, dtype=np.int64)
        assignment[data_order] = lattice_order[:n] if lattice.n == n else lattice_order[
            np.linspace(0, lattice.n - 1, n).round().astype(np.int64)
        ]
    assignment = assignment.astype(np.int64)

    n_val = int(n * config.val_fraction)
    if n - n_val < 1:
        n_val = 0
    perm = np.random.default_rng(s_split).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    out_act = config.output_activation or ("sigmoid" if config.loss.image_shape else "identity")
    widths = [lattice.dim, *config.hidden, data.shape[1]]
    params = init_decoder(widths, config.activation, out_act, _seed_int(s_decoder))
    return TrainState(
        latents=lattice.points[assignment].copy(),
        params=params,
        opt_state=init_optimizer(params),
        assignment=assignment,
        train_idx=train_idx,
        val_idx=val_idx,
        rng=np.random.default_rng(s_loop),
    )


def _batch_update(state: TrainState, data: np.ndarray, rows: np.ndarray, config: TrainConfig, frac: float):
    z = state.latents[rows]
    pred = forward(state.params, z)
    values, grad = loss_and_grad(config.loss, data[rows], pred)
    batch_loss = float(values.sum())
    if not math.isfinite(batch_loss):
        raise NumericError("non-finite training loss")
    grads, _ = backward(state.params, z, grad / len(rows))
    state.params, state.opt_state = adamw_step(
        state.params, state.opt_state, grads, config.optimizer, frac
    )
    return batch_loss


def _progress(state: TrainState, done: int, total: int, config: TrainConfig) -> float:
    return period_fraction((state.epoch - 1) + done / total, config.optimizer.period_epochs)


def mean_loss(params: DecoderParams, data, latents, rows, spec: LossSpec) -> float:
    if len(rows) == 0:
        return math.nan
    pred = forward(params, latents[rows])
    values, _ = loss_and_grad(spec, np.asarray(data)[rows], pred)
    return float(values.mean())


def decoder_step(state: TrainState, data, config: TrainConfig) -> float:
    """Regress data on the memory bank for ``config.decoder_epochs`` passes.

    Returns the mean per-sample training loss, accumulated over the last pass
    (or evaluated directly when no pass is configured).
    """
    data = np.asarray(data, dtype=np.float64)
    train = state.train_idx
    if config.decoder_epochs == 0 or len(train) == 0:
        return mean_loss(state.params, data, state.latents, train, config.loss)
    n_batches = math.ceil(len(train) / config.batch_size)
    for _ in range(config.decoder_epochs):
        order = state.rng.permutation(train)
        total = 0.0
        for b in range(n_batches):
            rows = order[b * config.batch_size : (b + 1) * config.batch_size]
            try:
                total += _batch_update(state, data, rows, config, _progress(state, b, n_batches, config))
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {state.epoch}, batch {b})") from exc
    return total / len(train)


def _momentum(rho: float, target: np.ndarray, previous: np.ndarray) -> np.ndarray:
    return rho * target + (1.0 - rho) * previous


def assignment_step_full(state: TrainState, data, lattice: Lattice, config: TrainConfig):
    """Solve the n x n assignment and move every latent toward its match."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] != lattice.n:
        raise ShapeError(f"full assignment needs equal sizes, got {data.shape[0]} and {lattice.n}")
    cost = assign_mod.build_cost_matrix(data, state.params, lattice, config.loss)
    result = assign_mod.solve(cost, config.method_for(data.shape[0]))
    state.latents = _momentum(config.momentum, lattice.points[result.mapping], state.latents)
    state.assignment = result.mapping.astype(np.int64)
    state.last_cost = result.total_cost
    return result


def assignment_step_minibatch(state: TrainState, data, lattice: Lattice, batch, lattice_rows, config: TrainConfig):
    """Match a data batch to a lattice subset of equal size; other rows are untouched."""
    batch = np.asarray(batch, dtype=np.int64)
    lattice_rows = np.asarray(lattice_rows, dtype=np.int64)
    if batch.shape != lattice_rows.shape or batch.ndim != 1 or len(batch) == 0:
        raise ValueError(f"batch and lattice subset must have equal size, got {batch.shape} and {lattice_rows.shape}")
    if len(np.unique(batch)) != len(batch) or len(np.unique(lattice_rows)) != len(lattice_rows):
        raise ValueError("duplicate indices in batch or lattice subset")
    data = np.asarray(data, dtype=np.float64)
    decoded = forward(state.params, lattice.points[lattice_rows])
    cost = pairwise_loss(config.loss, data[batch], decoded)
    if not np.all(np.isfinite(cost)):
        raise NumericError("non-finite entry in batch cost matrix")
    result = assign_mod.solve(cost, config.method_for(len(batch)))
    chosen = lattice_rows[result.mapping]
    state.latents[batch] = _momentum(config.momentum, lattice.points[chosen], state.latents[batch])
    state.assignment[batch] = chosen
    return result


def _minibatch_epoch(state: TrainState, data: np.ndarray, lattice: Lattice, config: TrainConfig):
    n = data.shape[0]
    m = config.batch_size
    order = state.rng.permutation(n)
    is_train = np.zeros(n, dtype=bool)
    is_train[state.train_idx] = True
    n_batches = math.ceil(n / m)
    loss_total = 0.0
    cost_total = 0.0
    trained = 0
    for b in range(n_batches):
        batch = order[b * m : (b + 1) * m]
        rows = batch[is_train[batch]]
        if len(rows) and config.decoder_epochs > 0:
            try:
                loss_total += _batch_update(state, data, rows, config, _progress(state, b, n_batches, config))
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {state.epoch}, batch {b})") from exc
            trained += len(rows)
        subset = state.rng.choice(lattice.n, size=len(batch), replace=False)
        cost_total += assignment_step_minibatch(state, data, lattice, batch, subset, config).total_cost
    state.last_cost = cost_total
    if trained == 0:
        return mean_loss(state.params, data, state.latents, state.train_idx, config.loss)
    return loss_total / trained


def _peak_rss_mb() -> float | None:
    try:
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    except (AttributeError, ValueError, OSError):
        return None


def run_epoch(state: TrainState, data, lattice: Lattice, config: TrainConfig) -> EpochRecord:
    data = np.asarray(data, dtype=np.float64)
    start = time.perf_counter()
    state.epoch += 1
    due = state.epoch % config.assignment_period == 0
    cost = None
    method = ""
    if due and config.assignment_mode == "minibatch":
        train_loss = _minibatch_epoch(state, data, lattice, config)
        cost, method = state.last_cost, config.method_for(min(config.batch_size, data.shape[0]))
    else:
        train_loss = decoder_step(state, data, config)
        if due:
            result = assignment_step_full(state, data, lattice, config)
            cost, method = result.total_cost, result.method
    if not math.isfinite(train_loss):
        raise NumericError(f"non-finite training loss at epoch {state.epoch}")

    val_loss = None
    if len(state.val_idx):
        val_loss = mean_loss(state.params, data, state.latents, state.val_idx, config.loss)
    monitored = val_loss if val_loss is not None else train_loss
    state.best_val, state.patience_counter, state.stopped = early_stop_update(
        state.best_val, monitored, state.patience_counter, config.patience
    )
    record = EpochRecord(
        epoch=state.epoch,
        mean_loss=train_loss,
        val_loss=val_loss,
        assignment_cost=cost,
        assign_method=method,
        epoch_ms=(time.perf_counter() - start) * 1e3,
        peak_rss_mb=_peak_rss_mb(),
    )
    state.history.append(record)
    log.debug("epoch %d loss %.6g cost %s", record.epoch, train_loss, cost)
    return record


def dump_state(state: TrainState, directory=None) -> Path:
    path = Path(directory) if directory is not None else Path(tempfile.mkdtemp(prefix="latticegen-dump-"))
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path / "model.nsql", state.params)
    if np.all(np.isfinite(state.latents)):
        write_tensor(path / "latents.nsqt", state.latents)
    return path


def fit(data, lattice: Lattice, config: TrainConfig, state: TrainState | None = None, dump_dir=None, callback=None) -> FitResult:
    """Train until ``max_epochs`` or early stopping; returns the final decoder and bank."""
    data = np.asarray(data, dtype=np.float64)
    if state is None:
        state = init_state(data, lattice, config)
    while state.epoch < config.max_epochs and not state.stopped:
        try:
            record = run_epoch(state, data, lattice, config)
        except NumericError as exc:
            where = dump_state(state, dump_dir)
            raise NumericError(f"{exc}; state dumped to {where}") from exc
        if callback is not None:
            callback(record, state)
    return FitResult(state.params, state.latents, state.assignment, state.history, state)


def training_loss(result: FitResult, data, config: TrainConfig) -> float:
    """Mean loss of the fitted decoder over the training rows."""
    return mean_loss(result.params, data, result.latents, result.state.train_idx, config.loss)


# ---------------------------------------------------------------------------
# Sampling and export


def sample(params: DecoderParams, req: SampleRequest, prior: PriorSpec, lattice: Lattice | None = None) -> np.ndarray:
    if prior.dim != params.input_dim:
        raise ShapeError(f"prior dimension {prior.dim} != decoder input width {params.input_dim}")
    if req.mode == "lattice_rows":
        if lattice is None:
            raise ValueError("lattice_rows sampling needs the training lattice")
        if req.count > lattice.n:
            raise ValueError(f"requested {req.count} lattice rows, lattice has {lattice.n}")
        z = lattice.points[: req.count]
    else:
        z = sample_prior(prior, req.count, req.seed)
    return forward(params, z)


def export_latents(latents, labels=None) -> list[tuple]:
    """Rows of ``(index, z_0, ..., z_{d-1}[, label])`` in data order."""
    latents = np.asarray(latents, dtype=np.float64)
    rows = []
    for i, z in enumerate(latents):
        row = (i, *(float(v) for v in z))
        if labels is not None:
            row = row + (int(labels[i]),)
        rows.append(row)
    return rows


def write_latents_csv(path_or_file, latents, labels=None) -> None:
    latents = np.asarray(latents)
    header = ["index"] + [f"z{j}" for j in range(latents.shape[1])]
    if labels is not None:
        header.append("label")
    _write_rows(path_or_file, header, [
        [str(r[0])] + [repr(v) for v in r[1 : 1 + latents.shape[1]]] + [str(v) for v in r[1 + latents.shape[1]:]]
        for r in export_latents(latents, labels)
    ])


def history_rows(history: list[EpochRecord], timing: bool = True) -> list[list[str]]:
    rows = []
    for rec in history:
        row = [
            str(rec.epoch),
            repr(rec.mean_loss),
            "" if rec.assignment_cost is None else repr(rec.assignment_cost),
            rec.assign_method,
        ]
        if timing:
            row.append(f"{rec.epoch_ms:.3f}")
        rows.append(row)
    return rows


def write_history_csv(path_or_file, history: list[EpochRecord]) -> None:
    _write_rows(path_or_file, list(HISTORY_COLUMNS), history_rows(history))


def _write_rows(path_or_file, header, rows) -> None:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if own:
            fh.close()
