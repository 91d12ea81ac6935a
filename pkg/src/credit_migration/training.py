"""Objective function, Adam optimizer, and the training loop.

The objective has three parts: a mean-squared "envisioning" term that pushes
the decoder output toward the gap-shifted window, plus weighted
classification losses for the migration and rating heads. The
classification losses ship in two forms:

* ``literal`` (default): L = (1/T) sum_t sum_p (1 - Y[t,p]) * P[t,p], i.e.
  one minus the true-class probability per timestep. Bounded, minimized at
  the correct prediction.
* ``nll``: standard negative log-likelihood of the true class.

Samples without a gap-shifted window contribute nothing to the envisioning
term; samples without labels contribute nothing to the classification
terms. Each term is averaged over the samples that actually feed it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .model import ForwardOutput, ModelConfig, ModelParams, forward, init_params
from .tensor import Tensor

LOSS_MODES = ("literal", "nll")
NLL_FLOOR = 1e-12


class ConfigurationError(ValueError):
    """Invalid training configuration or empty dataset."""


class DistributionError(ValueError):
    """A probability row does not sum to one."""


class OptimizerError(RuntimeError):
    """A non-finite gradient reached the optimizer."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the migration (alpha) and rating (beta) loss terms."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1024
    epochs: int = 300  # desk-scale default; the full-scale setting is 3000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss_mode: str = "literal"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _weighted_sample_mean(per_sample: Tensor, weights: np.ndarray) -> Tensor:
    total = float(weights.sum())
    if total == 0:
        raise ConfigurationError("loss: no contributing samples in batch")
    scaled = tt.multiply(per_sample, Tensor(weights / total))
    return tt.sum(scaled)


def loss_envision(
    reconstruction: Tensor, target: Tensor, sample_mask: Optional[np.ndarray] = None
) -> Tensor:
    """Mean squared error between the decoded window and the shifted target.

    For a batch, `sample_mask` marks which samples have a target; masked-out
    samples contribute zero and are excluded from the average.
    """
    if reconstruction.shape != target.shape:
        raise tt.ShapeError(
            f"loss_envision: shapes {reconstruction.shape} and {target.shape} differ"
        )
    diff = tt.subtract(reconstruction, target)
    squared = tt.multiply(diff, diff)
    if reconstruction.ndim == 2:
        return tt.mean_all(squared)
    cells = reconstruction.shape[-1] * reconstruction.shape[-2]
    per_sample = tt.scale(tt.sum(squared, axes=(1, 2)), 1.0 / cells)
    if sample_mask is None:
        sample_mask = np.ones(reconstruction.shape[0])
    return _weighted_sample_mean(per_sample, np.asarray(sample_mask, dtype=np.float64))


def _check_rows_are_distributions(probs: Tensor, what: str) -> None:
    sums = probs.data.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise DistributionError(f"{what}: probability rows do not sum to 1")


def _class_loss(
    probs: Tensor, one_hot: np.ndarray, mode: str, sample_mask: Optional[np.ndarray], what: str
) -> Tensor:
    if probs.shape != one_hot.shape:
        raise tt.ShapeError(f"{what}: probs {probs.shape} vs labels {one_hot.shape}")
    _check_rows_are_distributions(probs, what)
    timesteps = probs.shape[-2]
    if mode == "literal":
        picked = tt.multiply(probs, Tensor(1.0 - one_hot))
    elif mode == "nll":
        true_p = tt.sum(tt.multiply(probs, Tensor(one_hot)), axes=(-1,))
        picked = tt.scale(tt.log(tt.add(true_p, Tensor(NLL_FLOOR))), -1.0)
    else:
        raise ConfigurationError(f"unknown loss mode {mode!r}")
    if probs.ndim == 2:
        return tt.scale(tt.sum(picked), 1.0 / timesteps)
    reduce_axes = (1, 2) if picked.ndim == 3 else (1,)
    per_sample = tt.scale(tt.sum(picked, axes=reduce_axes), 1.0 / timesteps)
    if sample_mask is None:
        sample_mask = np.ones(probs.shape[0])
    return _weighted_sample_mean(per_sample, np.asarray(sample_mask, dtype=np.float64))


def loss_migration(
    probs: Tensor,
    one_hot: np.ndarray,
    mode: str = "literal",
    sample_mask: Optional[np.ndarray] = None,
) -> Tensor:
    return _class_loss(probs, one_hot, mode, sample_mask, "loss_migration")


def loss_rating(
    probs: Tensor,
    one_hot: np.ndarray,
    mode: str = "literal",
    sample_mask: Optional[np.ndarray] = None,
) -> Tensor:
    return _class_loss(probs, one_hot, mode, sample_mask, "loss_rating")


@dataclass
class LabelBatch:
    """Per-sample training targets, labels broadcast across timesteps.

    `migration_one_hot` is (B, T, 3) and `rating_one_hot` is (B, T, 14);
    rows of unlabeled samples are all-zero and masked out by `has_label`.
    """

    migration_one_hot: np.ndarray
    rating_one_hot: np.ndarray
    has_lag: np.ndarray
    has_label: np.ndarray

    @property
    def lagged_count(self) -> int:
        return int(self.has_lag.sum())

    @property
    def labeled_count(self) -> int:
        return int(self.has_label.sum())


@dataclass
class ObjectiveParts:
    """Float values of each loss term plus the sample counts behind them."""

    envision: float
    migration: float
    rating: float
    total: float
    lagged_count: int
    labeled_count: int


def objective(
    output: ForwardOutput,
    labels: LabelBatch,
    weights: LossWeights = LossWeights(),
    loss_mode: str = "literal",
) -> tuple[Tensor, ObjectiveParts]:
    """Combine the three loss terms: envision + alpha*migration + beta*rating.

    Terms whose feeding subset is empty (no lagged samples, no labels) are
    dropped from the graph entirely. Classification terms with zero weight
    are likewise skipped so their parameters receive exactly no gradient.
    """
    terms: list[Tensor] = []
    l_a = l_m = l_r = 0.0
    if labels.lagged_count > 0:
        if output.reconstruction is None or output.envision_target is None:
            raise ConfigurationError("objective: lagged samples present but no reconstruction")
        env = loss_envision(output.reconstruction, output.envision_target, labels.has_lag)
        l_a = env.item()
        terms.append(env)
    if labels.labeled_count > 0:
        mig = loss_migration(
            output.migration_probs, labels.migration_one_hot, loss_mode, labels.has_label
        )
        rat = loss_rating(
            output.rating_probs, labels.rating_one_hot, loss_mode, labels.has_label
        )
        l_m = mig.item()
        l_r = rat.item()
        if weights.alpha > 0:
            terms.append(tt.scale(mig, weights.alpha))
        if weights.beta > 0:
            terms.append(tt.scale(rat, weights.beta))
    if not terms:
        raise ConfigurationError("objective: no loss term has any contributing sample")
    total = terms[0]
    for term in terms[1:]:
        total = tt.add(total, term)
    parts = ObjectiveParts(
        envision=l_a,
        migration=l_m,
        rating=l_r,
        total=l_a + weights.alpha * l_m + weights.beta * l_r,
        lagged_count=labels.lagged_count,
        labeled_count=labels.labeled_count,
    )
    return total, parts


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a named parameter list.

    Parameters absent from the current graph (no gradient) are left
    untouched, so a head with zero loss weight never moves.
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], config: TrainConfig):
        self.named_params = list(named_params)
        self.lr = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.epsilon
        self.step_count = 0
        self._m = [np.zeros_like(t.data) for _, t in self.named_params]
        self._v = [np.zeros_like(t.data) for _, t in self.named_params]

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                group = name.split(".")[0]
                raise OptimizerError(
                    f"non-finite gradient in parameter group {group!r} ({name}); step aborted"
                )
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam) -> None:
    """Apply one optimizer step using the gradients currently held."""
    optimizer.step()


def clip_gradient_norm(tensors: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Sample windows and targets packed into batchable arrays."""

    x: np.ndarray          # (N, T, D)
    x_hat: np.ndarray      # (N, T, D), zero rows where absent
    has_lag: np.ndarray    # (N,) float 0/1
    migration: np.ndarray  # (N,) int, -1 where unlabeled
    rating: np.ndarray     # (N,) int, -1 where unlabeled
    has_label: np.ndarray  # (N,) float 0/1

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_samples(cls, samples, config: ModelConfig) -> "TrainingSet":
        n = len(samples)
        t_len, dim = config.seq_len, config.input_dim
        x = np.zeros((n, t_len, dim))
        x_hat = np.zeros((n, t_len, dim))
        has_lag = np.zeros(n)
        migration = np.full(n, -1, dtype=np.int64)
        rating = np.full(n, -1, dtype=np.int64)
        has_label = np.zeros(n)
        for i, s in enumerate(samples):
            if s.x.shape != (t_len, dim):
                raise ConfigurationError(
                    f"sample window shape {s.x.shape} does not match config ({t_len}, {dim})"
                )
            x[i] = s.x
            if s.x_hat is not None:
                x_hat[i] = s.x_hat
                has_lag[i] = 1.0
            if s.migration_label is not None and s.rating_label is not None:
                migration[i] = s.migration_label
                rating[i] = s.rating_label
                has_label[i] = 1.0
        return cls(x, x_hat, has_lag, migration, rating, has_label)

    def label_batch(self, idx: np.ndarray, config: ModelConfig) -> LabelBatch:
        b = idx.shape[0]
        t_len = config.seq_len
        y_m = np.zeros((b, t_len, config.num_migration_classes))
        y_r = np.zeros((b, t_len, config.num_rating_classes))
        mig = self.migration[idx]
        rat = self.rating[idx]
        labeled = mig >= 0
        rows = np.nonzero(labeled)[0]
        y_m[rows, :, mig[rows]] = 1.0
        y_r[rows, :, rat[rows]] = 1.0
        return LabelBatch(
            migration_one_hot=y_m,
            rating_one_hot=y_r,
            has_lag=self.has_lag[idx],
            has_label=self.has_label[idx],
        )


@dataclass
class EpochStats:
    epoch: int
    loss_envision: float
    loss_migration: float
    loss_rating: float
    objective: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    steps: int = 0

    @property
    def final_objective(self) -> float:
        return self.history[-1].objective


def train(
    samples,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights = LossWeights(),
    initial_params: Optional[ModelParams] = None,
) -> TrainResult:
    """Fit the model on prepared samples.

    Every sample with a gap-shifted window feeds the envisioning term;
    only labeled samples feed the classification terms. Batch order is
    reshuffled each epoch from a seeded generator, so a fixed seed gives a
    bit-identical run. The per-epoch history rows average each term over
    the samples that fed it during that epoch.
    """
    data = samples if isinstance(samples, TrainingSet) else TrainingSet.from_samples(
        samples, model_config
    )
    if len(data) == 0:
        raise ConfigurationError("train: empty dataset")
    params = initial_params if initial_params is not None else init_params(
        model_config, train_config.seed
    )
    named = params.named()
    tensors = [t for _, t in named]
    optimizer = Adam(named, train_config)
    shuffle_rng = np.random.default_rng((train_config.seed, 1))
    n = len(data)
    history: list[EpochStats] = []
    for epoch in range(1, train_config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        env_sum = mig_sum = rat_sum = 0.0
        env_n = lab_n = 0
        for start in range(0, n, train_config.batch_size):
            idx = perm[start: start + train_config.batch_size]
            labels = data.label_batch(idx, model_config)
            need_decoder = labels.lagged_count > 0
            out = forward(
                Tensor(data.x[idx]),
                params,
                model_config,
                x_hat=Tensor(data.x_hat[idx]) if need_decoder else None,
                with_reconstruction=need_decoder,
            )
            total, parts = objective(out, labels, weights, train_config.loss_mode)
            tt.backward(total)
            if train_config.clip_norm is not None:
                clip_gradient_norm(tensors, train_config.clip_norm)
            optimizer.step()
            tt.reset_gradients(tensors)
            env_sum += parts.envision * parts.lagged_count
            mig_sum += parts.migration * parts.labeled_count
            rat_sum += parts.rating * parts.labeled_count
            env_n += parts.lagged_count
            lab_n += parts.labeled_count
        l_a = env_sum / env_n if env_n else 0.0
        l_m = mig_sum / lab_n if lab_n else 0.0
        l_r = rat_sum / lab_n if lab_n else 0.0
        history.append(
            EpochStats(
                epoch=epoch,
                loss_envision=l_a,
                loss_migration=l_m,
                loss_rating=l_r,
                objective=l_a + weights.alpha * l_m + weights.beta * l_r,
            )
        )
    return TrainResult(params=params, history=history, steps=optimizer.step_count)


def write_loss_history(history: Sequence[EpochStats], path) -> None:
    """Write the per-epoch loss table as CSV."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_A", "L_M", "L_R", "objective"])
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.loss_envision),
                    repr(row.loss_migration),
                    repr(row.loss_rating),
                    repr(row.objective),
                ]
            )
