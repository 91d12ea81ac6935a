"""Multi-task transformer autoencoder for rating-migration early prediction.

The network reads a T x D feature window, adds a fixed sinusoidal position
table in input space, projects to the model width, runs one self-attention
encoder block to produce hidden features Z, and from Z computes three
outputs: a decoded T x D reconstruction trained to match the gap-shifted
window (the "envisioning" target), a 3-class migration distribution per
timestep, and a 14-class rating distribution per timestep.

All functions accept a single window shaped (T, D) or a batch shaped
(B, T, D); the tensor ops treat leading axes as batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as tt
from .ratings import ScaleError
from .tensor import Tensor

CHECKPOINT_MAGIC = "CMIG-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A parameter checkpoint file is malformed or has the wrong version."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults match the full-scale setup (hidden width 256 over 70 input
    features). Desk-scale runs shrink `model_dim` and `common_dim`; see
    `desk_config`.
    """

    seq_len: int = 4
    input_dim: int = 70
    model_dim: int = 256
    num_heads: int = 4
    common_dim: int = 64
    num_migration_classes: int = 3
    num_rating_classes: int = 14
    predict_from: str = "last"  # "last" timestep row or "mean" over timesteps

    def __post_init__(self):
        if self.seq_len < 1 or self.input_dim < 1:
            raise ValueError("seq_len and input_dim must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.model_dim // self.num_heads < 1:
            raise ValueError("per-head dimension must be >= 1")
        if self.common_dim < 1:
            raise ValueError("common_dim must be positive")
        if self.predict_from not in ("last", "mean"):
            raise ValueError(f"predict_from must be 'last' or 'mean', got {self.predict_from!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def desk_config(input_dim: int = 70, **overrides) -> ModelConfig:
    """A small configuration sized for laptop-scale experiments."""
    base = dict(input_dim=input_dim, model_dim=32, num_heads=4, common_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class AttentionParams:
    """Per-head query/key/value maps plus the shared output map."""

    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    out: Tensor


@dataclass
class BlockParams:
    """One residual block: self-attention, linear feed-forward, two layer norms."""

    attention: AttentionParams
    feedforward: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    """All trainable tensors, grouped encoder / decoder / prediction heads."""

    input_proj: Tensor
    encoder: BlockParams
    decoder: BlockParams
    output_proj: Tensor
    head_common: Tensor
    head_migration: Tensor
    head_rating: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) listing; names key the checkpoint format."""
        out: list[tuple[str, Tensor]] = [("input_proj", self.input_proj)]
        for prefix, block in (("enc", self.encoder), ("dec", self.decoder)):
            att = block.attention
            for i, t in enumerate(att.query):
                out.append((f"{prefix}.q{i}", t))
            for i, t in enumerate(att.key):
                out.append((f"{prefix}.k{i}", t))
            for i, t in enumerate(att.value):
                out.append((f"{prefix}.v{i}", t))
            out.append((f"{prefix}.attn_out", att.out))
            out.append((f"{prefix}.ff", block.feedforward))
            out.append((f"{prefix}.ln1.gain", block.ln1_gain))
            out.append((f"{prefix}.ln1.bias", block.ln1_bias))
            out.append((f"{prefix}.ln2.gain", block.ln2_gain))
            out.append((f"{prefix}.ln2.bias", block.ln2_bias))
        out.append(("dec.out_proj", self.output_proj))
        out.append(("head.common", self.head_common))
        out.append(("head.migration", self.head_migration))
        out.append(("head.rating", self.head_rating))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Partition into the encoder / decoder / heads parameter groups.

        The learned input projection rides with the encoder group since it
        feeds the encoder stream.
        """
        grouped: dict[str, list[tuple[str, Tensor]]] = {
            "encoder": [],
            "decoder": [],
            "heads": [],
        }
        for name, t in self.named():
            if name.startswith("dec"):
                grouped["decoder"].append((name, t))
            elif name.startswith("head"):
                grouped["heads"].append((name, t))
            else:
                grouped["encoder"].append((name, t))
        return grouped

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors()]))


def parameter_count(config: ModelConfig) -> int:
    """Total trainable scalars as a pure function of the configuration."""
    d, dk, h = config.model_dim, config.head_dim, config.num_heads
    dim_in, c = config.input_dim, config.common_dim
    per_block = 3 * h * d * dk + d * d + d * d + 4 * d
    heads = d * c + c * config.num_migration_classes + c * config.num_rating_classes
    return dim_in * d + 2 * per_block + d * dim_in + heads


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per weight.

    Layer-norm gains start at 1 and biases at 0. Draw order is fixed so a
    seed fully determines the parameter values.
    """
    rng = np.random.default_rng(seed)
    d, dk, h = config.model_dim, config.head_dim, config.num_heads

    def weight(fan_in: int, fan_out: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    def block() -> BlockParams:
        att = AttentionParams(
            query=[weight(d, dk) for _ in range(h)],
            key=[weight(d, dk) for _ in range(h)],
            value=[weight(d, dk) for _ in range(h)],
            out=weight(d, d),
        )
        return BlockParams(
            attention=att,
            feedforward=weight(d, d),
            ln1_gain=Tensor(np.ones(d), requires_grad=True),
            ln1_bias=Tensor(np.zeros(d), requires_grad=True),
            ln2_gain=Tensor(np.ones(d), requires_grad=True),
            ln2_bias=Tensor(np.zeros(d), requires_grad=True),
        )

    return ModelParams(
        input_proj=weight(config.input_dim, d),
        encoder=block(),
        decoder=block(),
        output_proj=weight(d, config.input_dim),
        head_common=weight(d, config.common_dim),
        head_migration=weight(config.common_dim, config.num_migration_classes),
        head_rating=weight(config.common_dim, config.num_rating_classes),
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def positional_encoding(timesteps: int, width: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape (timesteps, width).

    Column 2i holds sin(pos / 10000^(2i/width)) and column 2i+1 holds
    cos(pos / 10000^(2i/width)).
    """
    if timesteps < 1 or width < 2:
        raise ValueError("positional encoding needs timesteps >= 1 and width >= 2")
    pos = np.arange(timesteps, dtype=np.float64)[:, None]
    idx = np.arange(0, width, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / width)
    table = np.zeros((timesteps, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)[:, : table[:, 1::2].shape[1]]
    return table


def encode_inputs(
    x: Tensor, x_hat: Optional[Tensor], config: ModelConfig
) -> tuple[Tensor, Optional[Tensor]]:
    """Add the input-space position table to the window(s)."""
    if x.shape[-2:] != (config.seq_len, config.input_dim):
        raise tt.ShapeError(
            f"encode_inputs: window shape {x.shape} does not end in "
            f"({config.seq_len}, {config.input_dim})"
        )
    pe = Tensor(positional_encoding(config.seq_len, config.input_dim))
    h = tt.add(x, pe)
    if x_hat is None:
        return h, None
    if x_hat.shape != x.shape:
        raise tt.ShapeError(f"encode_inputs: shapes {x.shape} and {x_hat.shape} differ")
    return h, tt.add(x_hat, pe)


def multi_head_attention(x: Tensor, params: AttentionParams, head_dim: int) -> Tensor:
    """Scaled dot-product self-attention over timesteps, one softmax per head."""
    inv_sqrt_dk = 1.0 / np.sqrt(head_dim)
    heads = []
    for wq, wk, wv in zip(params.query, params.key, params.value):
        q = tt.matmul(x, wq)
        k = tt.matmul(x, wk)
        v = tt.matmul(x, wv)
        scores = tt.scale(tt.matmul(q, tt.transpose(k)), inv_sqrt_dk)
        heads.append(tt.matmul(tt.softmax_rows(scores), v))
    return tt.matmul(tt.concat_last_dim(heads), params.out)


def encoder_block(h: Tensor, block: BlockParams, head_dim: int) -> Tensor:
    """Residual attention then residual linear feed-forward, each layer-normed."""
    attended = multi_head_attention(h, block.attention, head_dim)
    mid = tt.layer_norm(tt.add(h, attended), block.ln1_gain, block.ln1_bias)
    ff = tt.matmul(mid, block.feedforward)
    return tt.layer_norm(tt.add(mid, ff), block.ln2_gain, block.ln2_bias)


def decoder_block(z: Tensor, block: BlockParams, output_proj: Tensor, head_dim: int) -> Tensor:
    """Same block structure as the encoder, then a projection back to input width."""
    decoded = encoder_block(z, block, head_dim)
    return tt.matmul(decoded, output_proj)


def predict_heads(
    z: Tensor, params: ModelParams
) -> tuple[Tensor, Tensor, Tensor]:
    """Common embedding plus softmax heads for migration and rating."""
    common = tt.relu(tt.matmul(z, params.head_common))
    migration = tt.softmax_rows(tt.matmul(common, params.head_migration))
    rating = tt.softmax_rows(tt.matmul(common, params.head_rating))
    return common, migration, rating


@dataclass
class ForwardOutput:
    """Results of one forward pass.

    `reconstruction` and `envision_target` are populated only when the pass
    is run for training; inference never needs the decoder or the
    gap-shifted window.
    """

    z: Tensor
    migration_probs: Tensor
    rating_probs: Tensor
    reconstruction: Optional[Tensor] = None
    envision_target: Optional[Tensor] = None


def forward(
    x: Tensor,
    params: ModelParams,
    config: ModelConfig,
    x_hat: Optional[Tensor] = None,
    with_reconstruction: bool = True,
) -> ForwardOutput:
    """Run the full network on one window or a batch of windows.

    The migration and rating outputs depend only on `x`; the optional
    gap-shifted window `x_hat` merely becomes the reconstruction target.
    """
    h, h_hat = encode_inputs(x, x_hat, config)
    projected = tt.matmul(h, params.input_proj)
    z = encoder_block(projected, params.encoder, config.head_dim)
    _, migration, rating = predict_heads(z, params)
    reconstruction = None
    if with_reconstruction:
        reconstruction = decoder_block(z, params.decoder, params.output_proj, config.head_dim)
    return ForwardOutput(
        z=z,
        migration_probs=migration,
        rating_probs=rating,
        reconstruction=reconstruction,
        envision_target=h_hat,
    )


def class_prediction(probs: np.ndarray, config: ModelConfig) -> int:
    """Reduce per-timestep class distributions to one predicted class index.

    Takes the final-timestep row (the as-of date) by default, or the mean
    distribution over timesteps when configured. Ties break toward the
    lowest class index.
    """
    if probs.ndim != 2:
        raise tt.ShapeError(f"class_prediction: expected (T, classes), got {probs.shape}")
    row = probs[-1] if config.predict_from == "last" else probs.mean(axis=0)
    return int(np.argmax(row))


def migration_from_rating(predicted_rating: int, current_rating: int, num_classes: int = 14) -> int:
    """Derive a migration class by comparing rating indices (best first).

    Returns 0 for upgrade, 1 for unchanged, 2 for downgrade, matching the
    column order of the migration head.
    """
    for value, label in ((predicted_rating, "predicted"), (current_rating, "current")):
        if not 0 <= value < num_classes:
            raise ScaleError(f"{label} rating index {value} outside 0..{num_classes - 1}")
    if predicted_rating < current_rating:
        return 0
    if predicted_rating == current_rating:
        return 1
    return 2


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

_CONFIG_STR_FIELDS = ("predict_from",)


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write a versioned, textual key->array map of all parameters."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    cfg_items = " ".join(f"{f.name}={getattr(config, f.name)}" for f in fields(config))
    lines.append(f"config {cfg_items}")
    for name, t in params.named():
        shape = "x".join(str(s) for s in t.shape)
        values = " ".join(repr(float(v)) for v in t.data.ravel())
        lines.append(f"param {name} {shape}")
        lines.append(values)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint written by `save_checkpoint`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: missing {CHECKPOINT_MAGIC} header")
    version = lines[0].split("v", 1)[-1]
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise CheckpointError(f"{path}: missing config line")
    cfg_kwargs = {}
    for item in lines[1][len("config "):].split():
        key, _, raw = item.partition("=")
        cfg_kwargs[key] = raw if key in _CONFIG_STR_FIELDS else int(raw)
    config = ModelConfig(**cfg_kwargs)

    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) != 3 or head[0] != "param":
            raise CheckpointError(f"{path}: bad param header at line {i + 1}")
        name = head[1]
        shape = tuple(int(s) for s in head[2].split("x"))
        values = np.array(lines[i + 1].split(), dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {name} has {values.size} values, expected {shape}")
        arrays[name] = values.reshape(shape)
        i += 2

    params = init_params(config, seed=0)
    for name, t in params.named():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}"
            )
        t.data = arrays[name]
    return params, config
