"""Contrastive alignment of a text projection head over frozen embeddings.

The head is an affine map from frozen text features into the image embedding
space, followed by L2 normalization. Training minimizes the symmetric
InfoNCE objective: for a batch of N matched pairs with similarity matrix
S[k, n] = <text_k, image_n>, the image-to-text term softmaxes each column
over texts, the text-to-image term softmaxes each row over images, and the
loss is the mean of the two cross-entropies with the matched index as the
positive. Similarities are plain dot products of unit vectors (cosine).
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import (
    as_float_matrix,
    as_float_vector,
    check_positive_int,
    check_positive_real,
    check_unit_rows,
)
from .errors import CheckpointError, TrainingDiverged

CHECKPOINT_MAGIC = b"XRC1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ProjectionHead:
    """Affine text projection: feature @ weight + bias, then unit normalization."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise ValueError(f"inconsistent head shapes: weight {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_text(self) -> int:
        return self.weight.shape[0]

    @property
    def d_joint(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def identity(cls, d_text: int, d_joint: int) -> "ProjectionHead":
        """Identity-padded (or truncated) weight with zero bias."""
        w = np.zeros((d_text, d_joint))
        for i in range(min(d_text, d_joint)):
            w[i, i] = 1.0
        return cls(weight=w, bias=np.zeros(d_joint))


def project(head: ProjectionHead, text_feature) -> np.ndarray:
    """Project one feature vector (or a stack) to a unit vector in joint space."""
    feats = np.asarray(text_feature, dtype=np.float64)
    single = feats.ndim == 1
    if single:
        feats = feats[None, :]
    feats = as_float_matrix(feats, "text features", dim=head.d_text)
    pre = feats @ head.weight + head.bias
    norms = np.linalg.norm(pre, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("projection produced a zero vector; cannot normalize")
    out = pre / norms[:, None]
    return out[0] if single else out


def contrastive_loss(text_vectors, image_vectors, temperature: float):
    """Symmetric InfoNCE loss and its exact gradient w.r.t. the text vectors.

    Both inputs must be (N, d) stacks of unit vectors with N >= 2. Returns
    ``(loss, grad)`` where ``grad`` has the same shape as ``text_vectors``.
    """
    tau = check_positive_real(temperature, "temperature")
    T = as_float_matrix(text_vectors, "text vectors")
    I = as_float_matrix(image_vectors, "image vectors", dim=T.shape[1])
    n = T.shape[0]
    if I.shape[0] != n:
        raise ValueError(f"batch size mismatch: {n} text vs {I.shape[0]} image vectors")
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    check_unit_rows(T, "text vectors")
    check_unit_rows(I, "image vectors")

    z = (T @ I.T) / tau
    # Row softmax: text k classifying images. Column softmax: image k classifying texts.
    p_row = np.exp(z - z.max(axis=1, keepdims=True))
    p_row /= p_row.sum(axis=1, keepdims=True)
    p_col = np.exp(z - z.max(axis=0, keepdims=True))
    p_col /= p_col.sum(axis=0, keepdims=True)

    diag = np.arange(n)
    loss_t2i = -np.mean(np.log(p_row[diag, diag]))
    loss_i2t = -np.mean(np.log(p_col[diag, diag]))
    loss = 0.5 * (loss_t2i + loss_i2t)

    delta = np.eye(n)
    grad = ((p_row - delta) + (p_col - delta)) @ I / (2.0 * n * tau)
    return float(loss), grad


@dataclass(frozen=True)
class AugmentationPool:
    """The original caption feature plus n rewrite features for one image."""

    original: np.ndarray
    rewrites: tuple = ()

    def __post_init__(self):
        orig = as_float_vector(self.original, "original feature")
        object.__setattr__(self, "original", orig)
        rews = tuple(as_float_vector(r, "rewrite feature", dim=orig.shape[0]) for r in self.rewrites)
        object.__setattr__(self, "rewrites", rews)

    @property
    def members(self) -> tuple:
        return (self.original,) + self.rewrites


def sample_positive(pool: AugmentationPool, rng: np.random.Generator) -> np.ndarray:
    """Draw one member uniformly from the original plus all rewrites."""
    members = pool.members
    if len(members) == 1:
        return members[0]
    return members[int(rng.integers(len(members)))]


def _grad_through_normalization(g_out: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d/dx (x/|x|) applied to upstream gradient: (g - u (u.g)) / |x|
    inner = np.sum(g_out * unit, axis=1, keepdims=True)
    return (g_out - unit * inner) / norms[:, None]


class _AdamState:
    def __init__(self, shapes):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1 ** self.t)
            v_hat = v / (1 - ADAM_BETA2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class ContrastiveProjection(BaseEstimator, TransformerMixin):
    """Trains the text projection head; image vectors stay frozen.

    Parameters mirror the training configuration: batch size, learning rate,
    epoch count, softmax temperature, optimizer ("adam" or "sgd"), seed, and
    the scale of the uniform noise added to the identity-padded initial
    weight. ``fit(X, y, rewrites=...)`` takes frozen text features ``X``,
    unit image vectors ``y``, and optionally one stack of rewrite features
    per sample; each step samples one positive per image uniformly from the
    original feature and its rewrites.
    """

    def __init__(
        self,
        batch_size: int = 32,
        learning_rate: float = 0.05,
        epochs: int = 30,
        temperature: float = 0.07,
        optimizer: str = "adam",
        seed: int = 0,
        init_noise: float = 0.01,
    ):
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.temperature = temperature
        self.optimizer = optimizer
        self.seed = seed
        self.init_noise = init_noise

    def _validate_params_(self):
        check_positive_int(self.batch_size, "batch_size")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate!r}")
        check_positive_int(self.epochs, "epochs")
        check_positive_real(self.temperature, "temperature")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def fit(self, X, y, rewrites: Sequence | None = None):
        """Train the head on matched (text feature, image vector) pairs."""
        self._validate_params_()
        X = as_float_matrix(X, "text features")
        y = as_float_matrix(y, "image vectors")
        check_unit_rows(y, "image vectors")
        n = X.shape[0]
        if y.shape[0] != n:
            raise ValueError(f"X has {n} rows but y has {y.shape[0]}")
        if n < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} pairs, got {n}")
        if n % self.batch_size == 1:
            raise ValueError(
                f"{n} pairs with batch_size={self.batch_size} leave a trailing batch of 1; "
                "adjust the batch size"
            )
        if rewrites is None:
            pools = [AugmentationPool(original=X[i]) for i in range(n)]
        else:
            if len(rewrites) != n:
                raise ValueError(f"rewrites has {len(rewrites)} entries, expected {n}")
            pools = [
                AugmentationPool(original=X[i], rewrites=tuple(np.atleast_2d(r)) if r is not None and len(r) else ())
                for i, r in enumerate(rewrites)
            ]

        d_text, d_joint = X.shape[1], y.shape[1]
        rng = np.random.default_rng(self.seed)
        weight = ProjectionHead.identity(d_text, d_joint).weight.copy()
        weight += rng.uniform(-self.init_noise, self.init_noise, size=weight.shape)
        bias = np.zeros(d_joint)

        adam = _AdamState([weight.shape, bias.shape]) if self.optimizer == "adam" else None
        steps_per_epoch = -(-n // self.batch_size)
        epoch_losses: list[float] = []
        epoch_wall_ms: list[float] = []
        step = 0
        for _epoch in range(self.epochs):
            epoch_start = time.perf_counter()
            perm = rng.permutation(n)
            step_losses = []
            for b in range(steps_per_epoch):
                batch = perm[b * self.batch_size : (b + 1) * self.batch_size]
                feats = np.stack([sample_positive(pools[i], rng) for i in batch])
                pre = feats @ weight + bias
                norms = np.linalg.norm(pre, axis=1)
                if not (
                    np.all(np.isfinite(pre))
                    and np.all(np.isfinite(norms))
                    and np.all(norms > 1e-12)
                ):
                    raise TrainingDiverged(f"non-finite projection at step {step}", step=step)
                unit = pre / norms[:, None]
                loss, g_unit = contrastive_loss(unit, y[batch], self.temperature)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}", step=step)
                g_pre = _grad_through_normalization(g_unit, unit, norms)
                g_weight = feats.T @ g_pre
                g_bias = g_pre.sum(axis=0)
                if adam is not None:
                    adam.step([weight, bias], [g_weight, g_bias], self.learning_rate)
                else:
                    weight -= self.learning_rate * g_weight
                    bias -= self.learning_rate * g_bias
                step_losses.append(loss)
                step += 1
            epoch_losses.append(float(np.mean(step_losses)))
            epoch_wall_ms.append((time.perf_counter() - epoch_start) * 1e3)

        self.weight_ = weight
        self.bias_ = bias
        self.epoch_losses_ = epoch_losses
        self.epoch_wall_ms_ = epoch_wall_ms
        self.n_features_in_ = d_text
        self.n_steps_ = step
        return self

    @property
    def head_(self) -> ProjectionHead:
        if not hasattr(self, "weight_"):
            raise AttributeError("estimator is not fitted yet")
        return ProjectionHead(weight=self.weight_, bias=self.bias_)

    def transform(self, X) -> np.ndarray:
        """Project text features to unit vectors in the joint space."""
        return project(self.head_, X)

    def config_hash(self) -> str:
        return config_hash(self.get_params())


def config_hash(params: dict) -> str:
    """Hex sha256 of the canonical JSON form of a parameter mapping."""
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(head: ProjectionHead, path, *, seed: int = 0, cfg_hash: str = "") -> None:
    """Write a head checkpoint: magic, dims, seed, config hash, float64 parameters."""
    path = Path(path)
    hash_bytes = cfg_hash.encode("ascii")
    if len(hash_bytes) > 0xFFFF:
        raise ValueError("config hash too long")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", head.d_text, head.d_joint))
        fh.write(struct.pack("<q", seed))
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(head.weight.astype("<f8").tobytes())
        fh.write(head.bias.astype("<f8").tobytes())


def load_checkpoint(path, expected_dims: tuple[int, int] | None = None):
    """Read a checkpoint; returns (head, metadata dict)."""
    path = Path(path)

    def read_exact(fh, count, what):
        data = fh.read(count)
        if len(data) != count:
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated {what})")
        return data

    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        d_text, d_joint = struct.unpack("<II", read_exact(fh, 8, "dims"))
        if expected_dims is not None and (d_text, d_joint) != tuple(expected_dims):
            raise CheckpointError(
                f"{path}: dim mismatch: expected {tuple(expected_dims)}, found {(d_text, d_joint)}"
            )
        (seed,) = struct.unpack("<q", read_exact(fh, 8, "seed"))
        (hash_len,) = struct.unpack("<H", read_exact(fh, 2, "hash length"))
        cfg_hash = read_exact(fh, hash_len, "config hash").decode("ascii")
        weight = np.frombuffer(
            read_exact(fh, 8 * d_text * d_joint, "weight"), dtype="<f8"
        ).reshape(d_text, d_joint)
        bias = np.frombuffer(read_exact(fh, 8 * d_joint, "bias"), dtype="<f8")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after checkpoint payload")
    head = ProjectionHead(weight=weight.copy(), bias=bias.copy())
    return head, {"seed": seed, "config_hash": cfg_hash}
