"""Synthetic frame-classification task standing in for ASR.

Each sequence carries a latent symbol chain with Markov persistence, so
frames form runs of the same class. A frame's features are its class
centroid plus a mix of neighboring-frame centroids plus Gaussian noise;
at the default noise level a frame-local classifier is well below the
accuracy a temporal model reaches by pooling context.

Everything is a pure function of (spec, stream, offset): batches are
reproducible and the holdout stream never collides with training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STAY_PROB = 0.8
NEIGHBOR_OFFSETS = (-2, -1, 1, 2)
STREAMS = {"train": 0, "holdout": 1, "prune": 2, "finetune": 3}


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 8
    seq_len: int = 64
    feature_dim: int = 16
    noise_std: float = 0.5
    neighbor_mix: float = 0.3
    seed: int = 0

    def validate(self) -> "TaskSpec":
        if self.num_classes < 2:
            raise ValueError("TaskSpec: need at least 2 classes")
        if not (0.0 <= self.neighbor_mix < 1.0):
            raise ValueError("TaskSpec: neighbor_mix must be in [0,1)")
        if self.seq_len < 1 or self.feature_dim < 1:
            raise ValueError("TaskSpec: seq_len and feature_dim must be >= 1")
        return self


def class_centroids(spec: TaskSpec) -> np.ndarray:
    """Fixed unit-norm centroid per class, shared by all streams."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xCE])))
    c = rng.standard_normal((spec.num_classes, spec.feature_dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c.astype(np.float32)


def _stream_rng(spec: TaskSpec, stream: str, offset: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, STREAMS[stream], int(offset)])))


def generate_batch(spec: TaskSpec, batch: int, stream_offset: int, stream: str = "train"):
    """(features (B,T,F) float32, labels (B,T) int64) for one stream offset."""
    if batch < 1:
        raise ValueError("generate_batch: batch must be >= 1")
    spec.validate()
    rng = _stream_rng(spec, stream, stream_offset)
    K, T, F = spec.num_classes, spec.seq_len, spec.feature_dim
    cent = class_centroids(spec)

    labels = np.empty((batch, T), dtype=np.int64)
    labels[:, 0] = rng.integers(0, K, size=batch)
    stay = rng.random((batch, T)) < STAY_PROB
    jump = rng.integers(1, K, size=(batch, T))
    for t in range(1, T):
        labels[:, t] = np.where(stay[:, t], labels[:, t - 1], (labels[:, t - 1] + jump[:, t]) % K)

    feats = cent[labels].astype(np.float64)
    if spec.neighbor_mix > 0.0:
        mix = np.zeros((batch, T, F))
        count = np.zeros((1, T, 1))
        for delta in NEIGHBOR_OFFSETS:
            lo, hi = max(0, -delta), min(T, T - delta)
            mix[:, lo:hi] += cent[labels[:, lo + delta : hi + delta]]
            count[:, lo:hi] += 1.0
        feats += spec.neighbor_mix * (mix / count)
    if spec.noise_std > 0.0:
        feats += rng.normal(0.0, spec.noise_std, size=(batch, T, F))
    return feats.astype(np.float32), labels


def holdout_set(spec: TaskSpec, size: int):
    """Fixed evaluation set of ``size`` sequences, disjoint from training."""
    if size < 1:
        raise ValueError("holdout_set: size must be >= 1")
    return generate_batch(spec, size, 0, stream="holdout")


def nearest_centroid_predict(spec: TaskSpec, feats: np.ndarray) -> np.ndarray:
    """Frame-local oracle: closest class centroid per frame."""
    cent = class_centroids(spec)
    scores = feats @ cent.T - 0.5 * (cent * cent).sum(axis=1)
    return scores.argmax(axis=-1)


def nearest_centroid_accuracy(spec: TaskSpec, feats: np.ndarray, labels: np.ndarray) -> float:
    return float((nearest_centroid_predict(spec, feats) == labels).mean())
