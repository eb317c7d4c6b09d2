"""Evaluation metrics: Frechet distance over kinetic/geometric motion features,
diversity, beat alignment, R-precision, multimodal distance, and multimodality.

Feature extractors are desk-scale surrogates of the usual motion toolboxes:
kinetic features are per-channel mean squared frame-to-frame velocities,
geometric features are time-averaged pairwise joint distances (translation
invariant by construction). The metric math itself is exact and operates on
pluggable embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import MotionSequence


class FeatureKind(str, Enum):
    KINETIC = "kinetic"
    GEOMETRIC = "geometric"
    EMBED = "embed"


@dataclass(frozen=True)
class FeatureSet:
    vectors: np.ndarray  # (n, f)
    kind: FeatureKind

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"feature vectors must be (n, f), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature vectors contain non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


def kinetic_features(m: MotionSequence) -> np.ndarray:
    """Mean squared frame-to-frame velocity per joint channel, length J * D."""
    if m.frames < 2:
        raise ValueError(f"need at least 2 frames for velocities, got {m.frames}")
    vel = np.diff(m.data.astype(np.float64), axis=0)  # (T-1, J, D)
    return (vel**2).mean(axis=0).reshape(-1)


def default_joint_pairs(joints: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(joints) for b in range(a + 1, joints)]


def geometric_features(m: MotionSequence, pairs: list[tuple[int, int]] | None = None) -> np.ndarray:
    """Time-averaged Euclidean distances between joint pairs (all pairs by
    default); exactly invariant to a shared translation of every joint."""
    if m.joints < 2:
        raise ValueError(f"need at least 2 joints for distances, got {m.joints}")
    if pairs is None:
        pairs = default_joint_pairs(m.joints)
    data = m.data.astype(np.float64)
    feats = np.empty(len(pairs), dtype=np.float64)
    for i, (a, b) in enumerate(pairs):
        feats[i] = np.linalg.norm(data[:, a, :] - data[:, b, :], axis=1).mean()
    return feats


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray  # (f,)
    cov: np.ndarray  # (f, f)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"cov shape {cov.shape} does not match mean {mean.shape}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValueError("non-finite Gaussian statistics")
        if np.abs(cov - cov.T).max() > 1e-8:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)


def gaussian_stats(features: FeatureSet) -> GaussianStats:
    if features.count < 2:
        raise ValueError(f"need at least 2 samples for covariance, got {features.count}")
    vecs = features.vectors
    return GaussianStats(mean=vecs.mean(axis=0), cov=np.atleast_2d(np.cov(vecs, rowvar=False)))


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; small negative
    eigenvalues from roundoff are clamped to zero."""
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_gaussian(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at zero.

    The cross term uses Tr((A^1/2 B A^1/2)^1/2), the symmetric form of the
    matrix square root, with eigenvalues clipped at the -1e-10 level.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = float(((a.mean - b.mean) ** 2).sum())
    root_a = _sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    w = np.where(w > -1e-10, np.clip(w, 0.0, None), 0.0)
    cross = float(np.sqrt(w).sum())
    value = diff + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(value, 0.0)


def fid(a: FeatureSet, b: FeatureSet) -> float:
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    return frechet_gaussian(gaussian_stats(a), gaussian_stats(b))


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------


def diversity(features: FeatureSet, pairs: int, seed: int = 0, exhaustive: bool = False) -> float:
    """Mean Euclidean distance over `pairs` seeded random index pairs (i != j),
    or over every unordered pair when exhaustive."""
    n = features.count
    if n < 2:
        raise ValueError(f"need at least 2 feature vectors, got {n}")
    vecs = features.vectors
    if exhaustive:
        total = 0.0
        count = 0
        for i in range(n):
            d = np.linalg.norm(vecs[i + 1 :] - vecs[i], axis=1)
            total += float(d.sum())
            count += d.shape[0]
        return total / count
    if pairs < 1:
        raise ValueError(f"pairs must be >= 1, got {pairs}")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=pairs)
    shift = rng.integers(1, n, size=pairs)
    second = (first + shift) % n  # disjoint within each pair
    return float(np.linalg.norm(vecs[first] - vecs[second], axis=1).mean())


# ---------------------------------------------------------------------------
# Beat alignment
# ---------------------------------------------------------------------------


def motion_speed_curve(m: MotionSequence) -> np.ndarray:
    """Summed per-joint speed between consecutive frames; index i covers the
    step into frame i, i = 1 .. T-1."""
    if m.frames < 3:
        raise ValueError(f"need at least 3 frames for dance beats, got {m.frames}")
    steps = np.diff(m.data.astype(np.float64), axis=0)  # (T-1, J, D)
    return np.linalg.norm(steps, axis=2).sum(axis=1)


def dance_beats(m: MotionSequence, min_separation: int = 2) -> np.ndarray:
    """Kinematic beats: local minima of the speed curve, at least
    `min_separation` frames apart (lowest minima win), in seconds."""
    speed = motion_speed_curve(m)
    n = speed.shape[0]
    candidates = []
    for i in range(n):
        left = speed[i - 1] if i > 0 else np.inf
        right = speed[i + 1] if i + 1 < n else np.inf
        if speed[i] < left and speed[i] < right:
            candidates.append(i)
    candidates.sort(key=lambda i: (speed[i], i))
    kept: list[int] = []
    for i in candidates:
        if all(abs(i - k) >= min_separation for k in kept):
            kept.append(i)
    kept.sort()
    # speed index i covers the step into frame i+1
    return (np.asarray(kept, dtype=np.float64) + 1.0) / m.fps


def beat_align_score(music_beats, motion: MotionSequence, sigma: float | None = None) -> float:
    """Mean Gaussian kernel between each music beat and its closest dance beat,
    in [0, 1]; zero when the motion has no kinematic beats. The default sigma
    is three frames expressed in seconds."""
    music = np.asarray(music_beats, dtype=np.float64)
    if music.size == 0:
        raise ValueError("need at least one music beat")
    if sigma is None:
        sigma = 3.0 / motion.fps
    beats = dance_beats(motion)
    if beats.size == 0:
        return 0.0
    d2 = (music[:, None] - beats[None, :]) ** 2
    nearest = d2.min(axis=1)
    return float(np.exp(-nearest / (2.0 * sigma**2)).mean())


# ---------------------------------------------------------------------------
# Embedding-space metrics
# ---------------------------------------------------------------------------


def r_precision(motion_embeds: np.ndarray, text_embeds: np.ndarray, k: int, pool: int = 32) -> float:
    """Fraction of motions whose paired text ranks in the top k by Euclidean
    distance among a pool of candidate texts (consecutive groups of `pool`)."""
    motion_embeds = np.asarray(motion_embeds, dtype=np.float64)
    text_embeds = np.asarray(text_embeds, dtype=np.float64)
    if motion_embeds.shape != text_embeds.shape:
        raise ValueError(f"paired embeddings differ in shape: {motion_embeds.shape} vs {text_embeds.shape}")
    n = motion_embeds.shape[0]
    if pool > n:
        raise ValueError(f"pool {pool} exceeds sample count {n}")
    if not 1 <= k <= pool:
        raise ValueError(f"k must be in [1, pool], got k={k}, pool={pool}")
    groups = n // pool
    hits = 0
    for g in range(groups):
        lo = g * pool
        texts = text_embeds[lo : lo + pool]
        for i in range(pool):
            dists = np.linalg.norm(texts - motion_embeds[lo + i], axis=1)
            order = np.argsort(dists, kind="stable")
            if int(np.flatnonzero(order == i)[0]) < k:
                hits += 1
    return hits / (groups * pool)


def multimodal_distance(motion_embeds: np.ndarray, text_embeds: np.ndarray) -> float:
    """Mean Euclidean distance between paired motion/text embeddings."""
    motion_embeds = np.asarray(motion_embeds, dtype=np.float64)
    text_embeds = np.asarray(text_embeds, dtype=np.float64)
    if motion_embeds.shape != text_embeds.shape:
        raise ValueError(f"paired embeddings differ in shape: {motion_embeds.shape} vs {text_embeds.shape}")
    return float(np.linalg.norm(motion_embeds - text_embeds, axis=1).mean())


def mmodality(groups: list[np.ndarray]) -> float:
    """Mean pairwise distance within each caption group, averaged over groups."""
    if not groups:
        raise ValueError("need at least one caption group")
    means = []
    for g, group in enumerate(groups):
        arr = np.asarray(group, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"caption group {g} needs at least 2 generations")
        total = 0.0
        count = 0
        for i in range(arr.shape[0]):
            d = np.linalg.norm(arr[i + 1 :] - arr[i], axis=1)
            total += float(d.sum())
            count += d.shape[0]
        means.append(total / count)
    return float(np.mean(means))


def embed_motion_stub(m: MotionSequence, dims: int = 32, seed: int = 0) -> np.ndarray:
    """Deterministic motion embedding: kinetic + geometric features through a
    seeded Gaussian projection, L2 normalized. Stands in for a learned
    evaluator so the embedding-space metrics stay exercisable."""
    feats = np.concatenate([kinetic_features(m), geometric_features(m)])
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(feats.shape[0]), size=(feats.shape[0], dims))
    vec = feats @ proj
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec
