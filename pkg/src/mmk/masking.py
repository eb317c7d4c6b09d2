"""Condition-guided attention masking over temporal and spatial motion tokens.

Scoring routes by condition modality: a text condition (single temporal token)
joins the motion tokens in one self-attention pass and the score of each motion
token is the weight it receives from the condition's query row; audio and fused
conditions act as cross-attention queries over the motion tokens and scores are
the column means of the weight matrix. Spatial scores always use the cross form
over per-joint tokens and are averaged across frames. The top alpha fraction of
scores (k = ceil(alpha * n), ties to the lower index) is masked.

Also provides the baseline strategies used for ablations: seeded random,
confidence (mask least confident), density (mask densest by mean cosine
similarity), and KMeans / GMM clustering scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Condition, Modality, MotionSequence


def mask_count(alpha: float, n: int) -> int:
    """k = ceil(alpha * n), snapping away float noise so 0.3 * 10 -> 3, not 4."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    q = alpha * n
    nearest = round(q)
    k = nearest if abs(q - nearest) < 1e-9 else math.ceil(q)
    return min(max(k, 0), n)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention: weights = row-softmax(Q K^T / sqrt(d)),
    output = weights @ V. Returns (output (n, e), weights (n, m))."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q/k width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k/v length mismatch: {k.shape} vs {v.shape}")
    weights = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return weights @ v, weights


@dataclass(frozen=True)
class AttentionScores:
    """Per-token masking scores plus the raw temporal attention map."""

    temporal: np.ndarray  # (n_t,)
    spatial: np.ndarray  # (n_s,)
    raw_map: np.ndarray | None = None  # (Q, K) softmax rows

    def __post_init__(self):
        if not (np.isfinite(self.temporal).all() and np.isfinite(self.spatial).all()):
            raise ValueError("attention scores must be finite")
        if self.raw_map is not None:
            sums = np.asarray(self.raw_map).sum(axis=-1)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ValueError("raw_map rows must each sum to 1")


@dataclass(frozen=True)
class MaskPlan:
    temporal_masked: tuple[int, ...]
    spatial_masked: tuple[int, ...]
    alpha_temporal: float
    alpha_spatial: float

    def __post_init__(self):
        if not (0.0 <= self.alpha_temporal <= 1.0 and 0.0 <= self.alpha_spatial <= 1.0):
            raise ValueError("masking ratios must be in [0, 1]")
        if len(set(self.temporal_masked)) != len(self.temporal_masked):
            raise ValueError("temporal_masked contains duplicates")
        if len(set(self.spatial_masked)) != len(self.spatial_masked):
            raise ValueError("spatial_masked contains duplicates")

    def cell_mask(self, n_temporal: int, n_spatial: int) -> np.ndarray:
        """Boolean (n_t, n_s) grid: a cell is masked when its row or column is."""
        mask = np.zeros((n_temporal, n_spatial), dtype=bool)
        mask[list(self.temporal_masked), :] = True
        mask[:, list(self.spatial_masked)] = True
        return mask


def top_alpha_mask(scores: np.ndarray, alpha: float) -> list[int]:
    """Indices of the k = ceil(alpha * n) largest scores, ties broken by lower
    index first; returned sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be 1-D")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    k = mask_count(alpha, scores.shape[0])
    if k == 0:
        return []
    order = np.argsort(-scores, kind="stable")  # descending, ties by lower index
    return sorted(int(i) for i in order[:k])


def score_tokens(
    temporal_tokens: np.ndarray,
    spatial_tokens: np.ndarray,
    cond_tokens: np.ndarray,
    modality: Modality,
) -> AttentionScores:
    """Attention scores over already-projected embeddings.

    temporal_tokens: (n_t, d); spatial_tokens: (n_t, n_s, d); cond_tokens:
    (n_c, d), all at the shared model width d.
    """
    temporal_tokens = np.asarray(temporal_tokens, dtype=np.float64)
    spatial_tokens = np.asarray(spatial_tokens, dtype=np.float64)
    cond_tokens = np.asarray(cond_tokens, dtype=np.float64)
    if temporal_tokens.ndim != 2 or spatial_tokens.ndim != 3 or cond_tokens.ndim != 2:
        raise ValueError("expected temporal (n_t, d), spatial (n_t, n_s, d), cond (n_c, d)")
    if not (temporal_tokens.shape[1] == spatial_tokens.shape[2] == cond_tokens.shape[1]):
        raise ValueError("token widths differ; project to a common model width first")
    if modality is Modality.TEXT and cond_tokens.shape[0] != 1:
        raise ValueError("text condition must be a single temporal token")

    n_t = temporal_tokens.shape[0]
    if modality is Modality.TEXT:
        seq = np.concatenate([cond_tokens, temporal_tokens], axis=0)
        _, weights = scaled_attention(seq, seq, seq)  # ((n_t+1), (n_t+1))
        temporal_scores = weights[0, 1 : n_t + 1].copy()
    else:
        _, weights = scaled_attention(cond_tokens, temporal_tokens, temporal_tokens)  # (n_c, n_t)
        temporal_scores = weights.mean(axis=0)

    # spatial scores: cross form per frame, column means averaged over frames
    n_s = spatial_tokens.shape[1]
    per_frame = np.zeros((n_t, n_s), dtype=np.float64)
    for t in range(n_t):
        _, w = scaled_attention(cond_tokens, spatial_tokens[t], spatial_tokens[t])
        per_frame[t] = w.mean(axis=0)
    spatial_scores = per_frame.mean(axis=0)

    return AttentionScores(temporal=temporal_scores, spatial=spatial_scores, raw_map=weights)


def plan_masks_from_tokens(
    temporal_tokens: np.ndarray,
    spatial_tokens: np.ndarray,
    cond_tokens: np.ndarray,
    modality: Modality,
    alpha_t: float = 0.30,
    alpha_s: float = 0.30,
) -> tuple[MaskPlan, AttentionScores]:
    scores = score_tokens(temporal_tokens, spatial_tokens, cond_tokens, modality)
    plan = MaskPlan(
        temporal_masked=tuple(top_alpha_mask(scores.temporal, alpha_t)),
        spatial_masked=tuple(top_alpha_mask(scores.spatial, alpha_s)),
        alpha_temporal=alpha_t,
        alpha_spatial=alpha_s,
    )
    return plan, scores


# ---------------------------------------------------------------------------
# Projection of raw motion/conditions to the shared width (for standalone use;
# training reuses the generator's own input projections instead)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameProjector:
    """Deterministic seeded linear maps taking raw features to a common width."""

    w_frame: np.ndarray  # (J*D, d)
    w_joint: np.ndarray  # (D, d)
    w_text: np.ndarray  # (C_t, d)
    w_audio: np.ndarray  # (C_a, d)
    w_text_to_audio: np.ndarray  # (C_t, C_a)

    @staticmethod
    def create(joints: int, feature_dim: int, text_dim: int, audio_dim: int, width: int = 32, seed: int = 0) -> "FrameProjector":
        rng = np.random.default_rng(seed)

        def gauss(rows, cols):
            return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))

        return FrameProjector(
            w_frame=gauss(joints * feature_dim, width),
            w_joint=gauss(feature_dim, width),
            w_text=gauss(text_dim, width),
            w_audio=gauss(audio_dim, width),
            w_text_to_audio=gauss(text_dim, audio_dim),
        )

    @property
    def width(self) -> int:
        return self.w_frame.shape[1]

    def embed_motion(self, m: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
        """Returns temporal tokens (T, d) and spatial tokens (T, J, d)."""
        flat = m.data.reshape(m.frames, -1).astype(np.float64)
        temporal = flat @ self.w_frame
        spatial = m.data.astype(np.float64) @ self.w_joint
        return temporal, spatial

    def embed_condition(self, c: Condition) -> np.ndarray:
        """Condition tokens (n_c, d). The fused modality prepends the text token,
        projected into the audio feature space, ahead of the audio grid."""
        if c.modality is Modality.TEXT:
            return c.text_embed.astype(np.float64) @ self.w_text
        audio = c.audio_feats.astype(np.float64)
        if c.modality is Modality.TEXT_AUDIO:
            text_row = c.text_embed.astype(np.float64) @ self.w_text_to_audio
            audio = np.concatenate([text_row, audio], axis=0)
        return audio @ self.w_audio


def plan_masks(
    m: MotionSequence,
    c: Condition,
    alpha_t: float = 0.30,
    alpha_s: float = 0.30,
    projector: FrameProjector | None = None,
) -> tuple[MaskPlan, AttentionScores]:
    """Plan temporal/spatial masks for a raw motion sequence under a condition."""
    if projector is None:
        text_dim = c.text_embed.shape[1] if c.text_embed is not None else 1
        audio_dim = c.audio_feats.shape[1] if c.audio_feats is not None else 1
        projector = FrameProjector.create(m.joints, m.feature_dim, text_dim, audio_dim)
    temporal, spatial = projector.embed_motion(m)
    cond = projector.embed_condition(c)
    return plan_masks_from_tokens(temporal, spatial, cond, c.modality, alpha_t, alpha_s)


# ---------------------------------------------------------------------------
# Baseline strategies (ablation zoo)
# ---------------------------------------------------------------------------


def random_mask(n: int, alpha: float, seed: int) -> list[int]:
    """Uniform sample without replacement of k = ceil(alpha * n) indices."""
    k = mask_count(alpha, n)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def confidence_mask(confidence: np.ndarray, alpha: float) -> list[int]:
    """Mask the k lowest-confidence tokens (ties to the lower index)."""
    confidence = np.asarray(confidence, dtype=np.float64)
    k = mask_count(alpha, confidence.shape[0])
    order = np.argsort(confidence, kind="stable")  # ascending
    return sorted(int(i) for i in order[:k])


def token_density(tokens: np.ndarray) -> np.ndarray:
    """Mean cosine similarity of each token to all other tokens."""
    tokens = np.asarray(tokens, dtype=np.float64)
    n = tokens.shape[0]
    norms = np.linalg.norm(tokens, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = tokens / safe[:, None]
    unit[norms == 0.0] = 0.0
    sims = unit @ unit.T
    if n == 1:
        return np.zeros(1)
    return (sims.sum(axis=1) - sims.diagonal()) / (n - 1)


def density_mask(tokens: np.ndarray, alpha: float) -> list[int]:
    """Mask the k highest local-density tokens."""
    return top_alpha_mask(token_density(tokens), alpha)


def kmeans_mask(tokens: np.ndarray, alpha: float, n_clusters: int = 2, seed: int = 0) -> list[int]:
    """Cluster tokens, score each by distance to its centroid, mask the top k."""
    from sklearn.cluster import KMeans

    tokens = np.asarray(tokens, dtype=np.float64)
    if n_clusters > tokens.shape[0]:
        raise ValueError(f"n_clusters {n_clusters} exceeds token count {tokens.shape[0]}")
    km = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed).fit(tokens)
    dists = np.linalg.norm(tokens - km.cluster_centers_[km.labels_], axis=1)
    return top_alpha_mask(dists, alpha)


def gmm_mask(tokens: np.ndarray, alpha: float, n_clusters: int = 2, seed: int = 0) -> list[int]:
    """Score tokens by negative log-likelihood under a Gaussian mixture, mask top k."""
    from sklearn.mixture import GaussianMixture

    tokens = np.asarray(tokens, dtype=np.float64)
    if n_clusters > tokens.shape[0]:
        raise ValueError(f"n_clusters {n_clusters} exceeds token count {tokens.shape[0]}")
    if tokens.shape[0] == 1:  # no likelihood structure with a single token
        return top_alpha_mask(np.zeros(1), alpha)
    gm = GaussianMixture(n_components=n_clusters, random_state=seed, reg_covar=1e-4).fit(tokens)
    nll = -gm.score_samples(tokens)
    return top_alpha_mask(nll, alpha)


def baseline_mask(strategy: str, data: np.ndarray | int, alpha: float, *, seed: int = 0, n_clusters: int = 2) -> list[int]:
    """Dispatch by strategy name.

    'random' takes the token count, 'confidence' a confidence vector, and the
    remaining strategies a (n, d) token-embedding grid.
    """
    if strategy == "random":
        return random_mask(int(data), alpha, seed)
    if strategy == "confidence":
        return confidence_mask(data, alpha)
    if strategy == "density":
        return density_mask(data, alpha)
    if strategy == "kmeans":
        return kmeans_mask(data, alpha, n_clusters=n_clusters, seed=seed)
    if strategy == "gmm":
        return gmm_mask(data, alpha, n_clusters=n_clusters, seed=seed)
    raise ValueError(f"unknown masking strategy '{strategy}'")


def ratio_grid_report(
    records,
    alphas_t=(0.15, 0.30, 0.50),
    alphas_s=(0.15, 0.30, 0.50),
    projector: FrameProjector | None = None,
) -> dict:
    """Mask-plan every record at each (alpha_t, alpha_s) pair; one grid cell per
    pair with the realized cardinalities."""
    cells = []
    for at in alphas_t:
        for as_ in alphas_s:
            temporal_counts = []
            spatial_counts = []
            for rec in records:
                plan, _ = plan_masks(rec.motion, rec.condition, at, as_, projector=projector)
                temporal_counts.append(len(plan.temporal_masked))
                spatial_counts.append(len(plan.spatial_masked))
            cells.append(
                {
                    "alpha_temporal": at,
                    "alpha_spatial": as_,
                    "records": len(records),
                    "mean_temporal_masked": float(np.mean(temporal_counts)),
                    "mean_spatial_masked": float(np.mean(spatial_counts)),
                }
            )
    return {"grid": cells, "alphas_temporal": list(alphas_t), "alphas_spatial": list(alphas_s)}
