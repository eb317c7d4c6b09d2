"""Condition encoders: deterministic text stub embeddings and audio beat extraction.

Stands in for the pretrained text/audio encoders the full pipeline would use.
The text side hashes tokens into a fixed-width unit vector; the audio side is
a generic per-frame feature grid from which an onset envelope and beat times
are derived.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextStubEmbedder:
    """Hashed bag-of-tokens embedder: same caption always maps to the same
    unit-norm 1 x dims vector."""

    dims: int = 32
    seed: int = 0

    def embed(self, caption: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(caption.lower())
        if not tokens:
            raise ValueError("caption is empty after trimming")
        vec = np.zeros(self.dims, dtype=np.float64)
        for tok in tokens:
            digest = hashlib.sha256(f"{self.seed}:{tok}".encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "little") % self.dims
            sign = 1.0 if digest[4] & 1 else -1.0
            # second hashed slot reduces collisions at small dims
            idx2 = int.from_bytes(digest[5:9], "little") % self.dims
            sign2 = 1.0 if digest[9] & 1 else -1.0
            vec[idx] += sign
            vec[idx2] += 0.5 * sign2
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:  # pathological cancellation; fall back to a constant direction
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm)[None, :].astype(np.float32)


def embed_text(caption: str, dims: int = 32, seed: int = 0) -> np.ndarray:
    """Unit-norm (1, dims) embedding of a caption; pure function of its inputs."""
    return TextStubEmbedder(dims=dims, seed=seed).embed(caption)


@dataclass(frozen=True)
class AudioTrack:
    """Per-frame audio features, (T_a, C_a), with hop_seconds between frames."""

    sample_features: np.ndarray
    hop_seconds: float

    def __post_init__(self):
        feats = np.asarray(self.sample_features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError(f"sample_features must be 2-D, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("sample_features contain non-finite values")
        if not self.hop_seconds > 0:
            raise ValueError("hop_seconds must be positive")
        object.__setattr__(self, "sample_features", feats)

    @property
    def frames(self) -> int:
        return self.sample_features.shape[0]

    @property
    def duration(self) -> float:
        return self.frames * self.hop_seconds


def onset_envelope(track: AudioTrack) -> np.ndarray:
    """Half-wave rectified temporal difference of the first feature channel.

    envelope[t] corresponds to time t * hop_seconds, t = 1 .. T_a - 1.
    """
    energy = track.sample_features[:, 0].astype(np.float64)
    diff = energy[1:] - energy[:-1]
    return np.maximum(diff, 0.0)


def extract_beats(track: AudioTrack, threshold: float) -> list[float]:
    """Beat times in seconds: local maxima of the onset envelope above threshold.

    A local maximum is strictly greater than both neighbours (one-sided at the
    envelope edges). Output is strictly increasing and bounded by the track
    duration.
    """
    if track.frames < 3:
        raise ValueError(f"need at least 3 audio frames, got {track.frames}")
    env = onset_envelope(track)
    beats = []
    for t in range(env.shape[0]):
        left = env[t - 1] if t > 0 else -np.inf
        right = env[t + 1] if t + 1 < env.shape[0] else -np.inf
        if env[t] > threshold and env[t] > left and env[t] > right:
            # envelope index t is the difference into frame t+1
            beats.append((t + 1) * track.hop_seconds)
    return beats
