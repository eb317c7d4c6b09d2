"""Motion/condition containers, the MotionPack corpus format, and synthetic corpora.

MotionPack layout: magic "MPK1", length-prefixed canonical JSON header
{version, count, records: [{id, T, J, D, fps, modality, C_t, T_a, C_a, beats,
caption}]}, then per record in header order: motion grid as little-endian
float32 (row-major T -> J -> D), text embedding float32, audio grid float32,
beat times as float64 seconds. Two files with equal logical content are
byte-equal.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .conditions import embed_text
from .packio import PackFormatError, floats_from_bytes, floats_to_bytes, read_envelope, write_envelope

MOTIONPACK_MAGIC = b"MPK1"
MOTIONPACK_VERSION = 1


class Modality(str, Enum):
    TEXT = "text"
    AUDIO = "audio"
    TEXT_AUDIO = "text_audio"


@dataclass(frozen=True)
class MotionSequence:
    """A motion clip: (T, J, D) float32 grid of per-joint features at `fps`."""

    data: np.ndarray
    fps: float

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"motion data must be (T, J, D), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"motion dims must all be >= 1, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("motion data contains non-finite values")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[2]


def rearrange_spatial(m: MotionSequence) -> MotionSequence:
    """(T, J, D) -> (J, T, D) view exposing the spatial axis; an involution."""
    return MotionSequence(data=m.data.transpose(1, 0, 2), fps=m.fps)


@dataclass(frozen=True)
class Condition:
    """Tagged multimodal condition.

    text_embed is a single temporal token (1, C_t); audio_feats is a per-frame
    grid (T_a, C_a); beat_times are strictly increasing seconds.
    """

    modality: Modality
    text_embed: np.ndarray | None = None
    audio_feats: np.ndarray | None = None
    beat_times: np.ndarray | None = None

    def __post_init__(self):
        wants_text = self.modality in (Modality.TEXT, Modality.TEXT_AUDIO)
        wants_audio = self.modality in (Modality.AUDIO, Modality.TEXT_AUDIO)
        if wants_text != (self.text_embed is not None):
            raise ValueError(f"modality {self.modality.value}: text_embed presence mismatch")
        if wants_audio != (self.audio_feats is not None):
            raise ValueError(f"modality {self.modality.value}: audio_feats presence mismatch")
        if self.text_embed is not None:
            te = np.asarray(self.text_embed, dtype=np.float32)
            if te.ndim != 2 or te.shape[0] != 1:
                raise ValueError(f"text_embed must be (1, C_t), got shape {te.shape}")
            if not np.isfinite(te).all():
                raise ValueError("text_embed contains non-finite values")
            te.flags.writeable = False
            object.__setattr__(self, "text_embed", te)
        if self.audio_feats is not None:
            af = np.asarray(self.audio_feats, dtype=np.float32)
            if af.ndim != 2:
                raise ValueError(f"audio_feats must be (T_a, C_a), got shape {af.shape}")
            if not np.isfinite(af).all():
                raise ValueError("audio_feats contain non-finite values")
            af.flags.writeable = False
            object.__setattr__(self, "audio_feats", af)
        if self.beat_times is not None:
            bt = np.asarray(self.beat_times, dtype=np.float64)
            if bt.ndim != 1:
                raise ValueError("beat_times must be 1-D")
            if bt.size > 1 and not (np.diff(bt) > 0).all():
                raise ValueError("beat_times must be strictly increasing")
            bt.flags.writeable = False
            object.__setattr__(self, "beat_times", bt)

    @property
    def temporal_token_count(self) -> int:
        """Number of temporal tokens the condition contributes (text token
        prepended ahead of the audio grid for the fused modality)."""
        if self.modality is Modality.TEXT:
            return 1
        n = self.audio_feats.shape[0]
        return n + 1 if self.modality is Modality.TEXT_AUDIO else n


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    motion: MotionSequence
    condition: Condition
    caption: str | None = None


def write_corpus(records: list[CorpusRecord], path: str) -> None:
    seen = set()
    header_records = []
    payload = bytearray()
    for rec in records:
        if rec.id in seen:
            raise PackFormatError(f"duplicate record id '{rec.id}'")
        seen.add(rec.id)
        m, c = rec.motion, rec.condition
        te = c.text_embed
        af = c.audio_feats
        bt = c.beat_times
        header_records.append(
            {
                "id": rec.id,
                "T": m.frames,
                "J": m.joints,
                "D": m.feature_dim,
                "fps": m.fps,
                "modality": c.modality.value,
                "C_t": 0 if te is None else int(te.shape[1]),
                "T_a": 0 if af is None else int(af.shape[0]),
                "C_a": 0 if af is None else int(af.shape[1]),
                "beats": 0 if bt is None else int(bt.shape[0]),
                "caption": rec.caption,
            }
        )
        payload += floats_to_bytes(m.data)
        if te is not None:
            payload += floats_to_bytes(te)
        if af is not None:
            payload += floats_to_bytes(af)
        if bt is not None:
            payload += floats_to_bytes(bt, dtype="<f8")
    header = {"version": MOTIONPACK_VERSION, "count": len(records), "records": header_records}
    write_envelope(path, MOTIONPACK_MAGIC, header, bytes(payload))


def load_corpus(path: str) -> list[CorpusRecord]:
    header, payload, payload_base = read_envelope(path, MOTIONPACK_MAGIC)
    if not isinstance(header, dict) or header.get("version") != MOTIONPACK_VERSION:
        raise PackFormatError(f"{path}: unsupported header/version {header!r:.80}")
    recs_meta = header.get("records")
    if not isinstance(recs_meta, list) or header.get("count") != len(recs_meta):
        raise PackFormatError(f"{path}: record count mismatch in header")
    records = []
    seen = set()
    offset = 0
    for meta in recs_meta:
        if not isinstance(meta, dict):
            raise PackFormatError(f"{path}: malformed record metadata {meta!r:.80}")
        rid = meta.get("id", "<missing id>")
        record_offset = payload_base + offset
        try:
            if rid in seen:
                raise PackFormatError(f"duplicate record id '{rid}'")
            seen.add(rid)
            T, J, D = int(meta["T"]), int(meta["J"]), int(meta["D"])
            motion_flat, offset = floats_from_bytes(payload, offset, T * J * D)
            motion = MotionSequence(data=motion_flat.reshape(T, J, D), fps=float(meta["fps"]))
            modality = Modality(meta["modality"])
            te = af = bt = None
            if meta["C_t"]:
                te_flat, offset = floats_from_bytes(payload, offset, int(meta["C_t"]))
                te = te_flat.reshape(1, -1)
            if meta["T_a"]:
                af_flat, offset = floats_from_bytes(payload, offset, int(meta["T_a"]) * int(meta["C_a"]))
                af = af_flat.reshape(int(meta["T_a"]), int(meta["C_a"]))
            if meta["beats"]:
                bt, offset = floats_from_bytes(payload, offset, int(meta["beats"]), dtype="<f8")
            condition = Condition(modality=modality, text_embed=te, audio_feats=af, beat_times=bt)
            records.append(CorpusRecord(id=rid, motion=motion, condition=condition, caption=meta.get("caption")))
        except (PackFormatError, ValueError, KeyError, TypeError) as exc:
            raise PackFormatError(f"{path}: record '{rid}' at byte offset {record_offset}: {exc}") from exc
    if offset != len(payload):
        raise PackFormatError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return records


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_CAPTION_SUBJECTS = ["a person", "the dancer", "someone", "a figure"]
_CAPTION_VERBS = ["walks", "jumps", "spins", "waves", "crouches", "stretches", "kicks", "sways"]
_CAPTION_STYLES = ["slowly", "quickly", "smoothly", "sharply", "in place", "to the beat"]


@dataclass(frozen=True)
class SynthSpec:
    """Shape of synthetic records; audio defaults to one frame per motion frame."""

    frames: int = 24
    joints: int = 4
    feature_dim: int = 3
    fps: float = 20.0
    text_dim: int = 32
    audio_dim: int = 8
    audio_frames: int | None = None
    beat_period: int = 8

    def __post_init__(self):
        if min(self.frames, self.joints, self.feature_dim, self.text_dim, self.audio_dim, self.beat_period) < 1:
            raise ValueError("all SynthSpec dimensions must be positive")

    @property
    def t_audio(self) -> int:
        return self.audio_frames if self.audio_frames is not None else self.frames

    @property
    def hop_seconds(self) -> float:
        return 1.0 / self.fps


def _synth_motion(rng: np.random.Generator, spec: SynthSpec, verb_idx: int, style_idx: int) -> MotionSequence:
    """Sinusoid mixture whose dominant frequency/amplitude follow the caption's
    verb and style, so conditions genuinely describe the motion."""
    t = np.arange(spec.frames, dtype=np.float64) / spec.fps
    base_freq = 0.4 + 0.2 * verb_idx
    base_amp = 0.4 + 0.15 * style_idx
    data = np.zeros((spec.frames, spec.joints, spec.feature_dim), dtype=np.float64)
    for j in range(spec.joints):
        freq_j = base_freq * (1.0 + 0.2 * j)
        for d in range(spec.feature_dim):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            data[:, j, d] = base_amp * np.sin(2.0 * np.pi * freq_j * t + phase)
            for _ in range(2):  # smaller free components for per-record variety
                amp = rng.uniform(0.05, 0.25) * base_amp
                freq = rng.uniform(0.3, 2.5)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                data[:, j, d] += amp * np.sin(2.0 * np.pi * freq * t + phase)
    return MotionSequence(data=data.astype(np.float32), fps=spec.fps)


def _synth_audio(rng: np.random.Generator, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns (features (T_a, C_a), beat_times). Channel 0 is an impulse train
    with period `beat_period` frames; remaining channels are smooth spectra."""
    t_a = spec.t_audio
    feats = np.zeros((t_a, spec.audio_dim), dtype=np.float64)
    feats[:: spec.beat_period, 0] = 1.0
    frame_t = np.arange(t_a, dtype=np.float64) * spec.hop_seconds
    for ch in range(1, spec.audio_dim):
        amp = rng.uniform(0.1, 0.5)
        freq = rng.uniform(0.2, 1.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        feats[:, ch] = amp * np.sin(2.0 * np.pi * freq * frame_t + phase) + amp
    beat_frames = np.arange(spec.beat_period, t_a, spec.beat_period, dtype=np.float64)
    beat_times = beat_frames * spec.hop_seconds
    return feats.astype(np.float32), beat_times


def _synth_caption(rng: np.random.Generator) -> tuple[str, int, int]:
    subj = _CAPTION_SUBJECTS[rng.integers(len(_CAPTION_SUBJECTS))]
    verb_idx = int(rng.integers(len(_CAPTION_VERBS)))
    style_idx = int(rng.integers(len(_CAPTION_STYLES)))
    caption = f"{subj} {_CAPTION_VERBS[verb_idx]} {_CAPTION_STYLES[style_idx]}"
    return caption, verb_idx, style_idx


def synth_corpus(seed: int, n: int, spec: SynthSpec = SynthSpec()) -> list[CorpusRecord]:
    """Deterministic synthetic corpus: sinusoid motions, templated captions,
    periodic beat tracks. Modality cycles text / audio / text+audio."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    records = []
    modal_cycle = [Modality.TEXT, Modality.AUDIO, Modality.TEXT_AUDIO]
    for i in range(n):
        caption, verb_idx, style_idx = _synth_caption(rng)
        motion = _synth_motion(rng, spec, verb_idx, style_idx)
        modality = modal_cycle[i % 3]
        te = af = bt = None
        if modality in (Modality.TEXT, Modality.TEXT_AUDIO):
            te = embed_text(caption, dims=spec.text_dim)
        if modality in (Modality.AUDIO, Modality.TEXT_AUDIO):
            af, bt = _synth_audio(rng, spec)
        condition = Condition(modality=modality, text_embed=te, audio_feats=af, beat_times=bt)
        records.append(CorpusRecord(id=f"synth-{seed}-{i:04d}", motion=motion, condition=condition, caption=caption))
    return records
