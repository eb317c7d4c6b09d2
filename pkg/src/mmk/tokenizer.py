"""VQ-VAE motion tokenizer: per-joint temporal convolutions into a discrete
temporal x spatial token grid.

The encoder downsamples time by `scale` with a non-overlapping strided
convolution shared across joints, so the grid is (ceil(T / scale), J). Training
uses reconstruction + codebook + beta-scaled commitment losses with a
straight-through estimator through the quantization step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MotionSequence
from .packio import floats_from_bytes, floats_to_bytes, read_envelope, write_envelope

TKZ_MAGIC = b"TKZ1"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (K, d_code)

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"codebook must be (K >= 2, d_code), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("codebook entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def d_code(self) -> int:
        return self.entries.shape[1]


def quantize(latent: np.ndarray, cb: Codebook) -> tuple[int, float]:
    """Nearest codebook entry by L2 distance; ties resolve to the lowest index.
    Returns (index, distance)."""
    latent = np.asarray(latent, dtype=np.float64)
    if not np.isfinite(latent).all():
        raise ValueError("latent must be finite")
    diffs = cb.entries.astype(np.float64) - latent[None, :]
    dists = np.linalg.norm(diffs, axis=1)
    idx = int(np.argmin(dists))  # argmin picks the first minimum
    return idx, float(dists[idx])


@dataclass(frozen=True)
class TokenGrid:
    """Quantized motion: (T', J') codebook indices plus mask flags.

    `scale` is the temporal downsample factor, `pad_frames` how many frames of
    right padding were added before encoding, `fps` the source frame rate.
    """

    indices: np.ndarray  # (T', J') int64
    mask_flags: np.ndarray  # (T', J') bool
    scale: int
    pad_frames: int = 0
    fps: float = 20.0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        flags = np.asarray(self.mask_flags, dtype=bool)
        if idx.ndim != 2 or flags.shape != idx.shape:
            raise ValueError(f"indices/mask_flags shape mismatch: {idx.shape} vs {flags.shape}")
        if (idx < 0).any():
            raise ValueError("token indices must be non-negative")
        idx.flags.writeable = False
        flags.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "mask_flags", flags)

    @property
    def temporal(self) -> int:
        return self.indices.shape[0]

    @property
    def spatial(self) -> int:
        return self.indices.shape[1]

    def with_mask(self, mask: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.indices, mask, self.scale, self.pad_frames, self.fps)


@dataclass(frozen=True)
class TokenizerConfig:
    feature_dim: int = 3
    hidden: int = 32
    d_code: int = 32
    codebook: int = 64
    scale: int = 4
    beta: float = 0.25
    seed: int = 0


class TokenizerModel(nn.Module):
    """Shared-across-joints temporal encoder/decoder around a codebook."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.enc_down = nn.Conv1d(cfg.feature_dim, cfg.hidden, kernel_size=cfg.scale, stride=cfg.scale)
        self.enc_out = nn.Conv1d(cfg.hidden, cfg.d_code, kernel_size=1)
        self.embeddings = nn.Parameter(torch.randn(cfg.codebook, cfg.d_code) * 0.5)
        self.dec_in = nn.Conv1d(cfg.d_code, cfg.hidden, kernel_size=1)
        self.dec_up = nn.ConvTranspose1d(cfg.hidden, cfg.feature_dim, kernel_size=cfg.scale, stride=cfg.scale)
        self.step = 0

    def codebook(self) -> Codebook:
        return Codebook(self.embeddings.detach().cpu().numpy())

    def encode_latents(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, J, D, T) -> latents (B, J, d_code, T'). Joints share weights."""
        b, j, d, t = x.shape
        h = F.relu(self.enc_down(x.reshape(b * j, d, t)))
        z = self.enc_out(h)
        return z.reshape(b, j, self.cfg.d_code, -1)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        """z: (B, J, d_code, T') -> reconstruction (B, J, D, T)."""
        b, j, d, tp = z.shape
        h = F.relu(self.dec_in(z.reshape(b * j, d, tp)))
        y = self.dec_up(h)
        return y.reshape(b, j, self.cfg.feature_dim, -1)

    def nearest_indices(self, z: torch.Tensor) -> torch.Tensor:
        """z: (..., d_code) -> nearest codebook index per latent (ties to lowest)."""
        flat = z.reshape(-1, self.cfg.d_code)
        d2 = (flat[:, None, :] - self.embeddings[None, :, :]).pow(2).sum(-1)
        return d2.argmin(dim=1).reshape(z.shape[:-1])


def _pad_frames(t: int, scale: int) -> int:
    return (-t) % scale


def motion_to_tensor(m: MotionSequence, dtype=torch.float32) -> torch.Tensor:
    """(T, J, D) -> (1, J, D, T) with right padding by the last frame."""
    return batch_to_tensor([m], dtype=dtype)


def batch_to_tensor(motions: list[MotionSequence], dtype=torch.float32) -> torch.Tensor:
    scale_pad = None
    arrs = []
    for m in motions:
        arrs.append(m.data)
        if scale_pad is None:
            scale_pad = m.data.shape
        elif m.data.shape != scale_pad:
            raise ValueError("batched motions must share a shape")
    x = torch.as_tensor(np.stack(arrs), dtype=dtype)  # (B, T, J, D)
    return x.permute(0, 2, 3, 1).contiguous()  # (B, J, D, T)


def encode(m: MotionSequence, model: TokenizerModel) -> TokenGrid:
    """Quantize a motion into its (ceil(T / scale), J) token grid."""
    scale = model.cfg.scale
    pad = _pad_frames(m.frames, scale)
    data = m.data
    if pad:
        data = np.concatenate([data, np.repeat(data[-1:], pad, axis=0)], axis=0)
    x = torch.tensor(data, dtype=torch.float32).permute(1, 2, 0)[None]  # (1, J, D, T+pad)
    with torch.no_grad():
        z = model.encode_latents(x)  # (1, J, d_code, T')
        idx = model.nearest_indices(z.permute(0, 1, 3, 2))  # (1, J, T')
    indices = idx[0].T.cpu().numpy()  # (T', J)
    return TokenGrid(
        indices=indices,
        mask_flags=np.zeros_like(indices, dtype=bool),
        scale=scale,
        pad_frames=pad,
        fps=m.fps,
    )


def decode(g: TokenGrid, model: TokenizerModel) -> MotionSequence:
    """Inverse of encode up to quantization: (T', J') indices -> (T, J, D) motion."""
    if int(g.indices.max(initial=0)) >= model.cfg.codebook:
        raise ValueError(f"token index {int(g.indices.max())} out of range for codebook {model.cfg.codebook}")
    idx = torch.tensor(np.ascontiguousarray(g.indices.T), dtype=torch.long)[None]  # (1, J, T')
    with torch.no_grad():
        z = model.embeddings[idx]  # (1, J, T', d_code)
        y = model.decode_latents(z.permute(0, 1, 3, 2))  # (1, J, D, T)
    frames = y.shape[-1] - g.pad_frames
    data = y[0].permute(2, 0, 1)[:frames].cpu().numpy()  # (T, J, D)
    return MotionSequence(data=data.astype(np.float32), fps=g.fps)


def vq_loss(
    model: TokenizerModel,
    x: torch.Tensor,
    frozen: dict | None = None,
) -> tuple[torch.Tensor, dict]:
    """Total loss on a (B, J, D, T) batch: reconstruction + codebook + beta * commitment.

    With `frozen` (the aux dict of a previous call at the same point), the
    stop-gradient quantities are held at their recorded values so that the loss
    becomes an ordinary differentiable function whose finite differences match
    the straight-through gradients; used by the gradient checks.
    """
    z_e = model.encode_latents(x)  # (B, J, d_code, T')
    z_perm = z_e.permute(0, 1, 3, 2)  # (B, J, T', d_code)
    if frozen is None:
        idx = model.nearest_indices(z_perm)
        e_sel = model.embeddings[idx]  # (B, J, T', d_code)
        st_offset = (e_sel - z_perm).detach()
        z_e_ref = z_perm.detach()
        e_ref = e_sel.detach()
    else:
        idx = frozen["indices"]
        e_sel = model.embeddings[idx]
        st_offset = frozen["st_offset"]
        z_e_ref = frozen["z_e_ref"]
        e_ref = frozen["e_ref"]
    z_q = z_perm + st_offset  # straight-through: value e_sel, gradient of z_e
    recon = model.decode_latents(z_q.permute(0, 1, 3, 2))
    recon_loss = F.mse_loss(recon, x)
    codebook_loss = F.mse_loss(e_sel, z_e_ref)
    commit_loss = F.mse_loss(z_perm, e_ref)
    total = recon_loss + codebook_loss + model.cfg.beta * commit_loss
    aux = {
        "recon": float(recon_loss.detach()),
        "codebook": float(codebook_loss.detach()),
        "commit": float(commit_loss.detach()),
        "indices": idx.detach(),
        "st_offset": st_offset,
        "z_e_ref": z_e_ref,
        "e_ref": e_ref,
    }
    return total, aux


@dataclass
class VqTrainConfig:
    steps: int = 300
    batch: int = 16
    base_lr: float = 1e-3
    warmup: int = 100
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def warmup_lr(step: int, base_lr: float, warmup: int) -> float:
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup)


def train_tokenizer(records, tok_cfg: TokenizerConfig, train_cfg: VqTrainConfig) -> tuple[TokenizerModel, TrainLog]:
    """Fit the tokenizer on a corpus; deterministic for fixed seeds.

    Raises TrainingDivergedError naming the step if the loss goes non-finite.
    """
    if not records:
        raise ValueError("corpus is empty")
    model = TokenizerModel(tok_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.base_lr, betas=(0.9, 0.99))
    rng = np.random.default_rng(train_cfg.seed)

    motions = []
    for rec in records:
        m = rec.motion
        pad = _pad_frames(m.frames, tok_cfg.scale)
        if pad:
            data = np.concatenate([m.data, np.repeat(m.data[-1:], pad, axis=0)], axis=0)
            m = MotionSequence(data=data, fps=m.fps)
        motions.append(m)

    log = TrainLog()
    for step in range(train_cfg.steps):
        lr = warmup_lr(step, train_cfg.base_lr, train_cfg.warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        pick = rng.integers(0, len(motions), size=min(train_cfg.batch, len(motions)))
        x = batch_to_tensor([motions[i] for i in pick])
        loss, _ = vq_loss(model, x)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"tokenizer loss diverged at step {step}")
        if lr > 0.0:
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.step = step + 1
        log.losses.append(float(loss.detach()))
        log.lrs.append(lr)
    return model, log


# ---------------------------------------------------------------------------
# TKZ1 checkpoint format
# ---------------------------------------------------------------------------


def _param_payload(model: nn.Module) -> bytes:
    chunks = [floats_to_bytes(p.detach().cpu().numpy()) for _, p in sorted(model.named_parameters())]
    return b"".join(chunks)


def _load_param_payload(model: nn.Module, payload: bytes) -> None:
    offset = 0
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            arr, offset = floats_from_bytes(payload, offset, p.numel())
            p.copy_(torch.as_tensor(arr.reshape(tuple(p.shape))))
    if offset != len(payload):
        raise ValueError(f"{len(payload) - offset} trailing parameter bytes")


def save_tokenizer(model: TokenizerModel, path: str) -> None:
    cfg = model.cfg
    header = {
        "version": 1,
        "feature_dim": cfg.feature_dim,
        "hidden": cfg.hidden,
        "d_code": cfg.d_code,
        "codebook": cfg.codebook,
        "scale": cfg.scale,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "step": model.step,
    }
    write_envelope(path, TKZ_MAGIC, header, _param_payload(model))


def load_tokenizer(path: str) -> TokenizerModel:
    header, payload, _ = read_envelope(path, TKZ_MAGIC)
    cfg = TokenizerConfig(
        feature_dim=int(header["feature_dim"]),
        hidden=int(header["hidden"]),
        d_code=int(header["d_code"]),
        codebook=int(header["codebook"]),
        scale=int(header["scale"]),
        beta=float(header["beta"]),
        seed=int(header["seed"]),
    )
    model = TokenizerModel(cfg)
    _load_param_payload(model, payload)
    model.step = int(header["step"])
    return model
