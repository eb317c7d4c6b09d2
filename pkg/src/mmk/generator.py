"""Masked-restoration transformer over token grids.

Temporal blocks adapt their attention to the condition modality: a lone text
token joins the motion tokens for self-attention (motion rows returned), while
audio or fused conditions act as keys/values under motion queries. Spatial
blocks always run the cross form per frame over the joint axis. Each block is
attention + residual + layer normalization + two-layer feedforward + residual.

Training restores the original token indices at masked grid cells with cross
entropy; masks come from the masking module using this model's own input
projections, recomputed once per epoch. Decoding iteratively fills an
all-masked grid, keeping the most confident predictions per round on a cosine
schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import masking
from .data import Condition, Modality
from .packio import read_envelope, write_envelope
from .tokenizer import TokenGrid, TokenizerModel, TrainingDivergedError, _load_param_payload, _param_payload, encode, warmup_lr

GEN_MAGIC = b"GEN1"


@dataclass(frozen=True)
class GeneratorConfig:
    d_model: int = 64
    ff: int = 128
    codebook: int = 64
    tat_layers: int = 2
    sat_layers: int = 2
    text_dim: int = 32
    audio_dim: int = 8
    max_temporal: int = 64
    spatial: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.tat_layers < 1 or self.sat_layers < 1:
            raise ValueError("need at least one temporal and one spatial layer")


class RestorationBlock(nn.Module):
    """Single-head attention block; `concat_condition` switches the text-style
    self-attention over (condition, motion) versus motion-query cross-attention."""

    def __init__(self, d_model: int, ff: int):
        super().__init__()
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ff)
        self.ff2 = nn.Linear(ff, d_model)

    def forward(
        self,
        x: torch.Tensor,  # (B, n, d)
        cond: torch.Tensor,  # (B, n_c, d)
        concat_condition: bool,
        need_weights: bool = False,
    ):
        n = x.shape[1]
        if concat_condition:
            seq = torch.cat([cond, x], dim=1)
            q = self.q(seq)
            k = self.k(seq)
            v = self.v(seq)
        else:
            q = self.q(x)
            k = self.k(cond)
            v = self.v(cond)
        logits = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
        weights = torch.softmax(logits, dim=-1)
        attended = self.o(weights @ v)
        if concat_condition:
            attended = attended[:, -n:, :]  # keep only the motion rows
        y = self.norm(x + attended)
        out = y + self.ff2(F.relu(self.ff1(y)))
        if need_weights:
            return out, weights
        return out


class GeneratorModel(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d = cfg.d_model
        self.tok_embed = nn.Embedding(cfg.codebook, d)
        self.mask_embedding = nn.Parameter(torch.randn(d) * 0.02)
        self.pos_temporal = nn.Parameter(torch.randn(cfg.max_temporal, d) * 0.02)
        self.pos_spatial = nn.Parameter(torch.randn(cfg.spatial, d) * 0.02)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.audio_proj = nn.Linear(cfg.audio_dim, d)
        self.text_to_audio = nn.Linear(cfg.text_dim, cfg.audio_dim)
        self.sat_cond_proj = nn.Linear(d, d)
        self.tat_blocks = nn.ModuleList(RestorationBlock(d, cfg.ff) for _ in range(cfg.tat_layers))
        self.sat_blocks = nn.ModuleList(RestorationBlock(d, cfg.ff) for _ in range(cfg.sat_layers))
        self.head = nn.Linear(d, cfg.codebook)
        self.step = 0

    # -- condition/grid embedding ------------------------------------------

    def embed_condition(self, c: Condition) -> torch.Tensor:
        """(n_c, d) condition tokens; the fused modality prepends the projected
        text token ahead of the audio grid."""
        if c.modality is Modality.TEXT:
            return self.text_proj(torch.tensor(c.text_embed, dtype=self.text_proj.weight.dtype))
        audio = torch.tensor(c.audio_feats, dtype=self.audio_proj.weight.dtype)
        if c.modality is Modality.TEXT_AUDIO:
            text_row = self.text_to_audio(torch.tensor(c.text_embed, dtype=self.text_to_audio.weight.dtype))
            audio = torch.cat([text_row, audio], dim=0)
        return self.audio_proj(audio)

    def embed_grid(self, indices: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, T', J') indices + bool mask -> (B, T', J', d) with positional terms;
        masked cells carry the mask embedding."""
        t, j = indices.shape[1], indices.shape[2]
        if t > self.cfg.max_temporal:
            raise ValueError(f"grid temporal size {t} exceeds max_temporal {self.cfg.max_temporal}")
        if j != self.cfg.spatial:
            raise ValueError(f"grid spatial size {j} does not match configured {self.cfg.spatial}")
        emb = self.tok_embed(indices.clamp(min=0))
        emb = torch.where(mask[..., None], self.mask_embedding.to(emb.dtype).expand_as(emb), emb)
        emb = emb + self.pos_temporal[:t][None, :, None, :] + self.pos_spatial[None, None, :, :]
        return emb

    # -- spec-level forward passes -----------------------------------------

    def tat_forward(self, x: torch.Tensor, c: Condition, need_weights: bool = False):
        """Run every temporal block on (T', d) or (B, T', d) embeddings."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        cond = self.embed_condition(c).to(x.dtype)[None].expand(x.shape[0], -1, -1)
        concat = c.modality is Modality.TEXT
        maps = []
        for block in self.tat_blocks:
            if need_weights:
                x, w = block(x, cond, concat_condition=concat, need_weights=True)
                maps.append(w[0] if squeeze else w)
            else:
                x = block(x, cond, concat_condition=concat)
        out = x[0] if squeeze else x
        return (out, maps) if need_weights else out

    def sat_forward(self, x: torch.Tensor, c: Condition, need_weights: bool = False):
        """Run every spatial block on (J', d) or (B, J', d) embeddings; always cross."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        cond = self.sat_cond_proj(self.embed_condition(c).to(x.dtype))[None].expand(x.shape[0], -1, -1)
        maps = []
        for block in self.sat_blocks:
            if need_weights:
                x, w = block(x, cond, concat_condition=False, need_weights=True)
                maps.append(w[0] if squeeze else w)
            else:
                x = block(x, cond, concat_condition=False)
        out = x[0] if squeeze else x
        return (out, maps) if need_weights else out

    def forward_grid(
        self,
        indices: torch.Tensor,  # (B, T', J') long
        mask: torch.Tensor,  # (B, T', J') bool
        conditions: list[Condition],
        need_weights: bool = False,
    ):
        """Full stack over a batch of grids -> logits (B, T', J', K).

        All conditions in a batch must share modality and token count. Temporal
        blocks run over each spatial column, spatial blocks over each frame.
        """
        b, t, j = indices.shape
        modality = conditions[0].modality
        cond = torch.stack([self.embed_condition(c) for c in conditions])  # (B, n_c, d)
        dtype = cond.dtype
        x = self.embed_grid(indices, mask).to(dtype)
        concat = modality is Modality.TEXT
        n_c = cond.shape[1]
        maps = {"tat": [], "sat": []}

        # temporal stage: columns as batch entries
        xt = x.permute(0, 2, 1, 3).reshape(b * j, t, -1)
        cond_t = cond.repeat_interleave(j, dim=0)
        for block in self.tat_blocks:
            if need_weights:
                xt, w = block(xt, cond_t, concat_condition=concat, need_weights=True)
                maps["tat"].append(w.reshape(b, j, *w.shape[1:]))
            else:
                xt = block(xt, cond_t, concat_condition=concat)
        x = xt.reshape(b, j, t, -1).permute(0, 2, 1, 3)

        # spatial stage: frames as batch entries, cross form for every modality
        cond_s = self.sat_cond_proj(cond)
        xs = x.reshape(b * t, j, -1)
        cond_sf = cond_s.repeat_interleave(t, dim=0)
        for block in self.sat_blocks:
            if need_weights:
                xs, w = block(xs, cond_sf, concat_condition=False, need_weights=True)
                maps["sat"].append(w.reshape(b, t, *w.shape[1:]))
            else:
                xs = block(xs, cond_sf, concat_condition=False)
        x = xs.reshape(b, t, j, -1)

        logits = self.head(x)
        if need_weights:
            return logits, maps
        return logits

    # -- numpy exports for the masking module --------------------------------

    def grid_tokens_for_masking(self, grid: TokenGrid) -> tuple[np.ndarray, np.ndarray]:
        """Temporal tokens (T', d) as spatial means of cell embeddings, plus the
        raw per-cell spatial tokens (T', J', d); detached."""
        with torch.no_grad():
            idx = torch.tensor(grid.indices, dtype=torch.long)
            emb = self.tok_embed(idx)  # (T', J', d)
        spatial = emb.double().numpy()
        return spatial.mean(axis=1), spatial

    def condition_tokens_for_masking(self, c: Condition) -> np.ndarray:
        with torch.no_grad():
            return self.embed_condition(c).double().numpy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RestorationBatch:
    """Masked grids with their restoration targets; targets are meaningful
    exactly where mask_flags hold."""

    grids: list[TokenGrid]
    targets: np.ndarray  # (B, T', J') original indices
    conditions: list[Condition]

    def __post_init__(self):
        if not self.grids:
            raise ValueError("batch is empty")
        shapes = {g.indices.shape for g in self.grids}
        if len(shapes) != 1:
            raise ValueError("batched grids must share a shape")
        mods = {c.modality for c in self.conditions}
        if len(mods) != 1:
            raise ValueError("batched conditions must share a modality")


@dataclass
class OptimizerState:
    """Adam with the linear warm-up rule lr(step) = base_lr * min(1, step / warmup)."""

    model: GeneratorModel
    base_lr: float = 2e-4
    warmup: int = 2000
    step: int = 0
    opt: torch.optim.Adam = None

    def __post_init__(self):
        if self.opt is None:
            self.opt = torch.optim.Adam(self.model.parameters(), lr=self.base_lr, betas=(0.9, 0.99))

    def lr(self, step: int | None = None) -> float:
        return warmup_lr(self.step if step is None else step, self.base_lr, self.warmup)


def restoration_loss(model: GeneratorModel, batch: RestorationBatch) -> tuple[torch.Tensor, int]:
    """Mean cross entropy over masked cells only; (loss, masked_cell_count)."""
    indices = torch.tensor(np.stack([g.indices for g in batch.grids]), dtype=torch.long)
    mask = torch.tensor(np.stack([g.mask_flags for g in batch.grids]))
    targets = torch.tensor(batch.targets, dtype=torch.long)
    logits = model.forward_grid(indices, mask, batch.conditions)
    flat_mask = mask.reshape(-1)
    n_masked = int(flat_mask.sum())
    if n_masked == 0:
        return torch.zeros((), dtype=logits.dtype), 0
    flat_logits = logits.reshape(-1, logits.shape[-1])[flat_mask]
    flat_targets = targets.reshape(-1)[flat_mask]
    return F.cross_entropy(flat_logits, flat_targets), n_masked


def train_step(batch: RestorationBatch, model: GeneratorModel, state: OptimizerState) -> tuple[float, OptimizerState]:
    """One masked-restoration update; learning rate follows the warm-up rule."""
    loss, n_masked = restoration_loss(model, batch)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"generator loss diverged at step {state.step}")
    lr = state.lr()
    if n_masked > 0 and lr > 0.0:
        for group in state.opt.param_groups:
            group["lr"] = lr
        state.opt.zero_grad()
        loss.backward()
        state.opt.step()
    state.step += 1
    model.step = state.step
    return float(loss.detach()), state


# -- mask planning against a model ------------------------------------------


def plan_for_grid(
    model: GeneratorModel,
    grid: TokenGrid,
    condition: Condition,
    alpha_t: float,
    alpha_s: float,
    strategy: str = "attention",
    seed: int = 0,
) -> masking.MaskPlan:
    """Mask plan for one token grid under the chosen strategy, using the
    model's current embeddings where embeddings are called for."""
    t, j = grid.temporal, grid.spatial
    if strategy == "attention":
        temporal, spatial = model.grid_tokens_for_masking(grid)
        cond = model.condition_tokens_for_masking(condition)
        plan, _ = masking.plan_masks_from_tokens(temporal, spatial, cond, condition.modality, alpha_t, alpha_s)
        return plan
    if strategy == "random":
        return masking.MaskPlan(
            temporal_masked=tuple(masking.random_mask(t, alpha_t, seed)),
            spatial_masked=tuple(masking.random_mask(j, alpha_s, seed + 1)),
            alpha_temporal=alpha_t,
            alpha_spatial=alpha_s,
        )
    if strategy == "confidence":
        with torch.no_grad():
            idx = torch.tensor(grid.indices, dtype=torch.long)[None]
            mask = torch.zeros_like(idx, dtype=torch.bool)
            logits = model.forward_grid(idx, mask, [condition])
            conf = torch.softmax(logits[0].double(), dim=-1).max(dim=-1).values.numpy()  # (T', J')
        return masking.MaskPlan(
            temporal_masked=tuple(masking.confidence_mask(conf.mean(axis=1), alpha_t)),
            spatial_masked=tuple(masking.confidence_mask(conf.mean(axis=0), alpha_s)),
            alpha_temporal=alpha_t,
            alpha_spatial=alpha_s,
        )
    if strategy in ("density", "kmeans", "gmm"):
        temporal, spatial = model.grid_tokens_for_masking(grid)
        per_joint = spatial.mean(axis=0)  # (J', d)
        if strategy == "density":
            t_idx = masking.density_mask(temporal, alpha_t)
            s_idx = masking.density_mask(per_joint, alpha_s)
        elif strategy == "kmeans":
            t_idx = masking.kmeans_mask(temporal, alpha_t, n_clusters=min(2, t), seed=seed)
            s_idx = masking.kmeans_mask(per_joint, alpha_s, n_clusters=min(2, j), seed=seed)
        else:
            t_idx = masking.gmm_mask(temporal, alpha_t, n_clusters=min(2, t), seed=seed)
            s_idx = masking.gmm_mask(per_joint, alpha_s, n_clusters=min(2, j), seed=seed)
        return masking.MaskPlan(tuple(t_idx), tuple(s_idx), alpha_t, alpha_s)
    raise ValueError(f"unknown masking strategy '{strategy}'")


def apply_plan(grid: TokenGrid, plan: masking.MaskPlan) -> tuple[TokenGrid, np.ndarray]:
    """Returns (masked grid with scrubbed indices, target index grid)."""
    mask = plan.cell_mask(grid.temporal, grid.spatial)
    scrubbed = grid.indices.copy()
    scrubbed[mask] = 0
    masked = TokenGrid(scrubbed, mask, grid.scale, grid.pad_frames, grid.fps)
    return masked, grid.indices.copy()


@dataclass
class GenTrainConfig:
    steps: int = 500
    batch: int = 8
    base_lr: float = 2e-4
    warmup: int = 2000
    alpha_t: float = 0.30
    alpha_s: float = 0.30
    strategy: str = "attention"
    seed: int = 0


@dataclass
class GenTrainLog:
    losses: list[float] = field(default_factory=list)
    epochs: int = 0


def train_generator(
    records,
    tok_model: TokenizerModel,
    gen_cfg: GeneratorConfig,
    train_cfg: GenTrainConfig,
) -> tuple[GeneratorModel, GenTrainLog]:
    """Masked-restoration training; plans are recomputed once per epoch with
    the current model, then batches are grouped by modality."""
    if not records:
        raise ValueError("corpus is empty")
    model = GeneratorModel(gen_cfg)
    state = OptimizerState(model, base_lr=train_cfg.base_lr, warmup=train_cfg.warmup)
    rng = np.random.default_rng(train_cfg.seed)
    grids = [encode(rec.motion, tok_model) for rec in records]
    conditions = [rec.condition for rec in records]

    log = GenTrainLog()
    while state.step < train_cfg.steps:
        log.epochs += 1
        plans = [
            plan_for_grid(
                model,
                grids[i],
                conditions[i],
                train_cfg.alpha_t,
                train_cfg.alpha_s,
                strategy=train_cfg.strategy,
                seed=int(rng.integers(2**31)),
            )
            for i in range(len(records))
        ]
        order = rng.permutation(len(records))
        by_modality: dict[Modality, list[int]] = {}
        for i in order:
            by_modality.setdefault(conditions[i].modality, []).append(int(i))
        batches = []
        for idxs in by_modality.values():
            for start in range(0, len(idxs), train_cfg.batch):
                batches.append(idxs[start : start + train_cfg.batch])
        for batch_idxs in batches:
            if state.step >= train_cfg.steps:
                break
            masked, targets = zip(*(apply_plan(grids[i], plans[i]) for i in batch_idxs))
            batch = RestorationBatch(
                grids=list(masked),
                targets=np.stack(targets),
                conditions=[conditions[i] for i in batch_idxs],
            )
            loss, state = train_step(batch, model, state)
            log.losses.append(loss)
    return model, log


def restoration_accuracy(model: GeneratorModel, grids, plans, conditions) -> float:
    """Fraction of masked cells whose argmax prediction equals the original token."""
    correct = 0
    total = 0
    with torch.no_grad():
        for grid, plan, cond in zip(grids, plans, conditions):
            masked, targets = apply_plan(grid, plan)
            idx = torch.tensor(masked.indices, dtype=torch.long)[None]
            mask = torch.tensor(masked.mask_flags)[None]
            logits = model.forward_grid(idx, mask, [cond])
            pred = logits[0].argmax(dim=-1).numpy()
            cells = masked.mask_flags
            correct += int((pred[cells] == targets[cells]).sum())
            total += int(cells.sum())
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeSchedule:
    rounds: int = 10
    sample: bool = False
    temperature: float = 1.0
    seed: int = 0


def generate(
    c: Condition,
    length: int,
    model: GeneratorModel,
    schedule: DecodeSchedule = DecodeSchedule(),
    scale: int = 1,
    fps: float = 20.0,
) -> TokenGrid:
    """Fill an all-masked (length, J') grid over `rounds` passes, keeping the
    most confident predictions per round on a cosine schedule. `scale` and
    `fps` are stamped onto the grid so the tokenizer can decode it."""
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    if schedule.rounds < 1:
        raise ValueError("need at least one decode round")
    t, j = length, model.cfg.spatial
    total = t * j
    indices = np.zeros((t, j), dtype=np.int64)
    masked = np.ones((t, j), dtype=bool)
    gen = torch.Generator().manual_seed(schedule.seed)
    with torch.no_grad():
        for r in range(schedule.rounds):
            idx = torch.tensor(indices)[None]
            mask = torch.tensor(masked)[None]
            logits = model.forward_grid(idx, mask, [c])[0]  # (T', J', K)
            probs = torch.softmax(logits.double() / schedule.temperature, dim=-1)
            if schedule.sample:
                flat = probs.reshape(-1, probs.shape[-1])
                choice = torch.multinomial(flat, 1, generator=gen).reshape(t, j)
            else:
                choice = probs.argmax(dim=-1)
            conf = torch.gather(probs, -1, choice[..., None])[..., 0].numpy()
            choice = choice.numpy()

            frac_next = math.cos(math.pi / 2 * (r + 1) / schedule.rounds)
            n_masked_next = int(math.floor(total * frac_next)) if r + 1 < schedule.rounds else 0
            flat_masked = np.flatnonzero(masked.reshape(-1))
            reveal = len(flat_masked) - n_masked_next
            if reveal <= 0:
                continue
            order = np.argsort(-conf.reshape(-1)[flat_masked], kind="stable")
            chosen_cells = flat_masked[order[:reveal]]
            rr, cc = np.unravel_index(chosen_cells, (t, j))
            indices[rr, cc] = choice[rr, cc]
            masked[rr, cc] = False
    assert not masked.any()
    return TokenGrid(indices=indices, mask_flags=np.zeros((t, j), dtype=bool), scale=scale, pad_frames=0, fps=fps)


# ---------------------------------------------------------------------------
# GEN1 checkpoint format
# ---------------------------------------------------------------------------


def save_generator(model: GeneratorModel, path: str) -> None:
    cfg = model.cfg
    header = {
        "version": 1,
        "d_model": cfg.d_model,
        "ff": cfg.ff,
        "codebook": cfg.codebook,
        "tat_layers": cfg.tat_layers,
        "sat_layers": cfg.sat_layers,
        "text_dim": cfg.text_dim,
        "audio_dim": cfg.audio_dim,
        "max_temporal": cfg.max_temporal,
        "spatial": cfg.spatial,
        "seed": cfg.seed,
        "step": model.step,
    }
    write_envelope(path, GEN_MAGIC, header, _param_payload(model))


def load_generator(path: str) -> GeneratorModel:
    header, payload, _ = read_envelope(path, GEN_MAGIC)
    cfg = GeneratorConfig(
        d_model=int(header["d_model"]),
        ff=int(header["ff"]),
        codebook=int(header["codebook"]),
        tat_layers=int(header["tat_layers"]),
        sat_layers=int(header["sat_layers"]),
        text_dim=int(header["text_dim"]),
        audio_dim=int(header["audio_dim"]),
        max_temporal=int(header["max_temporal"]),
        spatial=int(header["spatial"]),
        seed=int(header["seed"]),
    )
    model = GeneratorModel(cfg)
    _load_param_payload(model, payload)
    model.step = int(header["step"])
    return model
