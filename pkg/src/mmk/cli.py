"""Batch command line: corpus synthesis, tokenizer/generator training,
generation, evaluation, mask inspection, and rig selection.

Every command writes its artifacts into the --out directory only, echoes its
RunConfig into each JSON output (binary artifacts get a .json sidecar), and
exits 0 on success, 2 on usage errors, 3 on data errors, 4 on numeric failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import masking, metrics, rigging
from .conditions import embed_text
from .data import CorpusRecord, SynthSpec, load_corpus, synth_corpus, write_corpus
from .generator import (
    DecodeSchedule,
    GenTrainConfig,
    GeneratorConfig,
    generate,
    load_generator,
    save_generator,
    train_generator,
)
from .packio import PackFormatError
from .tokenizer import (
    TokenGrid,
    TokenizerConfig,
    TrainingDivergedError,
    VqTrainConfig,
    decode,
    encode,
    load_tokenizer,
    save_tokenizer,
    train_tokenizer,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    """Experiment knobs echoed into every output for reproducibility."""

    command: str
    seed: int = 0
    alpha_temporal: float = 0.30
    alpha_spatial: float = 0.30
    strategy: str = "attention"
    tat_layers: int = 2
    sat_layers: int = 2
    codebook: int = 64
    scale: int = 4
    rounds: int = 10
    sigma_beats: float | None = None
    eps_lateral: float = rigging.DEFAULT_EPS_LATERAL
    pool: int = 32
    full_pairs: bool = False
    pairs: int = 300
    paths: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.alpha_temporal <= 1.0 and 0.0 <= self.alpha_spatial <= 1.0):
            raise ValueError("masking ratios must be in [0, 1]")
        if min(self.tat_layers, self.sat_layers, self.codebook, self.scale, self.rounds, self.pool, self.pairs) < 1:
            raise ValueError("counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def _worker_count(n_items: int) -> int:
    cap = os.environ.get("MMK_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_items))


def _write_report(out_dir: str, name: str, payload: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = RunConfig(
        command="synth",
        seed=args.seed,
        paths={"out": args.out},
        extra={
            "n": args.n,
            "frames": args.frames,
            "joints": args.joints,
            "feature_dim": args.feature_dim,
            "fps": args.fps,
            "text_dim": args.text_dim,
            "audio_dim": args.audio_dim,
            "beat_period": args.beat_period,
        },
    )
    spec = SynthSpec(
        frames=args.frames,
        joints=args.joints,
        feature_dim=args.feature_dim,
        fps=args.fps,
        text_dim=args.text_dim,
        audio_dim=args.audio_dim,
        beat_period=args.beat_period,
    )
    records = synth_corpus(args.seed, args.n, spec)
    os.makedirs(args.out, exist_ok=True)
    corpus_path = os.path.join(args.out, "corpus.mpk")
    write_corpus(records, corpus_path)
    _write_report(args.out, "synth.json", {"config": cfg.to_dict(), "records": len(records), "corpus": corpus_path})
    print(f"wrote {len(records)} records to {corpus_path}")
    return EXIT_OK


def cmd_train_vq(args) -> int:
    records = load_corpus(args.corpus)
    if not records:
        raise PackFormatError(f"{args.corpus}: corpus is empty")
    feature_dim = records[0].motion.feature_dim
    cfg = RunConfig(
        command="train-vq",
        seed=args.seed,
        codebook=args.codebook,
        scale=args.scale,
        paths={"corpus": args.corpus, "out": args.out},
        extra={"steps": args.steps, "batch": args.batch, "feature_dim": feature_dim},
    )
    tok_cfg = TokenizerConfig(feature_dim=feature_dim, codebook=args.codebook, scale=args.scale, seed=args.seed)
    train_cfg = VqTrainConfig(steps=args.steps, batch=args.batch, seed=args.seed)
    model, log = train_tokenizer(records, tok_cfg, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "tokenizer.tkz")
    save_tokenizer(model, ckpt)
    _write_report(
        args.out,
        "train_vq.json",
        {
            "config": cfg.to_dict(),
            "checkpoint": ckpt,
            "first_loss": log.losses[0],
            "final_loss": log.losses[-1],
            "steps": len(log.losses),
        },
    )
    print(f"tokenizer trained for {len(log.losses)} steps, loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}")
    return EXIT_OK


def _generator_dims(records) -> tuple[int, int]:
    text_dim, audio_dim = 32, 8
    for rec in records:
        if rec.condition.text_embed is not None:
            text_dim = rec.condition.text_embed.shape[1]
            break
    for rec in records:
        if rec.condition.audio_feats is not None:
            audio_dim = rec.condition.audio_feats.shape[1]
            break
    return text_dim, audio_dim


def cmd_train_gen(args) -> int:
    records = load_corpus(args.corpus)
    if not records:
        raise PackFormatError(f"{args.corpus}: corpus is empty")
    tok = load_tokenizer(args.vq)
    grids = [encode(rec.motion, tok) for rec in records[:1]]
    text_dim, audio_dim = _generator_dims(records)
    cfg = RunConfig(
        command="train-gen",
        seed=args.seed,
        alpha_temporal=args.alpha_t,
        alpha_spatial=args.alpha_s,
        strategy=args.strategy,
        tat_layers=args.tat_layers,
        sat_layers=args.sat_layers,
        codebook=tok.cfg.codebook,
        scale=tok.cfg.scale,
        paths={"corpus": args.corpus, "vq": args.vq, "out": args.out},
        extra={"steps": args.steps, "batch": args.batch, "d_model": args.d_model},
    )
    gen_cfg = GeneratorConfig(
        d_model=args.d_model,
        ff=2 * args.d_model,
        codebook=tok.cfg.codebook,
        tat_layers=args.tat_layers,
        sat_layers=args.sat_layers,
        text_dim=text_dim,
        audio_dim=audio_dim,
        max_temporal=max(grids[0].temporal, 64),
        spatial=grids[0].spatial,
        seed=args.seed,
    )
    train_cfg = GenTrainConfig(
        steps=args.steps,
        batch=args.batch,
        alpha_t=args.alpha_t,
        alpha_s=args.alpha_s,
        strategy=args.strategy,
        seed=args.seed,
    )
    model, log = train_generator(records, tok, gen_cfg, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "generator.gen")
    save_generator(model, ckpt)
    _write_report(
        args.out,
        "train_gen.json",
        {
            "config": cfg.to_dict(),
            "checkpoint": ckpt,
            "first_loss": log.losses[0],
            "final_loss": log.losses[-1],
            "steps": len(log.losses),
            "epochs": log.epochs,
        },
    )
    print(f"generator trained for {len(log.losses)} steps, loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    records = load_corpus(args.corpus)
    tok = load_tokenizer(args.vq)
    model = load_generator(args.gen)
    cfg = RunConfig(
        command="generate",
        seed=args.seed,
        rounds=args.rounds,
        codebook=model.cfg.codebook,
        scale=tok.cfg.scale,
        tat_layers=model.cfg.tat_layers,
        sat_layers=model.cfg.sat_layers,
        paths={"corpus": args.corpus, "vq": args.vq, "gen": args.gen, "out": args.out},
        extra={"samples": args.samples, "temperature": args.temperature},
    )
    out_records = []
    for rec in records:
        grid = encode(rec.motion, tok)
        for s in range(args.samples):
            schedule = DecodeSchedule(
                rounds=args.rounds,
                sample=args.samples > 1,
                temperature=args.temperature,
                seed=args.seed + s,
            )
            gen_grid = generate(
                rec.condition,
                grid.temporal,
                model,
                schedule,
                scale=tok.cfg.scale,
                fps=rec.motion.fps,
            )
            gen_grid = _with_pad(gen_grid, grid.pad_frames)
            motion = decode(gen_grid, tok)
            rid = rec.id if args.samples == 1 else f"{rec.id}#s{s}"
            out_records.append(CorpusRecord(id=rid, motion=motion, condition=rec.condition, caption=rec.caption))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "generated.mpk")
    write_corpus(out_records, out_path)
    _write_report(args.out, "generate.json", {"config": cfg.to_dict(), "records": len(out_records), "corpus": out_path})
    print(f"wrote {len(out_records)} generated records to {out_path}")
    return EXIT_OK


def _with_pad(grid: TokenGrid, pad_frames: int) -> TokenGrid:
    """Stamp the source padding onto a generated grid so decode trims it."""
    return TokenGrid(grid.indices, grid.mask_flags, grid.scale, pad_frames, grid.fps)


def cmd_evaluate(args) -> int:
    real = load_corpus(args.corpus)
    gen = load_corpus(args.generated)
    if len(real) < 2 or len(gen) < 2:
        raise PackFormatError("evaluate needs at least 2 records on each side")
    cfg = RunConfig(
        command="evaluate",
        seed=args.seed,
        sigma_beats=args.sigma_beats,
        pool=args.pool,
        full_pairs=args.full_pairs,
        pairs=args.pairs,
        paths={"corpus": args.corpus, "generated": args.generated, "out": args.out},
    )

    def features_of(records, fn):
        out = [None] * len(records)
        with ThreadPoolExecutor(max_workers=_worker_count(len(records))) as executor:
            futures = {executor.submit(fn, rec.motion): i for i, rec in enumerate(records)}
            for fut, i in futures.items():
                out[i] = fut.result()
        return np.stack(out)

    real_k = metrics.FeatureSet(features_of(real, metrics.kinetic_features), metrics.FeatureKind.KINETIC)
    gen_k = metrics.FeatureSet(features_of(gen, metrics.kinetic_features), metrics.FeatureKind.KINETIC)
    real_g = metrics.FeatureSet(features_of(real, metrics.geometric_features), metrics.FeatureKind.GEOMETRIC)
    gen_g = metrics.FeatureSet(features_of(gen, metrics.geometric_features), metrics.FeatureKind.GEOMETRIC)

    n = gen_k.count
    max_pairs = n * (n - 1) // 2
    pairs = min(args.pairs, max_pairs)
    div_k = metrics.diversity(gen_k, pairs, seed=args.seed, exhaustive=args.full_pairs)
    div_g = metrics.diversity(gen_g, pairs, seed=args.seed, exhaustive=args.full_pairs)

    bas_scores = [
        metrics.beat_align_score(rec.condition.beat_times, rec.motion, sigma=args.sigma_beats)
        for rec in gen
        if rec.condition.beat_times is not None and rec.condition.beat_times.size > 0 and rec.motion.frames >= 3
    ]
    bas = float(np.mean(bas_scores)) if bas_scores else None

    captioned = [rec for rec in gen if rec.caption]
    mm_dist = rp = None
    r_precision_report = {"1": None, "2": None, "3": None}
    if captioned:
        text_dim = next(
            (rec.condition.text_embed.shape[1] for rec in captioned if rec.condition.text_embed is not None),
            32,
        )
        text_embeds = np.concatenate([embed_text(rec.caption, dims=text_dim) for rec in captioned])
        motion_embeds = np.stack([metrics.embed_motion_stub(rec.motion, dims=text_dim) for rec in captioned])
        mm_dist = metrics.multimodal_distance(motion_embeds, text_embeds)
        if len(captioned) >= args.pool:
            r_precision_report = {
                str(k): metrics.r_precision(motion_embeds, text_embeds, k=k, pool=args.pool) for k in (1, 2, 3)
            }

    groups = {}
    for rec in captioned:
        groups.setdefault(rec.caption, []).append(metrics.embed_motion_stub(rec.motion, dims=32))
    eligible = [np.stack(v) for v in groups.values() if len(v) >= 2]
    mmod = metrics.mmodality(eligible) if eligible else None

    report = {
        "config": cfg.to_dict(),
        "fid_k": metrics.fid(real_k, gen_k),
        "fid_g": metrics.fid(real_g, gen_g),
        "div_k": div_k,
        "div_g": div_g,
        "bas": bas,
        "mm_dist": mm_dist,
        "mmodality": mmod,
        "r_precision": r_precision_report,
        "records": {"real": len(real), "generated": len(gen)},
    }
    path = _write_report(args.out, "evaluate.json", report)
    print(f"evaluation report written to {path}")
    return EXIT_OK


def cmd_mask_inspect(args) -> int:
    records = load_corpus(args.corpus)
    by_id = {rec.id: rec for rec in records}
    if args.record in by_id:
        rec = by_id[args.record]
    else:
        try:
            rec = records[int(args.record)]
        except (ValueError, IndexError) as exc:
            raise PackFormatError(f"record '{args.record}' not found in {args.corpus}") from exc
    cfg = RunConfig(
        command="mask-inspect",
        seed=args.seed,
        alpha_temporal=args.alpha_t,
        alpha_spatial=args.alpha_s,
        strategy=args.strategy,
        paths={"corpus": args.corpus, "out": args.out},
        extra={"record": rec.id},
    )
    m, c = rec.motion, rec.condition
    text_dim = c.text_embed.shape[1] if c.text_embed is not None else 1
    audio_dim = c.audio_feats.shape[1] if c.audio_feats is not None else 1
    projector = masking.FrameProjector.create(m.joints, m.feature_dim, text_dim, audio_dim, seed=args.seed)
    if args.strategy == "attention":
        plan, scores = masking.plan_masks(m, c, args.alpha_t, args.alpha_s, projector=projector)
        raw_map = scores.raw_map.tolist()
        temporal_scores = scores.temporal.tolist()
        spatial_scores = scores.spatial.tolist()
    else:
        temporal_tokens, spatial_tokens = projector.embed_motion(m)
        per_joint = spatial_tokens.mean(axis=0)
        if args.strategy == "random":
            t_idx = masking.random_mask(m.frames, args.alpha_t, args.seed)
            s_idx = masking.random_mask(m.joints, args.alpha_s, args.seed + 1)
        elif args.strategy == "confidence":
            raise PackFormatError("confidence strategy needs a trained model; use mask-inspect with --strategy attention")
        else:
            t_idx = masking.baseline_mask(args.strategy, temporal_tokens, args.alpha_t, seed=args.seed)
            s_idx = masking.baseline_mask(args.strategy, per_joint, args.alpha_s, seed=args.seed)
        plan = masking.MaskPlan(tuple(t_idx), tuple(s_idx), args.alpha_t, args.alpha_s)
        raw_map = None
        temporal_scores = None
        spatial_scores = None
    report = {
        "config": cfg.to_dict(),
        "record": rec.id,
        "modality": c.modality.value,
        "temporal_scores": temporal_scores,
        "spatial_scores": spatial_scores,
        "raw_map": raw_map,
        "plan": {
            "temporal_masked": list(plan.temporal_masked),
            "spatial_masked": list(plan.spatial_masked),
            "alpha_temporal": plan.alpha_temporal,
            "alpha_spatial": plan.alpha_spatial,
        },
    }
    path = _write_report(args.out, "mask_inspect.json", report)
    print(f"mask inspection written to {path}")
    return EXIT_OK


def cmd_select_rig(args) -> int:
    cands = rigging.load_candidate_dir(args.candidates)
    cfg = RunConfig(
        command="select-rig",
        eps_lateral=args.eps_lateral,
        paths={"candidates": args.candidates, "out": args.out},
    )
    chosen, report = rigging.select_optimal(cands, eps_lateral=args.eps_lateral)
    payload = {"config": cfg.to_dict(), **report}
    path = _write_report(args.out, "select_rig.json", payload)
    if chosen is None:
        print("no candidate passes stage 1; see report for per-candidate reasons")
    else:
        print(f"chose candidate '{chosen}'")
    print(f"selection report written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=_positive_int, default=24)
    p.add_argument("--joints", type=_positive_int, default=4)
    p.add_argument("--feature-dim", type=_positive_int, default=3)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--text-dim", type=_positive_int, default=32)
    p.add_argument("--audio-dim", type=_positive_int, default=8)
    p.add_argument("--beat-period", type=_positive_int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-vq", help="train the VQ tokenizer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codebook", type=_positive_int, default=64)
    p.add_argument("--scale", type=_positive_int, default=4)
    p.add_argument("--steps", type=_positive_int, default=300)
    p.add_argument("--batch", type=_positive_int, default=16)
    p.set_defaults(func=cmd_train_vq)

    p = sub.add_parser("train-gen", help="train the masked restoration generator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=_positive_int, default=500)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--d-model", type=_positive_int, default=64)
    p.add_argument("--tat-layers", type=_positive_int, default=2)
    p.add_argument("--sat-layers", type=_positive_int, default=2)
    p.add_argument("--alpha-t", type=_ratio, default=0.30)
    p.add_argument("--alpha-s", type=_ratio, default=0.30)
    p.add_argument("--strategy", choices=["attention", "random", "confidence", "density", "kmeans", "gmm"], default="attention")
    p.set_defaults(func=cmd_train_gen)

    p = sub.add_parser("generate", help="generate motions for a corpus's conditions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=_positive_int, default=10)
    p.add_argument("--samples", type=_positive_int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metric report comparing real and generated corpora")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", type=_positive_int, default=32)
    p.add_argument("--pairs", type=_positive_int, default=300)
    p.add_argument("--full-pairs", action="store_true")
    p.add_argument("--sigma-beats", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-inspect", help="emit attention scores and the mask plan for one record")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--record", default="0", help="record id or index")
    p.add_argument("--alpha-t", type=_ratio, default=0.30)
    p.add_argument("--alpha-s", type=_ratio, default=0.30)
    p.add_argument("--strategy", choices=["attention", "random", "density", "kmeans", "gmm"], default="attention")
    p.set_defaults(func=cmd_mask_inspect)

    p = sub.add_parser("select-rig", help="pick the best rigged candidate from a directory")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps-lateral", type=float, default=rigging.DEFAULT_EPS_LATERAL)
    p.set_defaults(func=cmd_select_rig)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PackFormatError, FileNotFoundError, NotADirectoryError, ValueError, KeyError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
