"""Acceptance suite: one criterion per test, each printing its own pass/fail
line and enforcing its runtime budget.

The learning-signal experiment and ratio grid run on a fixed-seed 64-record
synthetic corpus shared across criteria via module fixtures.
"""
import functools
import math
import time
import warnings

import numpy as np
import pytest
import torch

from fdcheck import run_family_checks
from mmk import masking, metrics
from mmk.data import Condition, Modality, MotionSequence, load_corpus, synth_corpus, write_corpus
from mmk.generator import (
    GenTrainConfig,
    GeneratorConfig,
    GeneratorModel,
    RestorationBatch,
    apply_plan,
    load_generator,
    plan_for_grid,
    restoration_accuracy,
    restoration_loss,
    save_generator,
    train_generator,
)
from mmk.masking import MaskPlan
from mmk.rigging import RiggedCandidate, load_candidate, select_optimal, write_candidate
from mmk.tokenizer import (
    TokenGrid,
    TokenizerConfig,
    TokenizerModel,
    VqTrainConfig,
    encode,
    load_tokenizer,
    save_tokenizer,
    train_tokenizer,
    vq_loss,
)

CORPUS_SEED = 11
TRAIN_SEED = 5


def criterion(number, name, budget_seconds):
    """Prints one pass/fail line per criterion and enforces its time budget."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.monotonic()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {number} FAIL ({name})")
                raise
            elapsed = time.monotonic() - start
            print(f"criterion {number} PASS ({name}) [{elapsed:.1f}s]")
            assert elapsed < budget_seconds, f"criterion {number} exceeded budget: {elapsed:.1f}s >= {budget_seconds}s"

        return wrapper

    return decorate


@pytest.fixture(scope="module")
def corpus64():
    return synth_corpus(CORPUS_SEED, 64)


@pytest.fixture(scope="module")
def trained_tokenizer(corpus64):
    model, _ = train_tokenizer(corpus64, TokenizerConfig(), VqTrainConfig(steps=300, seed=TRAIN_SEED))
    return model


@criterion(1, "masking cardinality and sort-oracle agreement", 5.0)
def test_criterion_1_masking_oracles():
    rng = np.random.default_rng(0)
    alphas = [0.0, 0.15, 0.25, 0.30, 0.34, 0.50, 0.75, 1.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n in range(1, 9):
            for draw in range(6):
                scores = rng.integers(0, 4, size=n).astype(float) + rng.normal(0, 0.1, size=n).round(1)
                tokens = rng.normal(size=(n, 4))
                conf = rng.uniform(size=n)
                for alpha in alphas:
                    k = masking.mask_count(alpha, n)
                    order = sorted(range(n), key=lambda i: (-scores[i], i))
                    assert masking.top_alpha_mask(scores, alpha) == sorted(order[:k])
                    assert len(masking.random_mask(n, alpha, seed=n * 100 + draw)) == k
                    assert len(masking.confidence_mask(conf, alpha)) == k
                    assert len(masking.density_mask(tokens, alpha)) == k
                if n >= 2 and draw == 0:  # clustering fits are slower; sample them
                    for alpha in (0.15, 0.30, 0.50, 1.0):
                        k = masking.mask_count(alpha, n)
                        assert len(masking.kmeans_mask(tokens, alpha, n_clusters=2, seed=0)) == k
                        assert len(masking.gmm_mask(tokens, alpha, n_clusters=2, seed=0)) == k


@criterion(2, "modality routing shapes in masking and temporal restoration", 1.0)
def test_criterion_2_modality_routing():
    rng = np.random.default_rng(1)
    t, j, d_model = 5, 3, 16
    cfg = GeneratorConfig(d_model=d_model, ff=24, codebook=8, text_dim=4, audio_dim=3, max_temporal=t, spatial=j, seed=0)
    model = GeneratorModel(cfg)
    x = torch.randn(t, d_model)

    text = Condition(modality=Modality.TEXT, text_embed=rng.normal(size=(1, 4)).astype(np.float32))
    audio = Condition(modality=Modality.AUDIO, audio_feats=rng.normal(size=(6, 3)).astype(np.float32))
    fused = Condition(
        modality=Modality.TEXT_AUDIO,
        text_embed=rng.normal(size=(1, 4)).astype(np.float32),
        audio_feats=rng.normal(size=(6, 3)).astype(np.float32),
    )

    # temporal restoration: text self-attends over (condition, motion)
    _, maps = model.tat_forward(x, text, need_weights=True)
    assert maps[0].shape == (t + 1, t + 1)
    _, maps = model.tat_forward(x, audio, need_weights=True)
    assert maps[0].shape == (t, 6)
    _, maps = model.tat_forward(x, fused, need_weights=True)
    assert maps[0].shape == (t, 7)

    # masking raw maps follow the same routing
    temporal = rng.normal(size=(t, 8))
    spatial = rng.normal(size=(t, j, 8))
    s = masking.score_tokens(temporal, spatial, rng.normal(size=(1, 8)), Modality.TEXT)
    assert s.raw_map.shape == (t + 1, t + 1)
    s = masking.score_tokens(temporal, spatial, rng.normal(size=(6, 8)), Modality.AUDIO)
    assert s.raw_map.shape == (6, t)
    s = masking.score_tokens(temporal, spatial, rng.normal(size=(7, 8)), Modality.TEXT_AUDIO)
    assert s.raw_map.shape == (7, t)


@criterion(3, "finite-difference gradients for every parameter family", 60.0)
def test_criterion_3_gradients():
    # generator at d_model = 8
    cfg = GeneratorConfig(
        d_model=8, ff=12, codebook=6, tat_layers=2, sat_layers=2,
        text_dim=3, audio_dim=2, max_temporal=3, spatial=2, seed=0,
    )
    gen = GeneratorModel(cfg).double()
    rng = np.random.default_rng(1)
    grid = TokenGrid(indices=rng.integers(0, 6, size=(3, 2)), mask_flags=np.zeros((3, 2), dtype=bool), scale=4)
    plan = MaskPlan(temporal_masked=(0,), spatial_masked=(1,), alpha_temporal=0.34, alpha_spatial=0.5)
    masked, targets = apply_plan(grid, plan)
    text = Condition(modality=Modality.TEXT, text_embed=rng.normal(size=(1, 3)).astype(np.float32))
    fused = Condition(
        modality=Modality.TEXT_AUDIO,
        text_embed=rng.normal(size=(1, 3)).astype(np.float32),
        audio_feats=rng.normal(size=(4, 2)).astype(np.float32),
    )
    batch_text = RestorationBatch(grids=[masked], targets=targets[None], conditions=[text])
    batch_fused = RestorationBatch(grids=[masked], targets=targets[None], conditions=[fused])
    failures, live = run_family_checks(
        gen, lambda: restoration_loss(gen, batch_text)[0] + restoration_loss(gen, batch_fused)[0]
    )
    assert not failures, f"generator finite-difference mismatches: {failures}"
    assert live >= 20

    # tokenizer with the straight-through surrogate frozen at the base point
    tok = TokenizerModel(TokenizerConfig(feature_dim=2, hidden=3, d_code=2, codebook=5, scale=2, seed=0)).double()
    x = torch.randn(2, 2, 2, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    _, aux = vq_loss(tok, x)
    frozen = {k: aux[k] for k in ("indices", "st_offset", "z_e_ref", "e_ref")}
    failures, live = run_family_checks(tok, lambda: vq_loss(tok, x, frozen=frozen)[0])
    assert not failures, f"tokenizer finite-difference mismatches: {failures}"
    assert live >= 8


@criterion(4, "learning signal: accuracy over chance and attention over random", 600.0)
def test_criterion_4_learning_signal(corpus64, trained_tokenizer):
    tok = trained_tokenizer
    assert tok.cfg.codebook == 64
    grids = [encode(rec.motion, tok) for rec in corpus64]
    conds = [rec.condition for rec in corpus64]
    gen_cfg = GeneratorConfig(spatial=grids[0].spatial, max_temporal=max(16, grids[0].temporal), seed=3)

    accuracy = {}
    for strategy in ("attention", "random"):
        model, _ = train_generator(
            corpus64, tok, gen_cfg, GenTrainConfig(steps=500, batch=8, strategy=strategy, seed=TRAIN_SEED)
        )
        plans = [
            plan_for_grid(model, grids[i], conds[i], 0.30, 0.30, strategy=strategy, seed=1000 + i)
            for i in range(len(corpus64))
        ]
        accuracy[strategy] = restoration_accuracy(model, grids, plans, conds)

    chance = 1.0 / tok.cfg.codebook
    assert accuracy["attention"] >= 5 * chance, f"attention accuracy {accuracy['attention']:.4f} under 5x chance"
    assert accuracy["random"] >= 5 * chance, f"random accuracy {accuracy['random']:.4f} under 5x chance"
    assert accuracy["attention"] >= accuracy["random"], (
        f"attention {accuracy['attention']:.4f} below random baseline {accuracy['random']:.4f}"
    )


@criterion(5, "masking-ratio grid completes with the shipped default config", 1800.0)
def test_criterion_5_ratio_grid(corpus64):
    from mmk.cli import RunConfig

    alphas = (0.15, 0.30, 0.50)
    report = masking.ratio_grid_report(corpus64, alphas, alphas)
    assert report["alphas_temporal"] == list(alphas)
    assert report["alphas_spatial"] == list(alphas)
    assert len(report["grid"]) == 9
    seen = set()
    t, j = corpus64[0].motion.frames, corpus64[0].motion.joints
    for cell in report["grid"]:
        seen.add((cell["alpha_temporal"], cell["alpha_spatial"]))
        assert cell["records"] == 64
        assert cell["mean_temporal_masked"] == masking.mask_count(cell["alpha_temporal"], t)
        assert cell["mean_spatial_masked"] == masking.mask_count(cell["alpha_spatial"], j)
    assert seen == {(a, b) for a in alphas for b in alphas}

    # the shipped defaults pin the 30% / 30% configuration exactly
    cfg = RunConfig(command="defaults")
    assert cfg.alpha_temporal == 0.30
    assert cfg.alpha_spatial == 0.30
    assert GenTrainConfig().alpha_t == 0.30
    assert GenTrainConfig().alpha_s == 0.30
    import inspect

    assert inspect.signature(masking.plan_masks).parameters["alpha_t"].default == 0.30
    assert inspect.signature(masking.plan_masks).parameters["alpha_s"].default == 0.30


@criterion(6, "metric identities", 10.0)
def test_criterion_6_metric_identities():
    rng = np.random.default_rng(5)
    x = metrics.FeatureSet(rng.normal(size=(50, 6)), metrics.FeatureKind.EMBED)
    assert metrics.fid(x, x) == pytest.approx(0.0, abs=1e-6)

    same = metrics.FeatureSet(np.ones((8, 3)), metrics.FeatureKind.EMBED)
    assert metrics.diversity(same, pairs=10) == 0.0

    increments = [3.0, 2.0, 0.5, 2.0, 3.0]
    data = np.zeros((6, 1, 1), dtype=np.float32)
    data[:, 0, 0] = np.concatenate([[0.0], np.cumsum(increments)])
    beat_motion = MotionSequence(data=data, fps=20.0)
    sigma = 3.0 / 20.0
    assert metrics.beat_align_score([3 / 20.0 + sigma], beat_motion) == pytest.approx(math.exp(-0.5), abs=1e-9)
    random_motion = MotionSequence(data=rng.normal(size=(30, 2, 3)).astype(np.float32), fps=20.0)
    s = metrics.beat_align_score(np.sort(rng.uniform(0, 1.4, size=6)), random_motion)
    assert 0.0 <= s <= 1.0

    paired = rng.normal(size=(64, 4))
    assert metrics.r_precision(paired, rng.normal(size=(64, 4)), k=32, pool=32) == 1.0

    grid_data = rng.integers(0, 256, size=(6, 4, 3)).astype(np.float32) / 256.0
    m1 = MotionSequence(data=grid_data, fps=20.0)
    m2 = MotionSequence(data=grid_data + 2.0, fps=20.0)
    assert np.array_equal(metrics.geometric_features(m1), metrics.geometric_features(m2))


@criterion(7, "rig selection hand cases and brute-force agreement", 5.0)
def test_criterion_7_rig_selection():
    g = RiggedCandidate(points=np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 2.0]]), weights=np.ones((3, 1)), id="c")
    from mmk.rigging import Centroid, centroid, passes_stage1, weight_sum_deviation

    got = centroid(g)
    assert (got.x, got.y, got.z) == pytest.approx((0.0, 0.0, 2 / 3))
    assert passes_stage1(Centroid(0.0, 0.0, 0.5))
    assert not passes_stage1(Centroid(0.0, 0.0, -0.5))
    assert not passes_stage1(Centroid(0.5, 0.0, 0.5), eps_lateral=0.1)
    s, delta = weight_sum_deviation(
        RiggedCandidate(points=np.zeros((2, 3)) + [0, 0, 0.5], weights=np.array([[0.8], [1.4]]), id="w")
    )
    assert (s, delta) == pytest.approx((1.1, 0.1))

    # reported mean-weight-sum ladder: 1.93 / 1.78 / 1.36 / 1.06 -> pick 1.06
    cands = [
        RiggedCandidate(points=np.array([[0.0, 0.0, 0.5]]), weights=np.array([[s]]), id=f"cand-{i}")
        for i, s in enumerate([1.93, 1.78, 1.36, 1.06])
    ]
    chosen, _ = select_optimal(cands)
    assert chosen == "cand-3"

    rng = np.random.default_rng(3)
    for _ in range(500):
        n = int(rng.integers(1, 7))
        cands = []
        for i in range(n):
            pts = rng.uniform(-1.5, 1.5, size=(int(rng.integers(1, 6)), 3))
            wts = rng.uniform(0.0, 1.2, size=(pts.shape[0], int(rng.integers(1, 4))))
            cands.append(RiggedCandidate(points=pts, weights=wts, id=f"c{i}"))
        chosen, _ = select_optimal(cands, eps_lateral=0.4)
        best, best_delta = None, None
        for c in cands:
            mean = c.points.mean(axis=0)
            ok = all(-1 < v < 1 for v in mean) and abs(mean[0]) <= 0.4 and abs(mean[1]) <= 0.4 and mean[2] > 0
            if not ok:
                continue
            delta = abs(c.weights.sum(axis=1).mean() - 1.0)
            if best_delta is None or delta < best_delta:
                best, best_delta = c.id, delta
        assert chosen == best


@criterion(8, "pack formats survive write-read-write byte-identically", 5.0)
def test_criterion_8_round_trips(tmp_path):
    records = synth_corpus(3, 6)
    p1, p2 = str(tmp_path / "c1.mpk"), str(tmp_path / "c2.mpk")
    write_corpus(records, p1)
    write_corpus(load_corpus(p1), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()

    tok, _ = train_tokenizer(records, TokenizerConfig(seed=1), VqTrainConfig(steps=10, seed=1))
    t1, t2 = str(tmp_path / "a.tkz"), str(tmp_path / "b.tkz")
    save_tokenizer(tok, t1)
    save_tokenizer(load_tokenizer(t1), t2)
    assert open(t1, "rb").read() == open(t2, "rb").read()

    gen = GeneratorModel(GeneratorConfig(d_model=16, ff=24, codebook=8, text_dim=32, audio_dim=8, spatial=4, seed=1))
    g1, g2 = str(tmp_path / "a.gen"), str(tmp_path / "b.gen")
    save_generator(gen, g1)
    save_generator(load_generator(g1), g2)
    assert open(g1, "rb").read() == open(g2, "rb").read()

    cand = RiggedCandidate(
        points=np.random.default_rng(4).normal(size=(7, 3)),
        weights=np.random.default_rng(5).uniform(0, 1, size=(7, 3)),
        id="rt",
    )
    r1, r2 = str(tmp_path / "a.rig"), str(tmp_path / "b.rig")
    write_candidate(cand, r1)
    write_candidate(load_candidate(r1), r2)
    assert open(r1, "rb").read() == open(r2, "rb").read()
