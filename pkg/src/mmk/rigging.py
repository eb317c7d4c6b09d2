"""Two-stage selection of the best-rigged avatar candidate.

Stage 1 filters candidates whose point-cloud centroid sits in a plausible
upright pose: inside the unit bounding box, laterally centered within
eps_lateral, and above the ground plane. Stage 2 scores survivors by how far
their mean per-vertex skinning-weight sum deviates from the ideal value of 1
and picks the argmin (ties to the earliest candidate).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .packio import PackFormatError, floats_from_bytes, floats_to_bytes, read_envelope, write_envelope

RIG_MAGIC = b"RIG1"
DEFAULT_EPS_LATERAL = 0.1


@dataclass(frozen=True)
class RiggedCandidate:
    points: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N, n_joints), non-negative
    id: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        wts = np.asarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (N >= 1, 3), got shape {pts.shape}")
        if wts.ndim != 2 or wts.shape[0] != pts.shape[0] or wts.shape[1] < 1:
            raise ValueError(f"weights must be (N, n_joints >= 1), got shape {wts.shape}")
        if not (np.isfinite(pts).all() and np.isfinite(wts).all()):
            raise ValueError("points/weights contain non-finite values")
        if (wts < 0).any():
            raise ValueError("weights must be non-negative")
        pts.flags.writeable = False
        wts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)


@dataclass(frozen=True)
class Centroid:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.z])):
            raise ValueError("centroid coordinates must be finite")


def centroid(c: RiggedCandidate) -> Centroid:
    """Componentwise mean of the point cloud (approximate center of mass)."""
    mean = c.points.mean(axis=0)
    return Centroid(x=float(mean[0]), y=float(mean[1]), z=float(mean[2]))


def passes_stage1(g: Centroid, eps_lateral: float = DEFAULT_EPS_LATERAL) -> bool:
    """Bounding box -1 < x, y, z < 1, lateral balance |x|, |y| <= eps_lateral,
    and an above-ground centroid z > 0."""
    if not eps_lateral > 0:
        raise ValueError("eps_lateral must be positive")
    in_box = -1.0 < g.x < 1.0 and -1.0 < g.y < 1.0 and -1.0 < g.z < 1.0
    return in_box and abs(g.x) <= eps_lateral and abs(g.y) <= eps_lateral and g.z > 0.0


def stage1_reasons(g: Centroid, eps_lateral: float = DEFAULT_EPS_LATERAL) -> list[str]:
    reasons = []
    if not (-1.0 < g.x < 1.0 and -1.0 < g.y < 1.0 and -1.0 < g.z < 1.0):
        reasons.append("centroid outside unit bounding box")
    if abs(g.x) > eps_lateral or abs(g.y) > eps_lateral:
        reasons.append(f"lateral offset exceeds {eps_lateral}")
    if not g.z > 0.0:
        reasons.append("centroid not above ground plane")
    return reasons


def weight_sum_deviation(c: RiggedCandidate) -> tuple[float, float]:
    """S = mean over vertices of per-vertex weight sums; delta = |S - 1|."""
    s = float(c.weights.sum(axis=1).mean())
    return s, abs(s - 1.0)


def select_optimal(cands: list[RiggedCandidate], eps_lateral: float = DEFAULT_EPS_LATERAL) -> tuple[str | None, dict]:
    """Stage-1 filter then argmin |S - 1| over survivors (ties to the earliest
    candidate). Returns (chosen id or None, per-candidate report)."""
    if not cands:
        raise ValueError("candidate list is empty")
    report = []
    best_id = None
    best_delta = None
    for cand in cands:
        g = centroid(cand)
        ok = passes_stage1(g, eps_lateral)
        s, delta = weight_sum_deviation(cand)
        report.append(
            {
                "id": cand.id,
                "centroid": [g.x, g.y, g.z],
                "stage1": ok,
                "reasons": [] if ok else stage1_reasons(g, eps_lateral),
                "S": s,
                "delta": delta,
            }
        )
        if ok and (best_delta is None or delta < best_delta):
            best_id = cand.id
            best_delta = delta
    return best_id, {"chosen": best_id, "eps_lateral": eps_lateral, "candidates": report}


# ---------------------------------------------------------------------------
# RIG1 candidate files
# ---------------------------------------------------------------------------


def write_candidate(c: RiggedCandidate, path: str) -> None:
    header = {"version": 1, "id": c.id, "N": int(c.points.shape[0]), "n_joints": int(c.weights.shape[1])}
    payload = floats_to_bytes(c.points) + floats_to_bytes(c.weights)
    write_envelope(path, RIG_MAGIC, header, payload)


def load_candidate(path: str) -> RiggedCandidate:
    header, payload, payload_base = read_envelope(path, RIG_MAGIC)
    try:
        n, nj = int(header["N"]), int(header["n_joints"])
        pts, offset = floats_from_bytes(payload, 0, n * 3)
        wts, offset = floats_from_bytes(payload, offset, n * nj)
        if offset != len(payload):
            raise PackFormatError(f"{len(payload) - offset} trailing payload bytes")
        return RiggedCandidate(points=pts.reshape(n, 3), weights=wts.reshape(n, nj), id=str(header["id"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise PackFormatError(f"{path}: candidate at byte offset {payload_base}: {exc}") from exc


def load_candidate_dir(directory: str) -> list[RiggedCandidate]:
    """All *.rig files in a directory, in sorted filename order."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".rig"))
    if not names:
        raise PackFormatError(f"no .rig candidates found in {directory}")
    return [load_candidate(os.path.join(directory, n)) for n in names]
