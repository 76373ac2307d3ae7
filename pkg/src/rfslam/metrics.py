"""Tracking, visibility-detection, and map-recovery scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MapScore:
    mean_matched_distance: float
    matched: int
    unmatched_true: int
    unmatched_learned: int


@dataclass
class MetricsReport:
    rmse: float
    median_error: float
    visibility: list          # per station: dict(accuracy, precision, recall)
    map_scores: list | None   # per station MapScore, when a map was evaluated
    blocked_error_ratio: float | None

    def to_dict(self) -> dict:
        out = {"rmse": self.rmse, "median_error": self.median_error,
               "visibility": self.visibility,
               "blocked_error_ratio": self.blocked_error_ratio}
        if self.map_scores is not None:
            out["map"] = [asdict(s) for s in self.map_scores]
        return out


def position_rmse(truth_xy: np.ndarray, estimate_xy: np.ndarray):
    "Root-mean-square and median Euclidean position error."
    truth_xy = np.asarray(truth_xy, dtype=np.float64)
    estimate_xy = np.asarray(estimate_xy, dtype=np.float64)
    if truth_xy.shape != estimate_xy.shape:
        raise ValueError(f"track shapes differ: {truth_xy.shape} vs {estimate_xy.shape}")
    err = np.linalg.norm(truth_xy - estimate_xy, axis=1)
    return float(np.sqrt(np.mean(err ** 2))), float(np.median(err))


def visibility_scores(truth_flags: np.ndarray, p_vis: np.ndarray,
                      threshold: float = 0.5) -> list:
    "Per-station accuracy/precision/recall of the thresholded visibility."
    truth_flags = np.asarray(truth_flags)
    p_vis = np.asarray(p_vis)
    if truth_flags.shape != p_vis.shape:
        raise ValueError("flag/probability shapes differ")
    out = []
    for j in range(truth_flags.shape[1]):
        decided = (p_vis[:, j] >= threshold).astype(int)
        truth = truth_flags[:, j].astype(int)
        tp = int(np.sum((decided == 1) & (truth == 1)))
        tn = int(np.sum((decided == 0) & (truth == 0)))
        fp = int(np.sum((decided == 1) & (truth == 0)))
        fn = int(np.sum((decided == 0) & (truth == 1)))
        out.append({
            "accuracy": (tp + tn) / max(tp + tn + fp + fn, 1),
            "precision": tp / max(tp + fp, 1) if (tp + fp) else 1.0,
            "recall": tp / max(tp + fn, 1) if (tp + fn) else 1.0,
        })
    return out


def map_error(true_positions: np.ndarray, learned_positions: np.ndarray,
              learned_gammas: np.ndarray, radius: float = 2.0) -> MapScore:
    """Greedy nearest matching of learned features to true anchor positions.

    Learned features are visited in descending amplitude-variance order; each
    claims its nearest unmatched true anchor within the radius.
    """
    true_positions = np.asarray(true_positions, dtype=np.float64).reshape(-1, 2)
    learned_positions = np.asarray(learned_positions, dtype=np.float64).reshape(-1, 2)
    order = np.argsort(-np.asarray(learned_gammas, dtype=np.float64))
    free = np.ones(len(true_positions), dtype=bool)
    dists = []
    for i in order:
        if not free.any():
            break
        cand = np.where(free)[0]
        d = np.linalg.norm(true_positions[cand] - learned_positions[i], axis=1)
        best = np.argmin(d)
        if d[best] <= radius:
            dists.append(d[best])
            free[cand[best]] = False
    matched = len(dists)
    return MapScore(
        mean_matched_distance=float(np.mean(dists)) if dists else float("nan"),
        matched=matched,
        unmatched_true=int(free.sum()),
        unmatched_learned=len(learned_positions) - matched)


def blocked_error_ratio(truth_flags: np.ndarray, errors: np.ndarray) -> float | None:
    "Mean position error inside blocked windows over mean outside, any station."
    truth_flags = np.asarray(truth_flags)
    blocked = np.any(truth_flags == 0, axis=1)
    if not blocked.any() or blocked.all():
        return None
    return float(np.mean(errors[blocked]) / np.mean(errors[~blocked]))


def evaluate(truth_xy, estimate_xy, truth_flags, p_vis, true_anchors=None,
             learned_banks=None, match_radius: float = 2.0) -> MetricsReport:
    "Assemble the full report from tracks, flags, and (optionally) maps."
    rmse, med = position_rmse(truth_xy, estimate_xy)
    vis = visibility_scores(truth_flags, p_vis)
    map_scores = None
    if true_anchors is not None and learned_banks is not None:
        map_scores = [map_error(pos, bank.positions, bank.gammas, match_radius)
                      for (pos, _), bank in zip(true_anchors, learned_banks)]
    errors = np.linalg.norm(np.asarray(truth_xy) - np.asarray(estimate_xy), axis=1)
    return MetricsReport(rmse=rmse, median_error=med, visibility=vis,
                         map_scores=map_scores,
                         blocked_error_ratio=blocked_error_ratio(truth_flags, errors))
