"""Metrics, unsupervised part segmentation and latent-space applications."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from . import tensor as T
from .knn import nn_query
from .tensor import Tensor


def chamfer_l2(a, b):
    """Mean squared NN distance A->B plus B->A.

    Tensor inputs give a differentiable Tensor result (matches held fixed);
    arrays give a float.
    """
    av = a.values if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.values if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    ab, d_ab = nn_query(av, bv)
    ba, d_ba = nn_query(bv, av)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return float(d_ab.mean() + d_ba.mean())
    ref = a if isinstance(a, Tensor) else b
    at = a if isinstance(a, Tensor) else Tensor(av, dtype=ref.dtype)
    bt = b if isinstance(b, Tensor) else Tensor(bv, dtype=ref.dtype)
    fwd = T.square(at - T.gather_rows(bt, ab)).sum(axis=-1).mean()
    rev = T.square(bt - T.gather_rows(at, ba)).sum(axis=-1).mean()
    return fwd + rev


def epe(pred_deform, gt_deform) -> float:
    """Mean Euclidean norm of the per-point deformation error."""
    pred = np.asarray(pred_deform, dtype=np.float64)
    gt = np.asarray(gt_deform, dtype=np.float64)
    if pred.shape != gt.shape:
        raise T.ShapeError("epe", pred.shape, gt.shape)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def correspondence_accuracy(pred, gt, radius: float) -> float:
    """Fraction of points whose predicted position lies within ``radius`` of the GT position."""
    err = np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)
    return float(np.mean(err <= radius))


def bbox_diagonal(points) -> float:
    pts = np.asarray(points)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def track_keyframe(model, key_points, shape_code, key_pose, pose_code) -> np.ndarray:
    """Carry keyframe points to another frame: forward with the keyframe pose, backward with the target pose."""
    _, canon = model.forward_deform(key_points, shape_code, key_pose)
    _, posed = model.backward_deform(canon, shape_code, pose_code)
    return posed.values


# -- segmentation ---------------------------------------------------------------------


def kmeans_labels(features: np.ndarray, n_clusters: int, seed: int = 0, max_iter: int = 50) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if n_clusters > features.shape[0]:
        raise ValueError(f"n_clusters={n_clusters} exceeds {features.shape[0]} points")
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    return km.fit_predict(features).astype(np.int64)


def segment_parts(points, model, shape_code, pose_code, n_clusters: int = 7, seed: int = 0) -> np.ndarray:
    """Cluster first-EdgeConv-layer features into parts."""
    feats = model.first_layer_features(points, shape_code, pose_code)
    return kmeans_labels(feats, n_clusters, seed)


def purity(labels, truth) -> float:
    """Fraction of points whose cluster's majority GT label matches their own."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        members = truth[labels == c]
        hits += np.bincount(members).max()
    return hits / len(labels)


# -- latent applications -------------------------------------------------------------


def transfer(shape_code, pose_code, canonical_cloud, model) -> np.ndarray:
    """Decode a canonical cloud with a (possibly swapped) shape/pose code pair."""
    _, posed = model.backward_deform(canonical_cloud, shape_code, pose_code)
    return posed.values


def interpolate(code_a, code_b, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    a = np.asarray(code_a)
    b = np.asarray(code_b)
    return (1.0 - t) * a + t * b


def densify(canonical_cloud, model, shape_code, pose_code, target_n: int, n_per_pass: int, seed: int = 0) -> np.ndarray:
    """Decode ``target_n`` canonical samples in chunks of ``n_per_pass`` and concatenate.

    Samples are drawn without replacement when possible; chunks are formed in
    sample order so the output row ``i`` is the decoded sample ``i``.
    """
    cloud = np.asarray(canonical_cloud)
    rng = np.random.default_rng(seed)
    replace = target_n > cloud.shape[0]
    picks = rng.choice(cloud.shape[0], size=target_n, replace=replace)
    if target_n == cloud.shape[0] and not replace:
        picks = np.arange(target_n)
    chunks = []
    for start in range(0, target_n, n_per_pass):
        sel = picks[start : start + n_per_pass]
        if len(sel) <= model.cfg.k:
            # pad a too-small tail chunk with leading samples, keep only the real rows
            pad = picks[: model.cfg.k + 1 - len(sel)]
            out = transfer(shape_code, pose_code, cloud[np.concatenate([sel, pad])], model)[: len(sel)]
        else:
            out = transfer(shape_code, pose_code, cloud[sel], model)
        chunks.append(out)
    return np.concatenate(chunks, axis=0)


# -- reports --------------------------------------------------------------------------

REPORT_COLUMNS = ["sequence", "frame", "epe", "chamfer_l2", "corr_acc"]


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, sequence: int, frame: int, epe_value: float, chamfer: float, acc: float) -> None:
        self.rows.append({"sequence": sequence, "frame": frame, "epe": epe_value, "chamfer_l2": chamfer, "corr_acc": acc})

    def aggregate(self) -> dict:
        if not self.rows:
            return {"epe": float("nan"), "chamfer_l2": float("nan"), "corr_acc": float("nan")}
        return {key: float(np.mean([r[key] for r in self.rows])) for key in ("epe", "chamfer_l2", "corr_acc")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)
            writer.writerow({"sequence": "AGGREGATE", "frame": len(self.rows), **self.aggregate()})

    def summary(self) -> str:
        agg = self.aggregate()
        meta = " ".join(f"{k}={v}" for k, v in self.meta.items())
        return f"frames={len(self.rows)} EPE={agg['epe']:.5f} C-l2={agg['chamfer_l2']:.6f} acc={agg['corr_acc']:.3f} {meta}".rstrip()


def evaluate_sequence(report: MetricReport, sequence_id: int, clouds: list[np.ndarray], model, shape_code, pose_codes, radius: float | None = None) -> None:
    """Append per-frame metrics of one sequence, keyframe = first frame.

    ``clouds[f]`` row ``i`` must be the GT position of keyframe point ``i``.
    Frame 0 is evaluated too (its GT deformation is zero).
    """
    key = np.asarray(clouds[0])
    r = 0.05 * bbox_diagonal(key) if radius is None else radius
    for f, cloud in enumerate(clouds):
        pred = track_keyframe(model, key, shape_code, pose_codes[0], pose_codes[f]).astype(np.float64)
        gt = np.asarray(cloud, dtype=np.float64)
        report.add(sequence_id, f, epe(pred - key, gt - key), chamfer_l2(pred, gt), correspondence_accuracy(pred, gt, r))
