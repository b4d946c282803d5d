"""Evaluation metrics: per-joint/vertex position errors and rotation error.

All positions are (n, 3) arrays in meters; rotation inputs may be matrices
or Rotation instances.  Every metric returns a plain float.
"""

from __future__ import annotations

import numpy as np

from .numerics import Rotation, procrustes_align


def _points(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be (n, 3)")
    return a


def _matrices(rotations) -> np.ndarray:
    mats = [r.matrix if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)
            for r in rotations]
    out = np.stack(mats)
    if out.shape[1:] != (3, 3):
        raise ValueError("rotations must be 3x3")
    return out


def mpjpe(pred_joints, true_joints) -> float:
    """Mean Euclidean distance between matching joints, in meters."""
    p = _points(pred_joints, "pred_joints")
    t = _points(true_joints, "true_joints")
    if p.shape != t.shape:
        raise ValueError("joint sets must match in shape")
    return float(np.linalg.norm(p - t, axis=1).mean())


def pa_mpjpe(pred_joints, true_joints) -> float:
    """Joint error after the best similarity alignment of the prediction.

    Removes global scale, rotation, and translation, so only the pose shape
    is scored.
    """
    p = _points(pred_joints, "pred_joints")
    t = _points(true_joints, "true_joints")
    scale, rot, shift = procrustes_align(p, t)
    aligned = scale * p @ rot.matrix + shift
    return mpjpe(aligned, t)


def mpve(pred_vertices, true_vertices) -> float:
    """Mean Euclidean distance between matching mesh vertices, in meters."""
    return mpjpe(_points(pred_vertices, "pred_vertices"),
                 _points(true_vertices, "true_vertices"))


def mpre(pred_rotations, true_rotations) -> float:
    """Mean geodesic angle between matching rotations, in degrees.

    The relative angle comes from the trace identity
    cos(theta) = (tr(R_true @ R_pred^T) - 1) / 2, clamped against roundoff.
    """
    p = _matrices(pred_rotations)
    t = _matrices(true_rotations)
    if p.shape != t.shape:
        raise ValueError("rotation lists must match in length")
    rel = np.einsum("nij,nkj->nik", t, p)  # R_true @ R_pred^T
    traces = np.einsum("nii->n", rel)
    cos = np.clip((traces - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())
