"""Similarity-transform face alignment."""
from __future__ import annotations

import cv2
import numpy as np


def estimate_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity (scale, rotation, translation) mapping src onto dst.

    Closed-form Umeyama solution without reflections. Returns a 2x3 matrix
    ``M`` with ``dst ~= src @ M[:, :2].T + M[:, 2]``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src and dst must both be (K, 2) arrays")
    if src.shape[0] < 2:
        raise ValueError("need at least two landmark correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    s0, d0 = src - mu_s, dst - mu_d
    var_s = (s0 ** 2).sum() / len(src)
    if var_s < 1e-12:
        raise ValueError("degenerate landmarks: all points coincide")
    cov = d0.T @ s0 / len(src)
    u, sig, vt = np.linalg.svd(cov)
    fix = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[1, 1] = -1
    rot = u @ fix @ vt
    scale = (sig * np.diag(fix)).sum() / var_s
    m = np.empty((2, 3))
    m[:, :2] = scale * rot
    m[:, 2] = mu_d - scale * rot @ mu_s
    return m


def transform_points(points: np.ndarray, m: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ m[:, :2].T + m[:, 2]


def warp_image(image: np.ndarray, m: np.ndarray, size: int) -> np.ndarray:
    """Apply a 2x3 transform and sample a ``size x size`` output (bilinear)."""
    out = cv2.warpAffine(np.ascontiguousarray(image, dtype=np.float32), m.astype(np.float64), (size, size),
                         flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return out.reshape((size, size) + image.shape[2:])


def align_face(image: np.ndarray, landmarks: np.ndarray, reference_landmarks: np.ndarray,
               size: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``image`` so its landmarks land on ``reference_landmarks``.

    Returns the ``size x size`` aligned image and the 2x3 transform.
    """
    m = estimate_similarity(landmarks, reference_landmarks)
    return warp_image(image, m, size), m


def align_frame_pair(frame_a: np.ndarray, frame_b: np.ndarray, landmarks_a: np.ndarray,
                     reference_landmarks: np.ndarray, size: int = 200):
    """Align frame t by its landmarks and frame t+step with that same transform."""
    aligned_a, m = align_face(frame_a, landmarks_a, reference_landmarks, size)
    return aligned_a, warp_image(frame_b, m, size), m
