"""Procedural faces with known AU regions and known motion.

Each subject is a shaded ellipse on a plain background. An active AU stamps
its own texture on both of its symmetric locations (the right stamp is the
mirror image of the left). AUs listed in ``motion`` move their stamps
between the frame pair, so the ground-truth flow is known exactly: the
stamp footprint carries ``(dx, dy)`` on the left and ``(-dx, dy)`` on the
right, everything else is zero.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..config import SyntheticConfig
from .dataset import Sample
from .landmarks import AURuleTable, synthetic_landmarks, synthetic_rule_table

STAMP = 20


@dataclass
class SubjectStyle:
    skin: np.ndarray
    background: np.ndarray
    radii: tuple[float, float]
    light: np.ndarray


@dataclass
class FramePair:
    frame_a: np.ndarray
    frame_b: np.ndarray
    flow: np.ndarray
    sample_index: int


@dataclass
class SyntheticDataset:
    labeled: list[Sample]
    unlabeled: list[Sample]
    pairs: list[FramePair]
    rule_table: AURuleTable

    @property
    def samples(self) -> list[Sample]:
        return self.labeled + self.unlabeled


def stamp_texture(au: int, size: int = STAMP) -> np.ndarray:
    """Texture mask in [0, 1] for AU ``au``; distinct per index."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = au % 6
    period = 4 + 2 * (au // 6)
    if kind == 0:
        m = (yy // (period / 2)) % 2
    elif kind == 1:
        m = (xx // (period / 2)) % 2
    elif kind == 2:
        m = ((xx // period) + (yy // period)) % 2
    elif kind == 3:
        m = ((xx + yy) // (period / 2)) % 2
    elif kind == 4:
        m = (((xx % period) - period / 2) ** 2 + ((yy % period) - period / 2) ** 2 < (period / 3) ** 2) * 1.0
    else:
        r = np.hypot(xx - size / 2 + 0.5, yy - size / 2 + 0.5)
        m = (r // (period / 2)) % 2
    return m


def au_color(au: int, n_aus: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(au / max(n_aus, 1), 0.8, 0.35))


def subject_style(rng: np.random.Generator) -> SubjectStyle:
    skin = np.array([0.85, 0.66, 0.55]) + rng.uniform(-0.08, 0.08, 3)
    background = np.full(3, rng.uniform(0.15, 0.35)) + rng.uniform(-0.05, 0.05, 3)
    radii = (0.40 * rng.uniform(0.95, 1.05), 0.47 * rng.uniform(0.95, 1.05))
    light = rng.uniform(-0.12, 0.12, 2)
    return SubjectStyle(skin.clip(0, 1), background.clip(0, 1), radii, light)


def render_face(style: SubjectStyle, size: int, shift: tuple[int, int] = (0, 0),
                noise: np.ndarray | None = None) -> np.ndarray:
    """Neutral face: no AU patterns."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = (size - 1) / 2 + shift[0], (size - 1) / 2 + shift[1]
    nx = (xx - cx) / (style.radii[0] * size)
    ny = (yy - cy) / (style.radii[1] * size)
    r = np.sqrt(nx ** 2 + ny ** 2)
    shade = 1.0 - 0.3 * r ** 2 + style.light[0] * nx + style.light[1] * ny
    inside = np.clip((1.0 - r) * 25.0, 0.0, 1.0)[..., None]
    face = style.skin * shade[..., None]
    img = inside * face + (1 - inside) * style.background
    if noise is not None:
        img = img + noise[..., None]
    return img


def _stamp_box(center: np.ndarray, right: bool) -> tuple[int, int]:
    """Top-left of a stamp; the right box mirrors the left one pixel-exactly."""
    x, y = int(center[0]), int(center[1])
    x0 = x - STAMP // 2 + 1 if right else x - STAMP // 2
    return x0, y - STAMP // 2


def draw_stamps(img: np.ndarray, labels: np.ndarray, centers: np.ndarray,
                displacement: dict[int, tuple[int, int]] | None = None) -> np.ndarray:
    """Stamp active AUs at ``centers`` (``(N, 2, 2)``), optionally displaced."""
    out = img.copy()
    n = len(labels)
    for au in np.flatnonzero(labels):
        tex = stamp_texture(int(au))
        color = au_color(int(au), n)
        dx, dy = (displacement or {}).get(int(au), (0, 0))
        for side in range(2):
            right = side == 1
            x0, y0 = _stamp_box(centers[au, side], right)
            x0 += -dx if right else dx
            y0 += dy
            m = (tex[:, ::-1] if right else tex)[..., None] * 0.85
            patch = out[y0:y0 + STAMP, x0:x0 + STAMP]
            out[y0:y0 + STAMP, x0:x0 + STAMP] = patch * (1 - m) + color * m
    return out


def stamp_flow(size: int, labels: np.ndarray, centers: np.ndarray,
               displacement: dict[int, tuple[int, int]]) -> np.ndarray:
    flow = np.zeros((size, size, 2), np.float32)
    for au, (dx, dy) in displacement.items():
        if au >= len(labels) or not labels[au]:
            continue
        for side in range(2):
            right = side == 1
            x0, y0 = _stamp_box(centers[au, side], right)
            flow[y0:y0 + STAMP, x0:x0 + STAMP] = (-dx if right else dx, dy)
    return flow


def sample_labels(cfg: SyntheticConfig, n_aus: int, rng: np.random.Generator) -> np.ndarray:
    p = cfg.positive_rate
    y = (rng.random(n_aus) < p).astype(np.float32)
    for a, b in cfg.cooccur_pairs:
        if max(a, b) >= n_aus:
            continue
        y[a] = float(rng.random() < p)
        # agreement 0.95 gives a phi coefficient of 0.9 at p = 0.5
        y[b] = y[a] if rng.random() < 0.95 else 1.0 - y[a]
    for a, b in cfg.exclusive_pairs:
        if max(a, b) >= n_aus:
            continue
        pick = rng.choice(3, p=[0.4, 0.4, 0.2])
        y[a], y[b] = float(pick == 0), float(pick == 1)
    if cfg.force_labels is not None:
        forced = np.asarray(cfg.force_labels, dtype=np.float32)
        y = np.broadcast_to(forced, (n_aus,)).copy()
    return y


def _quantize(img: np.ndarray) -> np.ndarray:
    # multiples of 1/255 survive a PNG round trip unchanged
    return (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def generate_synthetic_dataset(cfg: SyntheticConfig, n_aus: int, seed: int | None = None) -> SyntheticDataset:
    """Deterministic under ``seed`` (defaults to ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    size = cfg.image_size
    table = synthetic_rule_table(n_aus)
    base_lm = synthetic_landmarks(n_aus, size)
    motion = {int(k): (int(v[0]), int(v[1])) for k, v in cfg.motion.items() if int(k) < n_aus}
    labeled, unlabeled, pairs = [], [], []
    for s in range(cfg.n_subjects):
        style = subject_style(rng)
        n_unl = int(round(cfg.unlabeled_fraction * cfg.samples_per_subject))
        unl_idx = set(rng.permutation(cfg.samples_per_subject)[:n_unl].tolist())
        for j in range(cfg.samples_per_subject):
            shift = tuple(int(v) for v in rng.integers(-2, 3, 2))
            lm = base_lm + shift
            centers = np.stack([lm[:n_aus], lm[n_aus:]], axis=1).astype(np.int64)
            labels = sample_labels(cfg, n_aus, rng)
            noise = rng.normal(0, 0.015, (size, size))
            face = render_face(style, size, shift, noise)
            image = _quantize(draw_stamps(face, labels, centers))
            sid = f"S{s:02d}"
            if j in unl_idx:
                unlabeled.append(Sample(image, lm, sid, labels, None, is_labeled=False))
                continue
            nxt = _quantize(draw_stamps(face, labels, centers, motion))
            flow = stamp_flow(size, labels, centers, motion)
            labeled.append(Sample(image, lm, sid, labels, flow, True, nxt))
            pairs.append(FramePair(image, nxt, flow, len(labeled) - 1))
    return SyntheticDataset(labeled, unlabeled, pairs, table)
