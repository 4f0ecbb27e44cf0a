"""AU rule tables and AU-center computation from facial landmarks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class AURule:
    left_anchor: int
    right_anchor: int
    # offset from the anchor as a fraction of the image side; the x part is
    # mirrored for the right anchor
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass
class AURuleTable:
    rules: list[AURule]
    n_landmarks: int
    roi_image_size: int = 48
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for i, rule in enumerate(self.rules):
            for idx in (rule.left_anchor, rule.right_anchor):
                if not 0 <= idx < self.n_landmarks:
                    raise ValueError(f"AU {i}: anchor {idx} outside landmark scheme of {self.n_landmarks}")
        if not self.names:
            self.names = [f"AU{i}" for i in range(len(self.rules))]

    @property
    def n_aus(self) -> int:
        return len(self.rules)

    @classmethod
    def load(cls, path: str | Path) -> "AURuleTable":
        data = json.loads(Path(path).read_text())
        rules = [AURule(r["left"], r["right"], tuple(r.get("offset", (0.0, 0.0)))) for r in data["rules"]]
        return cls(rules, data["n_landmarks"], data.get("roi_image_size", 48), data.get("names", []))

    def save(self, path: str | Path) -> None:
        data = {
            "n_landmarks": self.n_landmarks,
            "roi_image_size": self.roi_image_size,
            "names": self.names,
            "rules": [{"left": r.left_anchor, "right": r.right_anchor, "offset": list(r.offset)} for r in self.rules],
        }
        Path(path).write_text(json.dumps(data, indent=2))


def synthetic_layout(n_aus: int) -> np.ndarray:
    """Fractional left-side AU positions for the synthetic face, ``(N, 2)``.

    Two columns on the left half of the face; rows spread over [0.22, 0.78].
    """
    rows = (n_aus + 1) // 2
    ys = np.linspace(0.22, 0.78, rows) if rows > 1 else np.array([0.5])
    pos = [(0.18 if i % 2 == 0 else 0.40, ys[i // 2]) for i in range(n_aus)]
    return np.array(pos)


def fractional_to_pixels(frac: np.ndarray, size: int) -> np.ndarray:
    return np.rint(np.asarray(frac) * (size - 1)).astype(np.int64)


def synthetic_landmarks(n_aus: int, size: int) -> np.ndarray:
    """Canonical landmarks of the synthetic scheme: N left points then N mirrored right points."""
    left = fractional_to_pixels(synthetic_layout(n_aus), size)
    right = left.copy()
    right[:, 0] = size - 1 - left[:, 0]
    return np.concatenate([left, right]).astype(np.float64)


def synthetic_rule_table(n_aus: int, roi_image_size: int = 48) -> AURuleTable:
    rules = [AURule(i, n_aus + i) for i in range(n_aus)]
    return AURuleTable(rules, 2 * n_aus, roi_image_size)


def compute_au_centers(landmarks: np.ndarray, table: AURuleTable, image_shape: tuple[int, int]) -> np.ndarray:
    """Integer AU centers, ``(N, 2, 2)`` indexed ``[au, side, (x, y)]``.

    Centers are clamped so the ``roi_image_size`` box around each stays
    inside the image.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (table.n_landmarks, 2):
        raise ValueError(f"expected {table.n_landmarks} landmarks, got {landmarks.shape[0]}")
    h, w = image_shape
    s = table.roi_image_size
    if s > h or s > w:
        raise ValueError(f"a {s}x{s} RoI cannot fit in a {w}x{h} image")
    centers = np.empty((table.n_aus, 2, 2), dtype=np.int64)
    for i, rule in enumerate(table.rules):
        dx, dy = rule.offset
        for side, (anchor, sx) in enumerate(((rule.left_anchor, 1.0), (rule.right_anchor, -1.0))):
            x, y = landmarks[anchor]
            centers[i, side] = np.rint([x + sx * dx * w, y + dy * h])
    half = s // 2
    centers[..., 0] = centers[..., 0].clip(half, w - s + half)
    centers[..., 1] = centers[..., 1].clip(half, h - s + half)
    return centers


def read_landmarks(path: str | Path) -> np.ndarray:
    """Plain text, one ``x y`` pair per line."""
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns")
    return pts


def write_landmarks(path: str | Path, landmarks: np.ndarray) -> None:
    np.savetxt(path, np.asarray(landmarks), fmt="%.4f")
