"""Samples, JSON-lines manifests and the seeded batch stream."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .alignment import align_face, transform_points, warp_image
from .flow import read_flow, write_flow
from .landmarks import AURuleTable, compute_au_centers, read_landmarks, write_landmarks


@dataclass
class Sample:
    image: np.ndarray                 # H x W x 3, float32 in [0, 1]
    landmarks: np.ndarray             # K x 2 pixel coordinates
    subject_id: str
    labels: np.ndarray | None = None  # N-vector of {0, 1}
    flow_gt: np.ndarray | None = None  # H x W x 2 pixel displacements
    is_labeled: bool = True
    next_image: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.image.shape[:2]
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.ndim != 2 or lm.shape[1] != 2:
            raise ValueError("landmarks must be K x 2")
        if np.any(lm < 0) or np.any(lm[:, 0] > w - 1) or np.any(lm[:, 1] > h - 1):
            raise ValueError(f"landmarks of {self.subject_id} fall outside the image")
        self.landmarks = lm
        if self.flow_gt is not None and self.flow_gt.shape != (h, w, 2):
            raise ValueError("flow_gt must match the image size")
        if self.is_labeled and self.labels is None:
            raise ValueError("a labeled sample needs labels")

    def check_n_aus(self, n_aus: int) -> None:
        if self.labels is not None and len(self.labels) != n_aus:
            raise ValueError(f"sample of {self.subject_id} has {len(self.labels)} labels, expected {n_aus}")


@dataclass
class Batch:
    images: np.ndarray        # B x 3 x S x S float32
    centers: np.ndarray       # B x N x 2 x 2 int64, [au, side, (x, y)]
    labels: np.ndarray        # B x N float32 (zeros where unlabeled)
    labeled: np.ndarray       # B bool
    flow: np.ndarray          # B x 2 x S x S float32 (zeros where missing)
    has_flow: np.ndarray      # B bool
    indices: np.ndarray       # B int64, positions in the source dataset
    flipped: np.ndarray       # B bool

    def __len__(self) -> int:
        return len(self.indices)


def prepare_sample(sample: Sample, table: AURuleTable, crop: int, offset: tuple[int, int], flip: bool):
    """Crop (and optionally mirror) one sample; returns image, centers, flow."""
    ox, oy = offset
    img = sample.image[oy:oy + crop, ox:ox + crop]
    lm = sample.landmarks - (ox, oy)
    flow = None if sample.flow_gt is None else sample.flow_gt[oy:oy + crop, ox:ox + crop]
    lm[:, 0] = lm[:, 0].clip(0, crop - 1)
    lm[:, 1] = lm[:, 1].clip(0, crop - 1)
    centers = compute_au_centers(lm, table, (crop, crop))
    if flip:
        img = img[:, ::-1]
        # mirror x and swap sides: the "left" anchor now sits on the image right
        centers = centers[:, ::-1].copy()
        centers[..., 0] = crop - 1 - centers[..., 0]
        if flow is not None:
            flow = flow[:, ::-1].copy()
            flow[..., 0] *= -1
    return np.ascontiguousarray(img), centers, flow


def collate(samples: Sequence[Sample], indices: Sequence[int], table: AURuleTable, crop: int,
            rng: np.random.Generator | None = None) -> Batch:
    imgs, centers, labels, labeled, flows, has_flow, flips = [], [], [], [], [], [], []
    for idx in indices:
        s = samples[idx]
        h, w = s.image.shape[:2]
        if rng is None:
            offset, flip = ((w - crop) // 2, (h - crop) // 2), False
        else:
            offset = (int(rng.integers(0, w - crop + 1)), int(rng.integers(0, h - crop + 1)))
            flip = bool(rng.random() < 0.5)
        img, c, flow = prepare_sample(s, table, crop, offset, flip)
        imgs.append(img.transpose(2, 0, 1))
        centers.append(c)
        use_labels = s.is_labeled and s.labels is not None
        labels.append(s.labels if use_labels else np.zeros(table.n_aus))
        labeled.append(use_labels)
        flows.append(np.zeros((2, crop, crop), np.float32) if flow is None else flow.transpose(2, 0, 1))
        has_flow.append(flow is not None)
        flips.append(flip)
    return Batch(
        images=np.stack(imgs).astype(np.float32),
        centers=np.stack(centers).astype(np.int64),
        labels=np.stack(labels).astype(np.float32),
        labeled=np.array(labeled),
        flow=np.stack(flows).astype(np.float32),
        has_flow=np.array(has_flow),
        indices=np.asarray(indices, dtype=np.int64),
        flipped=np.array(flips),
    )


def batch_iterator(samples: Sequence[Sample], batch_size: int, seed: int, augment: bool,
                   table: AURuleTable, crop: int = 192, epochs: int | None = None,
                   start: int = 0) -> Iterator[Batch]:
    """Seeded stream of batches; each epoch is a fresh permutation.

    The trailing partial batch of an epoch is dropped so every batch has
    exactly ``batch_size`` samples. ``epochs=None`` streams forever. Batch
    ``k`` depends only on ``(seed, k)``, so ``start=k`` resumes a stream.
    """
    if not samples:
        raise ValueError("cannot iterate over an empty dataset")
    if batch_size > len(samples):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(samples)}")
    per_epoch = len(samples) // batch_size
    k = start
    while epochs is None or k < epochs * per_epoch:
        epoch, pos = divmod(k, per_epoch)
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
        idx = order[pos * batch_size:(pos + 1) * batch_size]
        rng = np.random.default_rng([seed, epoch, pos, 1]) if augment else None
        yield collate(samples, idx, table, crop, rng)
        k += 1


def eval_batches(samples: Sequence[Sample], batch_size: int, table: AURuleTable,
                 crop: int = 192) -> Iterator[Batch]:
    """Center-cropped batches in dataset order, including the last partial one."""
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        yield collate(samples, idx, table, crop, None)


# ---------------------------------------------------------------- manifests


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _save_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def read_manifest(path: str | Path, n_aus: int | None = None, intensity_threshold: float | None = None,
                  reference_landmarks: np.ndarray | None = None, aligned_size: int = 200) -> list[Sample]:
    """Load samples from a JSON-lines manifest.

    Relative paths resolve against the manifest's directory. With
    ``intensity_threshold`` set, labels are intensities and become
    ``label > threshold``. With ``reference_landmarks`` every image (and its
    next frame, if any) is aligned with its own landmarks' transform.
    """
    path = Path(path)
    root = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            image = _load_image(root / rec["image_path"])
            if "landmarks" in rec:
                lm = np.asarray(rec["landmarks"], dtype=np.float64)
            else:
                lm = read_landmarks(root / rec["landmarks_path"])
            labels = rec.get("labels")
            if labels is not None:
                labels = np.asarray(labels, dtype=np.float64)
                if intensity_threshold is not None:
                    labels = labels > intensity_threshold
                labels = labels.astype(np.float32)
            flow = read_flow(root / rec["flow_path"]) if rec.get("flow_path") else None
            nxt = _load_image(root / rec["next_image_path"]) if rec.get("next_image_path") else None
        except (KeyError, OSError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if reference_landmarks is not None:
            image, m = align_face(image, lm, reference_landmarks, aligned_size)
            lm = transform_points(lm, m)
            if nxt is not None:
                nxt = warp_image(nxt, m, aligned_size)
            lm = lm.clip(0, aligned_size - 1)
        is_labeled = rec.get("is_labeled", labels is not None)
        s = Sample(image, lm, str(rec["subject_id"]), labels, flow, bool(is_labeled), nxt)
        if n_aus is not None:
            s.check_n_aus(n_aus)
        samples.append(s)
    return samples


def write_manifest(samples: Sequence[Sample], directory: str | Path, name: str = "manifest.jsonl") -> Path:
    """Write images (PNG), landmarks (text) and flows (WFLO) plus the manifest."""
    directory = Path(directory)
    for sub in ("images", "landmarks", "flow"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        stem = f"{s.subject_id}_{i:05d}"
        rec: dict = {"image_path": f"images/{stem}.png", "landmarks_path": f"landmarks/{stem}.txt",
                     "subject_id": s.subject_id, "is_labeled": s.is_labeled}
        _save_image(directory / rec["image_path"], s.image)
        write_landmarks(directory / rec["landmarks_path"], s.landmarks)
        if s.labels is not None:
            rec["labels"] = [int(x) for x in s.labels]
        if s.flow_gt is not None:
            rec["flow_path"] = f"flow/{stem}.wflo"
            write_flow(directory / rec["flow_path"], s.flow_gt)
        if s.next_image is not None:
            rec["next_image_path"] = f"images/{stem}_next.png"
            _save_image(directory / rec["next_image_path"], s.next_image)
        lines.append(json.dumps(rec, sort_keys=True))
    out = directory / name
    out.write_text("\n".join(lines) + "\n")
    return out
