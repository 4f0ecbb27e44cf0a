"""Joint training: a MixMatch update, then supervised + inpainting + flow.

Every iteration draws one labeled and one unlabeled batch and runs

1. label guessing on the unlabeled batch (evaluation mode, no gradient),
2. the semi-supervised step on the mixed batches (backbone only),
3. the joint step: D on real vs. detached fake patches, C on real patches,
   then backbone + G + flow head on ``L_Sup + L_G + lambda_f * L_F`` with D
   and C frozen.

Half of the labeled batch stays intact (plain ``L_Sup`` and ``L_F``); the
other half and the whole unlabeled batch get one random AU cropped out and
feed the inpainting branch. Supervision skips the cropped AU.
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import Backbone
from .config import Config, ModelConfig
from .data.dataset import Batch, Sample, batch_iterator
from .data.landmarks import AURuleTable
from .metrics import f1_per_au, predict_samples
from .mixmatch import guess_labels, mixmatch, semi_loss
from .ofe import FlowHead, flow_loss, pool_flow
from .roii import (EPS, Generator, PatchCritic, adversarial_losses, bce, crop_random_au,
                   generator_loss, reconstruction_loss)

log = logging.getLogger(__name__)

LOG_KEYS = ("iter", "L_semi", "L_Sup", "L_D", "L_G", "L_C", "L_F", "L_rec", "L_total", "f1_avg", "f1_heldout")
# keeps the unlabeled stream independent of the labeled one
_UNLABELED_STREAM = 1_000_003


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; the message lists every component."""


class CheckpointError(RuntimeError):
    pass


_masked_warnings = 0


def masked_warning_count() -> int:
    return _masked_warnings


def masked_supervised_loss(probs: Tensor, labels: Tensor, mask: Tensor) -> Tensor:
    """Mean BCE over the entries where ``mask`` is 1; 0 if nothing is left."""
    global _masked_warnings
    mask = mask.to(probs.dtype)
    count = mask.sum()
    if count == 0:
        _masked_warnings += 1
        log.warning("masked supervised loss: every entry is masked")
        return probs.sum() * 0
    p = probs.clamp(EPS, 1 - EPS)
    y = labels.to(probs.dtype)
    per_entry = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    return (per_entry * mask).sum() / count


def joint_loss(l_sup, l_d, l_g, l_f, lambda_f: float = 0.2):
    return l_sup + l_d + l_g + lambda_f * l_f


class WSRTLModel(nn.Module):
    """Backbone plus the training-only heads (G, D, C, flow head)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.generator = Generator(cfg)
        self.discriminator = PatchCritic(cfg)
        self.classifier = PatchCritic(cfg)
        self.flow_head = FlowHead(self.backbone.trunk.channels[-1], cfg.scaled(cfg.flow_channels))

    def groups(self) -> dict[str, nn.Module]:
        return {"B": self.backbone, "G": self.generator, "D": self.discriminator,
                "C": self.classifier, "F": self.flow_head}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class StepReport:
    L_semi: float = 0.0
    L_Sup: float = 0.0
    L_D: float = 0.0
    L_G: float = 0.0
    L_C: float = 0.0
    L_F: float = 0.0
    L_rec: float = 0.0
    L_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


@dataclass
class _Cropped:
    images: np.ndarray
    patches: np.ndarray     # (K, 2, 3, s, s)
    au_index: np.ndarray    # (K,)
    y_hat: np.ndarray       # (K,)


def _crop_batch(images: np.ndarray, centers: np.ndarray, y: np.ndarray, size: int,
                rng: np.random.Generator) -> _Cropped:
    imgs, patches, aus, y_hat = [], [], [], []
    for img, c, lab in zip(images, centers, y):
        out = crop_random_au(img, c, rng, size)
        imgs.append(out.cropped_image)
        patches.append(out.patches)
        aus.append(out.au_index)
        y_hat.append(lab[out.au_index])
    return _Cropped(np.stack(imgs), np.stack(patches), np.array(aus), np.array(y_hat, np.float32))


Observer = Callable[[str, "Trainer"], None]


class Trainer:
    """Owns the model, one Adam optimizer per parameter group and the step logic."""

    def __init__(self, cfg: Config, model: WSRTLModel | None = None, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        torch.manual_seed(cfg.train.seed)
        self.model = (model or WSRTLModel(cfg.model)).to(dtype)
        self.dtype = dtype
        t = cfg.train
        self.optimizers = {
            name: torch.optim.Adam(module.parameters(), lr=t.lr, betas=tuple(t.betas))
            for name, module in self.model.groups().items()
        }
        self.iteration = 0

    @property
    def backbone(self) -> Backbone:
        return self.model.backbone

    def _tensor(self, x: np.ndarray) -> Tensor:
        return torch.from_numpy(np.ascontiguousarray(x)).to(self.dtype)

    def _step(self, names: Sequence[str], loss: Tensor, observer: Observer | None, event: str) -> None:
        for n in names:
            self.optimizers[n].zero_grad(set_to_none=True)
        loss.backward()
        for n in names:
            self.optimizers[n].step()
        if observer is not None:
            observer(event, self)

    def train_step(self, lb: Batch, ub: Batch | None, it: int | None = None,
                   observer: Observer | None = None) -> StepReport:
        t = self.cfg.train
        it = self.iteration if it is None else it
        rng = np.random.default_rng([t.seed, it])
        m = self.model
        m.train()
        rep = StepReport()
        centers_l = torch.from_numpy(lb.centers)
        labels_l = torch.from_numpy(lb.labels).to(self.dtype)
        images_l = self._tensor(lb.images)

        # label guessing and the semi-supervised step
        pseudo = None
        if ub is not None and (t.use_semi or t.use_roii):
            pseudo = guess_labels(m.backbone, self._tensor(ub.images), torch.from_numpy(ub.centers),
                                  t.temperature, t.guess_passes)
        if t.use_semi and ub is not None:
            mixed = mixmatch(images_l, labels_l, centers_l, self._tensor(ub.images), pseudo,
                             torch.from_numpy(ub.centers), t.mixup_alpha, rng)
            n_l = len(lb)
            out = m.backbone(torch.cat([mixed.l_images, mixed.u_images]),
                             torch.cat([mixed.l_centers, mixed.u_centers]))
            l_semi, _, _ = semi_loss(out.probs[:n_l], mixed.l_targets, out.probs[n_l:], mixed.u_targets,
                                     t.lambda_u)
            self._check({"L_semi": l_semi})
            self._step(["B"], l_semi, observer, "semi")
            rep.L_semi = l_semi.item()

        # joint step inputs
        n = len(lb)
        n_intact = n // 2 if t.use_roii else n
        images = [lb.images[:n_intact]]
        centers = [lb.centers[:n_intact]]
        mask = [np.ones((n_intact, lb.labels.shape[1]), np.float32)]
        crops: list[_Cropped] = []
        size = self.cfg.model.patch_size
        if t.use_roii:
            c = _crop_batch(lb.images[n_intact:], lb.centers[n_intact:], lb.labels[n_intact:], size, rng)
            crops.append(c)
            images.append(c.images)
            centers.append(lb.centers[n_intact:])
            mk = np.ones((n - n_intact, lb.labels.shape[1]), np.float32)
            mk[np.arange(len(mk)), c.au_index] = 0
            mask.append(mk)
            if ub is not None:
                hard = (pseudo.cpu().numpy() >= 0.5).astype(np.float32)
                cu = _crop_batch(ub.images, ub.centers, hard, size, rng)
                crops.append(cu)
                images.append(cu.images)
                centers.append(ub.centers)
        x = self._tensor(np.concatenate(images))
        out = m.backbone(x, torch.from_numpy(np.concatenate(centers)))
        l_sup = masked_supervised_loss(out.probs[:n], labels_l, self._tensor(np.concatenate(mask)))

        l_f = out.probs.sum() * 0
        if t.use_ofe:
            pred = m.flow_head(out.pyramid.stages[-1][:n_intact])
            target = pool_flow(self._tensor(lb.flow[:n_intact]), tuple(pred.shape[-2:]))
            l_f = flow_loss(pred, target, torch.from_numpy(lb.has_flow[:n_intact]))

        l_g = out.probs.sum() * 0
        if crops:
            aus = torch.from_numpy(np.concatenate([c.au_index for c in crops]))
            rows = torch.arange(n_intact, n_intact + len(aus))
            # both sides of the cropped AU, as independent samples sharing y_hat
            vec = torch.cat([out.left_decoded[rows, aus], out.right_decoded[rows, aus]])
            real = self._tensor(np.concatenate([np.concatenate([c.patches[:, 0] for c in crops]),
                                                np.concatenate([c.patches[:, 1] for c in crops])]))
            y_hat = self._tensor(np.concatenate([c.y_hat for c in crops])).repeat(2)
            fake = m.generator(vec)

            l_adv, _ = adversarial_losses(m.discriminator(real), m.discriminator(fake.detach()))
            l_d = -l_adv
            self._check({"L_D": l_d})
            self._step(["D"], l_d, observer, "D")
            l_c = bce(m.classifier(real), y_hat)
            self._check({"L_C": l_c})
            self._step(["C"], l_c, observer, "C")

            for p in (*m.discriminator.parameters(), *m.classifier.parameters()):
                p.requires_grad_(False)
            try:
                d_fake = m.discriminator(fake)
                _, l_adv_g = adversarial_losses(d_fake.detach(), d_fake)
                l_rec = reconstruction_loss(real, fake)
                l_c_g = bce(m.classifier(fake), y_hat)
                l_g = generator_loss(l_adv_g, l_rec, l_c_g, t.lambda1, t.lambda2)
            finally:
                for p in (*m.discriminator.parameters(), *m.classifier.parameters()):
                    p.requires_grad_(True)
            rep.L_D, rep.L_C, rep.L_rec = l_d.item(), l_c.item(), l_rec.item()

        total = l_sup + l_g + t.lambda_f * l_f
        self._check({"L_Sup": l_sup, "L_G": l_g, "L_F": l_f, "L_semi": rep.L_semi, "L_D": rep.L_D})
        self._step(["B", "G", "F"], total, observer, "joint")
        rep.L_Sup, rep.L_G, rep.L_F = l_sup.item(), l_g.item(), l_f.item()
        rep.L_total = float(joint_loss(rep.L_Sup, rep.L_D, rep.L_G, rep.L_F, t.lambda_f))
        self.iteration = it + 1
        return rep

    @staticmethod
    def _check(losses: dict) -> None:
        vals = {k: float(v.detach() if isinstance(v, Tensor) else v) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in vals.values()):
            dump = ", ".join(f"{k}={v!r}" for k, v in vals.items())
            raise TrainingDiverged(f"non-finite loss: {dump}")

    # ------------------------------------------------------------ checkpoints

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "model_hash": self.cfg.model_hash(),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.state_dict(), path)

    def load(self, path: str | Path) -> None:
        state = load_checkpoint(path, self.cfg)
        self.model.load_state_dict(state["model"])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.iteration = int(state["iteration"])


def save_checkpoint(state: dict, path: str | Path) -> None:
    """Atomic write: a temp file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        torch.save(state, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, cfg: Config | None = None) -> dict:
    """Load a checkpoint; with ``cfg`` the model section must match exactly."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if cfg is not None and state.get("model_hash") != cfg.model_hash():
        raise CheckpointError(f"checkpoint {path} was written for a different model config")
    return state


def load_backbone(path: str | Path, cfg: Config | None = None) -> tuple[Backbone, Config]:
    """Inference-only restore; the config comes from the checkpoint unless given."""
    from .config import from_dict
    state = load_checkpoint(path, cfg)
    cfg = cfg or from_dict(state["config"])
    backbone = Backbone(cfg.model)
    prefix = "backbone."
    backbone.load_state_dict({k[len(prefix):]: v for k, v in state["model"].items() if k.startswith(prefix)})
    backbone.eval()
    return backbone, cfg


# ------------------------------------------------------------------ fit


@dataclass
class FitResult:
    trainer: Trainer
    history: list[dict] = field(default_factory=list)
    stopped_at: int = 0
    reached_target: bool = False


def _labeled_f1(backbone: Backbone, samples: Sequence[Sample], table: AURuleTable) -> float | None:
    samples = [s for s in samples if s.labels is not None]
    if not samples:
        return None
    probs = predict_samples(backbone, samples, table)
    return f1_per_au(probs, np.stack([s.labels for s in samples]))[1]


def fit(cfg: Config, labeled: Sequence[Sample], unlabeled: Sequence[Sample], table: AURuleTable,
        out_dir: str | Path | None = None, heldout: Sequence[Sample] = (),
        trainer: Trainer | None = None, observer: Observer | None = None,
        progress: Callable[[dict], None] | None = None) -> FitResult:
    """Run (or resume) training.

    ``f1_avg`` is measured on the labeled training samples with center
    crops; ``f1_heldout`` on ``heldout``. Both are logged every
    ``eval_every`` iterations and at the end, ``null`` otherwise. With
    ``out_dir``, ``metrics.jsonl`` and ``checkpoint.pt`` are written there;
    an existing checkpoint is resumed.
    """
    t = cfg.train
    if not labeled:
        raise ValueError("training needs at least one labeled sample")
    for s in (*labeled, *unlabeled):
        s.check_n_aus(cfg.model.n_aus)
    trainer = trainer or Trainer(cfg)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = log_path = None
    history: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = out / "checkpoint.pt", out / "metrics.jsonl"
        if ckpt.exists():
            trainer.load(ckpt)
            if log_path.exists():
                history = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()]
                history = [h for h in history if h["iter"] < trainer.iteration]
        log_path.write_text("".join(json.dumps(h) + "\n" for h in history))
    start = trainer.iteration
    crop = cfg.model.input_size
    lstream = batch_iterator(labeled, t.batch_size, t.seed, t.augment, table, crop, start=start)
    ustream = None
    if unlabeled and (t.use_semi or t.use_roii):
        ustream = batch_iterator(unlabeled, t.batch_size, t.seed + _UNLABELED_STREAM, t.augment, table,
                                 crop, start=start)
    result = FitResult(trainer, history)
    it = start
    for it in range(start, t.iterations):
        rep = trainer.train_step(next(lstream), next(ustream) if ustream else None, it, observer)
        row = {"iter": it, **{k: rep.as_dict()[k] for k in LOG_KEYS[1:-2]}, "f1_avg": None, "f1_heldout": None}
        last = it == t.iterations - 1
        if (it + 1) % t.eval_every == 0 or last:
            row["f1_avg"] = _labeled_f1(trainer.backbone, labeled, table)
            row["f1_heldout"] = _labeled_f1(trainer.backbone, heldout, table) if heldout else None
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if progress is not None:
            progress(row)
        done = t.target_f1 is not None and row["f1_avg"] is not None and row["f1_avg"] >= t.target_f1
        if ckpt is not None and ((it + 1) % t.checkpoint_every == 0 or last or done):
            trainer.save(ckpt)
        if done:
            result.reached_target = True
            break
    result.stopped_at = trainer.iteration
    return result
