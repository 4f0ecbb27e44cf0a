"""Command-line entry point.

Every artifact-producing command writes into
``$WSRTL_OUTPUT_ROOT/<command>/<config-hash>-s<seed>[-<suffix>]``. Outputs
are assembled in a staging directory and moved into place only on success,
so a failed run leaves nothing behind. Exit codes: 0 success, 2 config or
usage error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .config import Config, ConfigError, apply_overrides, from_dict, load_config
from .data.dataset import Sample, collate, read_manifest, write_manifest
from .data.flow import extract_flow, read_flow, write_flow
from .data.landmarks import AURuleTable, read_landmarks
from .data.synthetic import generate_synthetic_dataset
from .metrics import evaluate, split_by_subject, subject_kfold
from .roii import crop_random_au, paste_patches
from .trainer import CheckpointError, TrainingDiverged, Trainer, fit, load_backbone, load_checkpoint
from .transformer import query_similarity
from .viz import save_flow_image, save_inpainting_grid, save_query_bank, save_similarity

OUTPUT_ENV = "WSRTL_OUTPUT_ROOT"
# fold assignment is fixed so changing the training seed keeps the split
SPLIT_SEED = 0

log = logging.getLogger("wsrtl")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@contextmanager
def staged_output(command: str, cfg: Config, suffix: str = "") -> Iterator[Path]:
    """Yield a staging dir; on success it replaces the final run directory."""
    name = f"{cfg.hash()}-s{cfg.train.seed}" + (f"-{suffix}" if suffix else "")
    final = output_root() / command / name
    final.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{name}.", dir=final.parent))
    try:
        meta = {"command": command, "config_hash": cfg.hash(), "seed": cfg.train.seed, "config": cfg.to_dict()}
        (stage / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(stage, final)
    print(final)


# ------------------------------------------------------------------- data


def load_samples(cfg: Config) -> tuple[list[Sample], AURuleTable]:
    d = cfg.data
    if d.manifest:
        table = AURuleTable.load(d.rule_table)
        if table.n_aus != cfg.model.n_aus:
            raise ConfigError(f"rule table has {table.n_aus} AUs, model.n_aus is {cfg.model.n_aus}")
        ref = read_landmarks(d.reference_landmarks) if d.reference_landmarks else None
        samples = read_manifest(d.manifest, cfg.model.n_aus, d.intensity_threshold, ref, d.aligned_size)
        return samples, table
    ds = generate_synthetic_dataset(cfg.synthetic, cfg.model.n_aus)
    return ds.samples, ds.rule_table


def split_samples(cfg: Config, samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """(train, held-out) for ``data.fold``; fold 0 trains on everyone."""
    if cfg.data.fold == 0:
        return list(samples), []
    folds = subject_kfold([s.subject_id for s in samples], cfg.data.k_folds, SPLIT_SEED)
    train, test = folds[cfg.data.fold - 1]
    return split_by_subject(samples, train), split_by_subject(samples, test)


# --------------------------------------------------------------- commands


def cmd_synth_data(cfg: Config, args) -> None:
    ds = generate_synthetic_dataset(cfg.synthetic, cfg.model.n_aus)
    with staged_output("synth-data", cfg) as out:
        write_manifest(ds.samples, out)
        ds.rule_table.save(out / "rule_table.json")


def cmd_extract_flow(cfg: Config, args) -> None:
    from PIL import Image

    def load(p):
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0

    if args.manifest:
        src = Path(args.manifest)
        with staged_output("extract-flow", cfg, src.stem) as out:
            (out / "flow").mkdir()
            lines = []
            for i, line in enumerate(l for l in src.read_text().splitlines() if l.strip()):
                rec = json.loads(line)
                for key in ("image_path", "landmarks_path", "next_image_path"):
                    if rec.get(key):
                        rec[key] = str((src.parent / rec[key]).resolve())
                if rec.get("next_image_path"):
                    flow = extract_flow(load(rec["image_path"]), load(rec["next_image_path"]))
                    rec["flow_path"] = f"flow/{i:05d}.wflo"
                    write_flow(out / rec["flow_path"], flow)
                lines.append(json.dumps(rec, sort_keys=True))
            (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        return
    if not (args.frame_a and args.frame_b):
        raise ConfigError("extract-flow needs FRAME_A FRAME_B or --manifest")
    with staged_output("extract-flow", cfg, Path(args.frame_a).stem) as out:
        flow = extract_flow(load(args.frame_a), load(args.frame_b))
        write_flow(out / "flow.wflo", flow)
        save_flow_image(out / "flow.png", flow.as_array())


def cmd_train(cfg: Config, args) -> None:
    samples, table = load_samples(cfg)
    train, heldout = split_samples(cfg, samples)
    labeled = [s for s in train if s.is_labeled]
    unlabeled = [s for s in train if not s.is_labeled]
    heldout = [s for s in heldout if s.labels is not None]
    with staged_output("train", cfg, f"fold{cfg.data.fold}") as out:
        table.save(out / "rule_table.json")
        split = {"train": sorted({s.subject_id for s in train}), "heldout": sorted({s.subject_id for s in heldout})}
        (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")

        def progress(row):
            if row["f1_avg"] is not None:
                log.info("iter %d  L_total %.4f  f1 %.3f", row["iter"], row["L_total"], row["f1_avg"])

        fit(cfg, labeled, unlabeled, table, out, heldout, progress=progress)


def _checkpoint_config(args) -> Config:
    state = load_checkpoint(args.checkpoint)
    cfg = from_dict(state["config"])
    # only data-side overrides make sense for a trained model
    overrides = list(args.set or [])
    bad = [o for o in overrides if not o.startswith("data.")]
    if bad:
        raise ConfigError(f"only data.* overrides apply to a checkpoint: {bad}")
    if getattr(args, "fold", None) is not None:
        overrides.append(f"data.fold={args.fold}")
    return apply_overrides(cfg, overrides)


def _eval_samples(cfg: Config) -> tuple[list[Sample], AURuleTable]:
    samples, table = load_samples(cfg)
    train, heldout = split_samples(cfg, samples)
    chosen = heldout if cfg.data.fold else train
    chosen = [s for s in chosen if s.labels is not None]
    if not chosen:
        raise ValueError("no labeled samples to evaluate")
    return chosen, table


def cmd_eval(cfg: Config, args) -> None:
    cfg = _checkpoint_config(args)
    backbone, _ = load_backbone(args.checkpoint, cfg)
    samples, table = _eval_samples(cfg)
    report = evaluate(backbone, samples, table)
    with staged_output("eval", cfg, f"fold{cfg.data.fold}") as out:
        report.write(out / "report.md", out / "report.csv")


def cmd_viz_flow(cfg: Config, args) -> None:
    if args.flows:
        with staged_output("viz-flow", cfg, "files") as out:
            for p in args.flows:
                save_flow_image(out / f"{Path(p).stem}.png", read_flow(p))
        return
    samples, table = load_samples(cfg) if not args.checkpoint else (None, None)
    head = None
    if args.checkpoint:
        cfg = _checkpoint_config(args)
        trainer = Trainer(cfg)
        trainer.load(args.checkpoint)
        trainer.model.eval()
        head = trainer.model
        samples, table = load_samples(cfg)
    chosen = [s for s in samples if s.flow_gt is not None][:args.count]
    if not chosen:
        raise ValueError("no samples carry flow")
    with staged_output("viz-flow", cfg, "model" if head is not None else "data") as out:
        batch = collate(chosen, range(len(chosen)), table, cfg.model.input_size)
        for i, s in enumerate(chosen):
            save_flow_image(out / f"sample{i:03d}_gt.png", batch.flow[i].transpose(1, 2, 0))
        if head is not None:
            with torch.no_grad():
                feats = head.backbone.features(torch.from_numpy(batch.images))
                pred = head.flow_head(feats.stages[-1]).numpy()
            for i in range(len(chosen)):
                save_flow_image(out / f"sample{i:03d}_pred.png", pred[i].transpose(1, 2, 0))


def cmd_viz_inpaint(cfg: Config, args) -> None:
    cfg = _checkpoint_config(args)
    trainer = Trainer(cfg)
    trainer.load(args.checkpoint)
    m = trainer.model.eval()
    samples, table = _eval_samples(cfg)
    chosen = samples[:args.count]
    batch = collate(chosen, range(len(chosen)), table, cfg.model.input_size)
    rng = np.random.default_rng(cfg.train.seed)
    outcomes = [crop_random_au(img, c, rng, cfg.model.patch_size) for img, c in zip(batch.images, batch.centers)]
    with torch.no_grad():
        x = torch.from_numpy(np.stack([o.cropped_image for o in outcomes]))
        res = m.backbone(x, torch.from_numpy(batch.centers))
        idx = torch.arange(len(outcomes))
        aus = torch.tensor([o.au_index for o in outcomes])
        left = m.generator(res.left_decoded[idx, aus]).numpy()
        right = m.generator(res.right_decoded[idx, aus]).numpy()
    recovered = [paste_patches(o, np.stack([left[i], right[i]])) for i, o in enumerate(outcomes)]
    hwc = lambda a: a.transpose(1, 2, 0)  # noqa: E731
    with staged_output("viz-inpaint", cfg) as out:
        save_inpainting_grid(out / "inpainting.png", [hwc(o.cropped_image) for o in outcomes],
                             [hwc(i) for i in batch.images], [hwc(r) for r in recovered])


def cmd_viz_similarity(cfg: Config, args) -> None:
    cfg = _checkpoint_config(args)
    backbone, _ = load_backbone(args.checkpoint, cfg)
    queries = backbone.transformer.queries.detach()
    sim = query_similarity(queries).numpy()
    names = [f"AU{i}" for i in range(cfg.model.n_aus)]
    if cfg.data.rule_table:
        names = list(AURuleTable.load(cfg.data.rule_table).names)
    with staged_output("viz-similarity", cfg) as out:
        save_similarity(out / "similarity.png", out / "similarity.csv", sim, names)
        save_query_bank(out / "queries.csv", queries.numpy())


COMMANDS = {
    "synth-data": cmd_synth_data,
    "extract-flow": cmd_extract_flow,
    "train": cmd_train,
    "eval": cmd_eval,
    "viz-flow": cmd_viz_flow,
    "viz-inpaint": cmd_viz_inpaint,
    "viz-similarity": cmd_viz_similarity,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="training seed (train.seed)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="wsrtl", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="write the synthetic dataset as a manifest")
    ef = sub.add_parser("extract-flow", parents=[common], help="TV-L1 flow for a frame pair or a manifest")
    ef.add_argument("frame_a", nargs="?")
    ef.add_argument("frame_b", nargs="?")
    ef.add_argument("--manifest")
    sub.add_parser("train", parents=[common], help="train and write checkpoint.pt + metrics.jsonl")
    for name, help_ in (("eval", "per-AU F1 report"), ("viz-inpaint", "cropped/original/recovered grid"),
                        ("viz-similarity", "AU-query cosine similarity heatmap + CSV")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--checkpoint", required=True)
        if name == "eval":
            sp.add_argument("--fold", type=int, help="1-based test fold (0 = every subject)")
        if name == "viz-inpaint":
            sp.add_argument("--count", type=int, default=4)
    vf = sub.add_parser("viz-flow", parents=[common], help="u|v grayscale flow images")
    vf.add_argument("flows", nargs="*", help="WFLO files; without them, dataset flows are drawn")
    vf.add_argument("--checkpoint", help="also draw the flow head's predictions")
    vf.add_argument("--count", type=int, default=4)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        needs_ckpt = args.command in ("eval", "viz-inpaint", "viz-similarity")
        cfg = load_config(args.config, [] if needs_ckpt else overrides)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDiverged, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
