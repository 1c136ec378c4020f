"""Operator surface: data generation, training, sampling, separation, evaluation.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error. Every
command validates its configuration fully before touching the filesystem, and
manifests are written via write-then-rename so interrupted runs never leave a
corrupt manifest behind.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import metrics as M
from .conditioning import HashTextEmbedder, make_prompt
from .config import RunConfig, load_run_config
from .diffusion import sample_batch
from .errors import ConfigError, HistodiffError
from .features import train_toy_classifier
from .instancing import watershed_separate
from .nn.denoiser import JointDenoiser
from .nn.optim import Adam
from .persistence import (
    check_same_arch,
    digest_of,
    load_checkpoint,
    read_json,
    read_tensor,
    write_json,
    write_tensor,
)
from .toydata import ToyDataset, generate_dataset
from .training import train
from .viz import sample_grid_png

DEFAULT_METRICS = ("dice", "mdice", "aji", "detection", "fsd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with code 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="histodiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="override dataset output directory")

    t = sub.add_parser("train", help="train the joint denoiser")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="override run output directory")
    t.add_argument("--resume", help="checkpoint directory to resume from")

    s = sub.add_parser("sample", help="sample triplets from a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--conditions", required=True,
                   help="dataset directory supplying point maps and prompts")
    s.add_argument("--out", required=True)
    s.add_argument("--omega", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--split", default="test")

    x = sub.add_parser("separate", help="instance-separate sampled triplets")
    x.add_argument("--in", dest="in_dir", required=True)
    x.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("prompt", help="print a templated prompt")
    r.add_argument("--tissue", required=True)
    r.add_argument("--cell-types", required=True, help="comma-separated names")
    r.add_argument("--stain")
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "dataset_dir": args.out})
    out_dir = cfg.resolve(cfg.dataset_dir)
    toy = cfg.gen.toy_config(seed=cfg.seed)
    manifest = generate_dataset(toy, cfg.gen.count, cfg.gen.split_fractions, out_dir)
    print(f"wrote {manifest['count']} samples to {out_dir} "
          f"(train={manifest['split_counts']['train']}, "
          f"test={manifest['split_counts']['test']})")
    return 0


def _branch_schedules(cfg: RunConfig):
    return cfg.schedule.build()


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "out_dir": args.out})
    dataset = ToyDataset(cfg.resolve(cfg.dataset_dir), split="train")
    if len(dataset) == 0:
        raise ConfigError("training split is empty")
    k = dataset.num_foreground_classes + 1
    model_cfg = cfg.model.denoiser_config(num_classes=k)
    schedules = _branch_schedules(cfg)
    out_dir = cfg.resolve(cfg.out_dir)
    os.makedirs(out_dir, exist_ok=True)

    if args.resume:
        model, optimizer, start_step, rng_state = load_checkpoint(args.resume)
        check_same_arch(model.config.as_dict(), model_cfg.as_dict())
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    else:
        rng = np.random.default_rng(cfg.seed)
        model = JointDenoiser(model_cfg, rng=rng)
        optimizer = Adam(model, lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1,
                         beta2=cfg.optimizer.beta2)
        start_step = 0

    write_json(os.path.join(out_dir, "run.json"), {
        "kind": "histodiff-run",
        "config": cfg.as_dict(),
        "config_digest": digest_of(cfg.as_dict()),
        "dataset_digest": dataset.manifest["config_digest"],
        "num_classes": k,
    })

    remaining = cfg.train_steps - start_step
    if remaining <= 0:
        print(f"nothing to do: checkpoint already at step {start_step}")
        return 0
    history = train(
        dataset.entries, model, optimizer, schedules, rng,
        steps=remaining,
        batch_size=cfg.batch_size,
        loss_weights=cfg.loss_weights,
        text_dropout=cfg.text_dropout,
        embedder=HashTextEmbedder(cfg.model.text_dim),
        start_step=start_step,
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=os.path.join(out_dir, "checkpoints"),
    )
    log_path = os.path.join(out_dir, "loss_log.csv")
    mode = "a" if (args.resume and os.path.exists(log_path)) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "total", "loss_image", "loss_distance", "loss_label"]
        )
        if mode == "w":
            writer.writeheader()
        for row in history:
            writer.writerow(row.as_dict())
    print(f"trained {len(history)} steps; final total loss "
          f"{history[-1].total:.4f}; checkpoints in {out_dir}/checkpoints")
    return 0


def cmd_sample(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    omega = cfg.omega if args.omega is None else float(args.omega)
    if not np.isfinite(omega):
        raise ConfigError(f"omega must be finite, got {omega!r}")
    conditions = ToyDataset(cfg.resolve(args.conditions), split=args.split or None)
    if len(conditions) == 0:
        raise ConfigError(f"no conditions in split {args.split!r}")
    count = min(args.count or cfg.sample_count, len(conditions))
    entries = conditions.entries[:count]

    model, _, _, _ = load_checkpoint(args.checkpoint)
    schedules = _branch_schedules(cfg)
    embedder = HashTextEmbedder(model.config.text_dim)
    rng = np.random.default_rng(cfg.seed)

    out_dir = cfg.resolve(args.out)
    os.makedirs(os.path.join(out_dir, "tensors"), exist_ok=True)
    records = []
    samples_all = []
    grids_all = []
    for lo in range(0, count, cfg.batch_size):
        chunk = entries[lo:lo + cfg.batch_size]
        grids = np.stack([e.point_map.grid for e in chunk])
        embs = np.stack([embedder.embed(e.prompt) for e in chunk]).astype(np.float32)
        samples = sample_batch(model, grids, embs, omega, schedules, rng)
        for e, s in zip(chunk, samples):
            name = f"synth_{e.sample_id}"
            paths = {}
            arrays = {
                "image": s.image, "distance": s.distance,
                "semantic": s.semantic, "points": e.point_map.grid,
            }
            for key, arr in arrays.items():
                rel = os.path.join("tensors", f"{name}_{key}.ncsd")
                write_tensor(os.path.join(out_dir, rel), arr)
                paths[key] = rel
            records.append({
                "id": name, "condition_id": e.sample_id, "prompt": e.prompt,
                "tissue": e.tissue, "tissue_index": e.tissue_index, "paths": paths,
            })
            samples_all.append(s)
            grids_all.append(e.point_map.grid)

    from .viz import LABEL_COLORS
    write_json(os.path.join(out_dir, "manifest.json"), {
        "kind": "histodiff-samples",
        "omega": omega,
        "seed": cfg.seed,
        "num_steps": schedules.num_steps,
        "checkpoint": os.path.abspath(args.checkpoint),
        "label_color_legend": {
            str(i): list(map(int, c)) for i, c in enumerate(LABEL_COLORS)
        },
        "samples": records,
    })
    sample_grid_png(samples_all, os.path.join(out_dir, "grid.png"), grids_all)
    print(f"sampled {count} triplets into {out_dir} (omega={omega})")
    return 0


def cmd_separate(args) -> int:
    manifest = read_json(os.path.join(args.in_dir, "manifest.json"))
    if manifest.get("kind") not in ("histodiff-samples", "histodiff-dataset"):
        raise ConfigError(f"{args.in_dir}: not a samples or dataset directory")
    os.makedirs(os.path.join(args.out, "tensors"), exist_ok=True)
    records = []
    for rec in manifest["samples"]:
        paths = rec["paths"]
        distance = read_tensor(os.path.join(args.in_dir, paths["distance"]))
        semantic = read_tensor(os.path.join(args.in_dir, paths["semantic"]))
        points = read_tensor(os.path.join(args.in_dir, paths["points"]))
        instances = watershed_separate(distance, semantic, points)
        out_paths = {}
        for key, arr in (("instance", instances), ("semantic", semantic)):
            rel = os.path.join("tensors", f"{rec['id']}_{key}.ncsd")
            write_tensor(os.path.join(args.out, rel), arr)
            out_paths[key] = rel
        records.append({"id": rec["id"], "paths": out_paths})
    write_json(os.path.join(args.out, "manifest.json"), {
        "kind": "histodiff-instances",
        "source": os.path.abspath(args.in_dir),
        "samples": records,
    })
    print(f"separated {len(records)} label maps into {args.out}")
    return 0


def _load_eval_arrays(root: str, needed: set[str]):
    manifest = read_json(os.path.join(root, "manifest.json"))
    out = []
    for rec in manifest["samples"]:
        arrays = {}
        for key in needed:
            if key not in rec["paths"]:
                raise ConfigError(
                    f"{root}: sample {rec['id']} has no {key!r} tensor "
                    f"(needed by the requested metrics)"
                )
            arrays[key] = read_tensor(os.path.join(root, rec["paths"][key]))
        arrays["id"] = rec["id"]
        arrays["tissue_index"] = rec.get("tissue_index", 0)
        out.append(arrays)
    return manifest, out


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    valid = {"dice", "mdice", "aji", "detection", "fsd", "fid", "is"}
    bad = set(wanted) - valid
    if bad:
        raise ConfigError(f"unknown metrics {sorted(bad)}; valid: {sorted(valid)}")

    needs_sem = {"dice", "detection", "fsd"} & set(wanted)
    needs_inst = {"mdice", "aji", "detection"} & set(wanted)
    needs_img = {"fid", "is"} & set(wanted)
    pred_keys = (({"semantic"} if needs_sem or "fsd" in wanted else set())
                 | ({"instance"} if needs_inst else set())
                 | ({"image"} if needs_img else set()))
    gt_keys = set(pred_keys)
    if "detection" in wanted:
        pred_keys.update({"semantic", "instance"})
        gt_keys.update({"semantic", "instance"})

    _, pred = _load_eval_arrays(args.pred, pred_keys)
    gt_manifest, gt = _load_eval_arrays(args.gt, gt_keys | ({"image"} if needs_img else set()))
    if len(pred) != len(gt):
        raise ConfigError(f"sample count mismatch: pred {len(pred)} vs gt {len(gt)}")

    num_fg = int(gt_manifest.get("config", {}).get("num_classes", 0)) or int(
        max(g["semantic"].max() for g in gt)
    )
    report = M.MetricsReport(
        sample_counts={"pred": len(pred), "gt": len(gt)},
        config_digest=digest_of({
            "metrics": wanted,
            "matching": "greedy one-to-one, jaccard > 0.5",
            "num_foreground_classes": num_fg,
        }),
    )

    if "dice" in wanted:
        report.values["dice"] = float(np.mean(
            [M.dice(p["semantic"], g["semantic"]) for p, g in zip(pred, gt)]
        ))
    if "mdice" in wanted:
        report.values["mdice"] = float(np.mean(
            [M.mdice(p["instance"], g["instance"]) for p, g in zip(pred, gt)]
        ))
    if "aji" in wanted:
        report.values["aji"] = float(np.mean(
            [M.aji(p["instance"], g["instance"]) for p, g in zip(pred, gt)]
        ))
    if "detection" in wanted:
        counts = M.merge_counts([
            M.detection_counts(p["instance"], p["semantic"], g["instance"],
                               g["semantic"], num_fg)
            for p, g in zip(pred, gt)
        ])
        scores = M.scores_from_counts(counts)
        report.values["f_d"] = scores.f_d
        report.values["acc"] = scores.acc
        for i, f in enumerate(scores.per_class_f, start=1):
            report.values[f"f_c{i}"] = float(f)
    if "fsd" in wanted:
        report.values["fsd"] = M.fsd(
            np.stack([g["semantic"] for g in gt]),
            np.stack([p["semantic"] for p in pred]),
            num_fg + 1,
        )
    if needs_img:
        rng = np.random.default_rng(args.seed)
        tissues = [g["tissue_index"] for g in gt]
        n_tissue = max(tissues) + 1
        clf = train_toy_classifier(
            np.stack([g["image"] for g in gt]), np.array(tissues),
            max(n_tissue, 2), rng,
        )
        report.flags["extractor"] = "toy tissue classifier trained on gt images"
        if "fid" in wanted:
            report.values["fid"] = M.fid(
                clf.features,
                np.stack([g["image"] for g in gt]),
                np.stack([p["image"] for p in pred]),
            )
        if "is" in wanted:
            report.values["is"] = M.inception_score(
                clf.probs, np.stack([p["image"] for p in pred])
            )

    report.validate()
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "report.json"), report.to_dict())
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_prompt(args) -> int:
    cells = [c.strip() for c in args.cell_types.split(",") if c.strip()]
    try:
        print(make_prompt(args.tissue, cells, args.stain))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "separate": cmd_separate,
    "eval": cmd_eval,
    "prompt": cmd_prompt,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"histodiff: configuration error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, HistodiffError) as exc:
        print(f"histodiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
