"""Command-line entry point: ``confgrasp synth|train|adapt|eval|detect``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Every command writes ``run_manifest.json`` into its output directory before
anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint
from .adapt import METHOD_ALIASES, AdaptConfig, prepare_target, run_adaptation, write_curve
from .benchmark import subsample
from .data import Sample, depth_to_3ch, load_dataset, read_depth, read_image, write_dataset
from .geometry import vertices_from_rect
from .model import (
    BackboneConfig,
    check_params,
    detect,
    encode,
    locnet_forward,
    params_from_arrays,
    params_to_arrays,
)
from .synth import SynthConfig, source_config, synth_generate, target_config
from .trainer import TrainConfig, evaluate, fmt, train_locnet, train_posenet, write_log

DATA_ENV = "CONFGRASP_DATA"
MANIFEST = "run_manifest.json"
log = logging.getLogger("confgrasp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _data_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(DATA_ENV)
    if not path.is_absolute() and root and not path.exists():
        path = Path(root) / path
    return path


def dataset_hash(path: Path) -> str:
    """SHA-256 over file names and contents, in sorted order."""
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise RuntimeError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, command: str, config: dict, seed: int, datasets: dict, artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "datasets": datasets,
        "artifacts": sorted(artifacts),
        "version": __version__,
    }
    _atomic_write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v)}")


def _overrides(cls, section: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown {where} keys in config file: {unknown}")
    return section


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise RuntimeError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    unknown = sorted(set(data) - {"backbone", "train", "adapt", "synth"})
    if unknown:
        raise UsageError(f"unknown config sections {unknown}")
    return data


def save_model(out: Path, params, cfg: BackboneConfig, name: str = "model") -> list[str]:
    checkpoint.save(out / f"{name}.ckpt", params_to_arrays(params))
    _atomic_write(out / f"{name}.json", cfg.to_json() + "\n")
    return [f"{name}.ckpt", f"{name}.json"]


def load_model(ckpt: str):
    path = Path(ckpt)
    if not path.exists():
        raise RuntimeError(f"checkpoint {path} does not exist")
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise RuntimeError(f"checkpoint config {sidecar} is missing")
    cfg = BackboneConfig.from_json(sidecar.read_text())
    params = params_from_arrays(checkpoint.load(path))
    try:
        check_params(params, cfg)
    except ValueError as e:
        raise RuntimeError(f"{path}: {e}") from e
    return params, cfg


def _load_splits(path: Path, size: Optional[int]):
    if not path.is_dir():
        raise RuntimeError(f"data directory {path} does not exist or is not readable")
    return load_dataset(path, size=size)


def _split(splits: dict, *names: str) -> list[Sample]:
    for n in names:
        if n in splits:
            return splits[n]
    return []


# ---------------------------------------------------------------- commands


def cmd_synth(args, conf) -> None:
    out = Path(args.out)
    _prepare_out(out, args.force)
    base = target_config if args.shift == "target" else source_config
    scfg = base(args.seed, args.size)
    scfg = replace(scfg, **_overrides(SynthConfig, conf.get("synth", {}), "synth"))
    write_manifest(out, "synth", {"synth": scfg.to_dict(), "labelled": args.labelled, "unlabelled": args.unlabelled,
                                  "eval": args.eval}, args.seed, {}, ["manifest.json", "manifest.csv"])
    d_l, d_u, d_e = synth_generate(scfg, args.labelled, args.unlabelled, args.eval)
    splits = {"labelled": d_l, "unlabelled": [s.unlabelled() for s in d_u]}
    if args.eval:
        splits["eval"] = d_e
    write_dataset(out, splits, {"seed": args.seed, "config": scfg.to_dict()})
    print(f"wrote {len(d_l) + len(d_u) + len(d_e)} samples ({len(d_l) + len(d_e)} labelled) to {out}")


def _backbone(conf, size: Optional[int], use_depth: Optional[bool]) -> BackboneConfig:
    b = dict(_overrides(BackboneConfig, conf.get("backbone", {}), "backbone"))
    if size is not None:
        b["input_size"] = size
    if use_depth is not None:
        b["use_depth_branch"] = use_depth
    return BackboneConfig(**b)


def cmd_train(args, conf) -> None:
    out = Path(args.out)
    data = _data_path(args.data)
    if args.stage == "loc" and not args.init_from:
        raise UsageError("--stage loc requires --init-from a pose checkpoint")
    t = dict(_overrides(TrainConfig, conf.get("train", {}), "train"))
    t["seed"] = args.seed
    for key in ("epochs_pose", "epochs_loc", "lr_pose", "lr_loc", "batch_size"):
        v = getattr(args, key)
        if v is not None:
            t[key] = v
    tc = TrainConfig(**t)
    if args.stage == "loc":
        params, cfg = load_model(args.init_from)
    else:
        splits = _load_splits(data, None)
        first = (_split(splits, "labelled", "all") or [None])[0]
        cfg = _backbone(conf, first.size if first else None, first is not None and first.depth is not None)
        params = None
    splits = _load_splits(data, cfg.input_size)
    d_l = [s for s in _split(splits, "labelled", "all") if s.labelled]
    if not d_l:
        raise RuntimeError(f"{data}: no labelled samples")
    _prepare_out(out, args.force)
    datasets = {str(data): dataset_hash(data)}
    if args.init_from:
        datasets[str(args.init_from)] = dataset_hash(Path(args.init_from))
    write_manifest(out, f"train --stage {args.stage}", {"backbone": asdict(cfg), "train": asdict(tc)}, args.seed,
                   datasets, ["model.ckpt", "model.json", "train_log.csv"])
    if args.stage == "pose":
        res = train_posenet(d_l, cfg, tc, params)
    else:
        res = train_locnet(d_l, params, cfg, tc)
    save_model(out, res.params, cfg)
    write_log(out / "train_log.csv", res.log)
    print(f"{args.stage} stage: {len(res.log)} steps, final loss {fmt(res.log[-1][4])}")


def cmd_adapt(args, conf) -> None:
    out = Path(args.out)
    data = _data_path(args.data)
    method = METHOD_ALIASES[args.method]
    a = dict(_overrides(AdaptConfig, conf.get("adapt", {}), "adapt"))
    a.update(method=method, seed=args.seed)
    for key in ("epochs", "lr", "consistency_weight", "loc_finetune_n", "steps_per_epoch"):
        v = getattr(args, key)
        if v is not None:
            a[key] = v
    if args.threshold is not None:
        a["threshold_policy"] = args.threshold
    acfg = AdaptConfig(**a)
    src, cfg = load_model(args.source_ckpt)
    splits = _load_splits(data, cfg.input_size)
    pool = [s for s in _split(splits, "labelled", "all") if s.labelled]
    d_u = _split(splits, "unlabelled")
    d_e = _split(splits, "eval")
    if not d_e:
        raise RuntimeError(f"{data}: adaptation needs an 'eval' split")
    d_l = subsample(pool, args.labelled_n, args.seed)
    d_loc = subsample(pool, min(acfg.loc_finetune_n, len(pool)), args.seed)
    _prepare_out(out, args.force)
    name = f"adapt_{method}_n{args.labelled_n}"
    write_manifest(out, f"adapt --method {args.method}", {"adapt": asdict(acfg), "labelled_n": args.labelled_n},
                   args.seed, {str(data): dataset_hash(data), str(args.source_ckpt): dataset_hash(Path(args.source_ckpt))},
                   [f"{name}.csv", "model.ckpt", "model.json"])
    params, tcfg = prepare_target(src, cfg, d_loc, acfg)
    res = run_adaptation(params, d_l, d_u, d_e, tcfg, acfg)
    write_curve(out / f"{name}.csv", res.curve)
    save_model(out, res.best_params, tcfg)
    print(f"{method}: best eval loss {fmt(res.best_loss)} at epoch {res.best_epoch}, final {fmt(res.curve[-1][2])}")


def cmd_eval(args, conf) -> None:
    out = Path(args.out)
    data = _data_path(args.data)
    params, cfg = load_model(args.ckpt)
    splits = _load_splits(data, cfg.input_size)
    samples = [s for s in _split(splits, args.split, "eval", "labelled", "all") if s.labelled]
    if not samples:
        raise RuntimeError(f"{data}: no labelled samples to evaluate")
    if cfg.use_depth_branch and any(s.depth is None for s in samples):
        raise RuntimeError("checkpoint expects depth but the evaluation data has none")
    if not cfg.use_depth_branch:
        samples = [replace(s, depth=None) for s in samples]
    _prepare_out(out, args.force)
    write_manifest(out, "eval", {"backbone": asdict(cfg), "top_n": args.top_n}, args.seed,
                   {str(data): dataset_hash(data), str(args.ckpt): dataset_hash(Path(args.ckpt))},
                   ["report.json", "report.csv"])
    rep = evaluate(params, samples, cfg, top_n=args.top_n)
    rep.write(out / "report.json", out / "report.csv")
    print(rep.to_json())


def write_pgm(path: Path, grid: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(grid) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_detect(args, conf) -> None:
    out = Path(args.out)
    params, cfg = load_model(args.ckpt)
    rgb = read_image(Path(args.image))
    if rgb.shape[1:] != (cfg.input_size, cfg.input_size):
        raise RuntimeError(f"image is {rgb.shape[2]}x{rgb.shape[1]}, model expects {cfg.input_size}x{cfg.input_size}")
    depth = None
    if cfg.use_depth_branch:
        if not args.depth:
            raise RuntimeError("this checkpoint has a depth branch; pass --depth")
        depth = depth_to_3ch(read_depth(Path(args.depth)))
    _prepare_out(out, args.force)
    artifacts = (["heatmap.pgm"] if args.dump_heatmap else []) + (["vertices.csv"] if args.dump_vertices else [])
    write_manifest(out, "detect", {"backbone": asdict(cfg), "top_n": args.top_n, "image": args.image}, args.seed,
                   {args.image: dataset_hash(Path(args.image))}, artifacts)
    with ad.no_grad():
        heat = locnet_forward(encode(rgb, depth, params, cfg), params).data[0, 0]
    dets = detect(rgb, depth, params, cfg, args.top_n)
    print("x,y,theta,w,h,score,m_uc")
    for d in dets:
        r = d.rect
        print(",".join(fmt(v) for v in (r.x, r.y, r.theta, r.w, r.h, d.location_score, d.m_uc)))
    if args.dump_heatmap:
        write_pgm(out / "heatmap.pgm", heat)
    if args.dump_vertices:
        with open(out / "vertices.csv", "w") as fh:
            fh.write("rank,x0,y0,x1,y1,x2,y2,x3,y3\n")
            for i, d in enumerate(dets):
                fh.write(",".join([str(i)] + [fmt(v) for v in vertices_from_rect(d.rect).reshape(-1)]) + "\n")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confgrasp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config file (sections: backbone, train, adapt, synth)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--labelled", type=int, default=18)
    s.add_argument("--unlabelled", type=int, default=90)
    s.add_argument("--eval", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--shift", choices=["source", "target"], default="source")

    t = sub.add_parser("train", help="train the pose stage or the heatmap stage")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--stage", choices=["pose", "loc"], required=True)
    t.add_argument("--init-from", help="pose-stage checkpoint (required for --stage loc)")
    t.add_argument("--epochs-pose", type=int)
    t.add_argument("--epochs-loc", type=int)
    t.add_argument("--lr-pose", type=float)
    t.add_argument("--lr-loc", type=float)
    t.add_argument("--batch-size", type=int)

    a = sub.add_parser("adapt", help="adapt a source model to a target dataset")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--source-ckpt", required=True)
    a.add_argument("--method", choices=sorted(METHOD_ALIASES), required=True)
    a.add_argument("--labelled-n", type=int, default=9)
    a.add_argument("--threshold", help="'auto', 'inf' or a number")
    a.add_argument("--epochs", type=int)
    a.add_argument("--steps-per-epoch", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--consistency-weight", type=float)
    a.add_argument("--loc-finetune-n", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labelled data")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--top-n", type=int, default=5)

    d = sub.add_parser("detect", help="detect grasps in one image")
    common(d)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--depth")
    d.add_argument("--top-n", type=int, default=5)
    d.add_argument("--dump-heatmap", action="store_true", help="write heatmap.pgm")
    d.add_argument("--dump-vertices", action="store_true", help="write vertices.csv")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "detect": cmd_detect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = load_config_file(args.config)
        COMMANDS[args.command](args, conf)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"confgrasp: error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ValueError) as e:
        print(f"confgrasp: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
