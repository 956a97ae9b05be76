"""Command line entry point: ``mdet3d <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..labelspace import SynonymTable, Vocabulary, label_space_report
from ..scene import SCENE_SUFFIX, SyntheticSpec, generate_synthetic, load_scene, load_scene_dir, save_scene
from .config import ConfigError, config_help, dump_config, load_config

log = logging.getLogger("mdet3d")


def _write_report(report, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")


def _summary(report) -> str:
    return f"mAP25={report.map25:.4f} mAP50={report.map50:.4f} scenes={report.num_scenes}"


def cmd_train(args) -> int:
    from .data import load_mixture
    from .infer import evaluate_model
    from .train import save_training_checkpoint, train, write_log

    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mixture = load_mixture(cfg)
    log.info("training %s / %s on %s (%d scenes)", cfg.scheme, cfg.label_mode, list(mixture.ids), mixture.num_train)

    def progress(rec):
        if rec.step % max(1, args.log_every) == 0:
            log.info("step %d epoch %.2f lr %.3g loss %.4f", rec.step, rec.epoch, rec.lr, rec.loss)

    result = train(mixture, cfg, resume=args.resume, on_step=progress)
    ckpt = out / "model.ckpt.json"
    last = result.history[-1].step + 1 if result.history else 0
    save_training_checkpoint(ckpt, result.model, result.optimizer, last)
    write_log(result.history, out / "train_log.jsonl")
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    print(f"checkpoint: {ckpt}")
    val = mixture.val_scenes()
    if val:
        report = evaluate_model(result.model, val, result.cache)
        _write_report(report, out, "eval_val")
        print("val:", _summary(report))
    return 0


def cmd_eval(args) -> int:
    from .infer import evaluate_model
    from .train import load_model

    model, _, _ = load_model(args.ckpt)
    scenes = load_scene_dir(args.data)
    if not scenes:
        print(f"no {SCENE_SUFFIX} files in {args.data}", file=sys.stderr)
        return 2
    report = evaluate_model(model, scenes)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    _write_report(report, out, "eval")
    print(_summary(report))
    for ds, rep in report.per_dataset.items():
        print(f"  {ds}: {_summary(rep)}")
    return 0


def cmd_infer(args) -> int:
    from .infer import infer, save_detections
    from .train import load_model

    model, _, _ = load_model(args.ckpt)
    scene = load_scene(args.scene)
    dets = infer(scene, model, args.score_threshold, args.nms_iou)
    save_detections(dets, args.out)
    print(f"{len(dets)} detections -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import SUITES, ablate

    cfg = load_config(args.config)
    values = None
    if args.values:
        kind = type(SUITES[args.suite][0])
        if kind is bool:
            values = [v.lower() in ("1", "true", "on", "yes") for v in args.values]
        else:
            values = [kind(v) for v in args.values]
    out = Path(args.out or cfg.out_dir)
    report = ablate(args.suite, cfg, values, out_dir=out)
    print(report.table_csv(), end="")
    print(f"written to {out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = spec.seed if args.seed is None else args.seed
    for i in range(args.count):
        scene = generate_synthetic(base + i, spec)
        save_scene(scene, out / f"scene_{i:04d}{SCENE_SUFFIX}")
    print(f"{args.count} scenes -> {out}")
    return 0


def cmd_labels(args) -> int:
    vocabs = [Vocabulary.load(p) for p in args.vocab] if args.vocab else None
    syn = SynonymTable.load(args.synonyms) if args.synonyms else None
    print(json.dumps(label_space_report(vocabs, syn), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdet3d", description="Superpoint-query 3D object detection over multiple datasets.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    t = sub.add_parser("train", help="train a detector from a YAML config", epilog=config_help(), formatter_class=fmt)
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a directory of scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="detect objects in one scene")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--score-threshold", type=float, default=None, help="default: config value (0.1)")
    i.add_argument("--nms-iou", type=float, default=None, help="default: config value (0.5)")
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("ablate", help="run an ablation sweep", epilog=config_help(), formatter_class=fmt)
    a.add_argument("--suite", required=True, choices=["layers", "matching", "pe", "label_mode", "scheme"])
    a.add_argument("--config", required=True)
    a.add_argument("--values", nargs="+", help="override the suite's arm values")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gen-synthetic", help="write procedurally generated scenes")
    g.add_argument("--spec", help="YAML synthetic spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_gen_synthetic)

    lb = sub.add_parser("labels", help="report label-space sizes")
    lb.add_argument("--vocab", nargs="+", help="vocabulary JSON files (default: the six built-in ones)")
    lb.add_argument("--synonyms", help="synonym JSON file")
    lb.set_defaults(fn=cmd_labels)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
