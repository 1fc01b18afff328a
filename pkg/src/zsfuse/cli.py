"""``zsfuse`` command line: generate, train, eval, predict, gradcheck, plot.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import binfmt
from .config import ConfigError, RunConfig, add_override_flags, load_config, overrides_from_args
from .semantic import ClassVocabulary, EmbeddingFormatError, MissingClassError
from .synthscene import Scene, dataset, load_scene, save_scene
from .tensor import inject_backward_fault
from .trainer import ABLATIONS, DivergenceError, evaluate, load_checkpoint, predict_scene, save_checkpoint, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
VOCAB_DIR = "vocab"

logger = logging.getLogger("zsfuse")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    overrides = overrides_from_args(args)
    if getattr(args, "ablation", None):
        overrides["train.ablation"] = args.ablation
    if getattr(args, "seed", None) is not None and args.command in ("train",):
        overrides["train.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# data directories


def load_data_dir(path: str | Path) -> tuple[list[Scene], ClassVocabulary, dict]:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise UsageError(f"data directory {root} has no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        f = root / entry["file"]
        if not f.is_file():
            raise UsageError(f"scene file {f} listed in the manifest is missing")
        if _sha256(f) != entry["sha256"]:
            raise UsageError(f"checksum mismatch for {f}")
        scenes.append(load_scene(f))
    vocab = ClassVocabulary.load(root / VOCAB_DIR)
    return scenes, vocab, manifest


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.scenes < 0:
        raise UsageError("--scenes must be non-negative")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from exc
    entries = []
    for i, scene in enumerate(dataset(cfg.scene, args.scenes, args.seed)):
        name = f"scene_{i:04d}.zs3"
        try:
            blob = save_scene(scene, out / name)
        except OSError as exc:
            raise UsageError(f"cannot write {out / name}: {exc.strerror}") from exc
        entries.append({"file": name, "seed": args.seed ^ i, "points": scene.num_points,
                        "sha256": hashlib.sha256(blob).hexdigest()})
    try:
        cfg.scene.vocabulary().save(out / VOCAB_DIR)
    except OSError as exc:
        raise UsageError(f"cannot write vocabulary under {out}: {exc.strerror}") from exc
    manifest = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "seed": args.seed, "scenes": entries}
    _write(out / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(entries)} scenes to {out} (config {cfg.hash()})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    scenes, vocab, _ = load_data_dir(args.data)
    if not scenes:
        raise UsageError(f"data directory {args.data} contains no scenes")
    out = Path(args.out)
    model = adam = None
    if args.resume:
        model, adam, saved, _ = load_checkpoint(args.resume)
        if saved.hash() != cfg.train.hash():
            raise UsageError("checkpoint was written with a different training config")
    dims = {"attr_channels": int(scenes[0].attrs.shape[1]), "image_channels": int(scenes[0].X.shape[2]),
            "embed_dim": int(vocab.embed_dim)}
    meta = {"dims": dims, "run_config": cfg.to_dict(), "run_config_hash": cfg.hash()}
    _write(out / "config.yaml", f"# config_hash: {cfg.hash()}\n" + cfg.to_yaml())
    ckpt_dir = out / "checkpoints"

    def progress(step, loss):
        logger.info("step %d loss %.6g", step, loss)

    try:
        model, log = train(cfg.train, scenes, vocab, model=model, adam=adam, checkpoint_dir=ckpt_dir,
                           progress=progress, checkpoint_meta=meta)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    lines = [json.dumps({**e, "config_hash": cfg.hash()}, sort_keys=True) for e in log.epochs]
    _write(out / "train_log.jsonl", "".join(line + "\n" for line in lines))
    save_checkpoint(out / "final.ckpt", model, model._adam, cfg.train, meta)
    last = log.epochs[-1] if log.epochs else {}
    print(f"trained {cfg.train.ablation} for {model._adam.step} steps; final L={last.get('L', float('nan')):.4f}; "
          f"checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    model, adam, tcfg, info = load_checkpoint(path)
    return model, tcfg, info


def cmd_eval(args) -> int:
    scenes, vocab, _ = load_data_dir(args.data)
    if not scenes:
        raise UsageError(f"data directory {args.data} contains no scenes")
    if args.oracle:
        model, ablation, chash, seed = None, "full", "oracle", 0
        predictor = lambda scene: scene.labels  # noqa: E731
    else:
        model, tcfg, info = _checkpoint(args.checkpoint)
        ablation, chash, seed = tcfg.ablation, info.get("run_config_hash", tcfg.hash()), tcfg.seed
        predictor = None
    report = evaluate(model, scenes, vocab, ablation, seed, chash, predictor=predictor)
    report.extra["ablation"] = ablation
    _write(Path(args.report), report.to_text())
    print(f"seen {report.miou_seen:.2f}  unseen {report.miou_unseen:.2f}  "
          f"overall {report.miou_overall:.2f}  hIoU {report.hiou:.2f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, tcfg, info = _checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    vocab = ClassVocabulary.load(args.vocab or Path(args.scene).parent / VOCAB_DIR)
    pred = predict_scene(model, scene, vocab, tcfg.ablation)
    chash = info.get("run_config_hash", tcfg.hash())
    lines = [f"# config_hash={chash}", "point,class_id,class_name"]
    lines += [f"{i},{c},{vocab.names[c]}" for i, c in enumerate(pred)]
    _write(Path(args.out), "\n".join(lines) + "\n")
    print(f"wrote {len(pred)} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    cfg = _config(args)
    fault = inject_backward_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with fault:
        results = run_suite(seed=args.seed, h=args.h)
    print(f"# config_hash={cfg.hash()} h={args.h} tolerance={TOLERANCE}")
    for r in results:
        print(f"{r.name:34s} {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed in: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} blocks within {TOLERANCE}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plot import STAGES, export_stage, write_svg

    if args.stage not in STAGES:
        raise UsageError(f"unknown stage {args.stage!r}; expected one of {', '.join(STAGES)}")
    model, tcfg, info = _checkpoint(args.checkpoint)
    scene_path = Path(args.scene)
    if scene_path.is_dir():
        scenes, vocab, _ = load_data_dir(scene_path)
    else:
        scenes = [load_scene(scene_path)]
        vocab = ClassVocabulary.load(args.vocab or scene_path.parent / VOCAB_DIR)
    table = export_stage(model, scenes, vocab, args.stage, tcfg.ablation, info.get("run_config_hash", tcfg.hash()))
    _write(Path(args.out), table.to_csv())
    if args.svg:
        write_svg(table, args.svg)
    print(f"{args.stage}: mean semantic-visual distance {table.mean_distance():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        add_override_flags(p)
        return p

    p = with_config(sub.add_parser("generate", help="write synthetic scenes and a manifest"))
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("train", help="train a model on a generated data directory"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from a checkpoint written by the same config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-point class predictions for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--vocab", help="vocabulary directory (default: <scene dir>/vocab)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference check of every block"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="export a 2D semantic/visual feature table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene file or data directory")
    p.add_argument("--stage", required=True, help="pre_svfe, post_svfe or post_sgvf")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, binfmt.FormatError, EmbeddingFormatError, MissingClassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
