"""Command-line entry point: ``erclm {train,align,eval,synth,ablate}``.

Exit status: 0 on success, 2 on usage errors, 3 on unreadable or invalid
inputs, 4 when ``align`` could not align at least one face (its results are
still written). All outputs are deterministic given ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ContainerError, DimensionError, ParseError
from .eval_harness import (ablation_csv, ced_csv, evaluate, reference_mode, run_ablation,
                           synth_generate)
from .fitter import STRATEGIES, AlignConfig, align_face
from .pipeline_io import (AnnotationRecord, FaceBox, ResultRecord, annotation_line, format_face_boxes,
                          load_annotations, load_config, load_face_boxes, load_image,
                          load_model_file, read_results, save_image, save_model_file, write_results)
from .synthetic_faces import DEFAULT_POSES, EXPRESSIONS, face_box, sample_rendered_face
from .training import TrainConfig, TrainingSample, train_ensemble

log = logging.getLogger("erclm")

EXIT_INPUT = 3
EXIT_ALIGN = 4


class InputError(Exception):
    """Bad or missing input file."""


def _write(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise InputError(f"{args.command} needs {', '.join(missing)}")


def _train_config(args) -> TrainConfig:
    over = load_config(args.config) if args.config else {}
    known = {f.name for f in fields(TrainConfig)}
    bad = sorted(set(over) - known)
    if bad:
        raise InputError(f"unknown training options: {bad}")
    if "rotations" in over:
        over["rotations"] = tuple(over["rotations"])
    return TrainConfig(**{**over, "seed": args.seed})


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    _need(args, "annotations", "out")
    records = load_annotations(args.annotations)
    samples = []
    for rec in records:
        if rec.n_points == 29:
            raise InputError(f"{rec.image}: 29-point annotations cannot be trained (no scheme)")
        box = rec.box if rec.box is not None else face_box(rec.points)
        samples.append(TrainingSample(rec.points, rec.pose or 0, rec.expression or 0,
                                      load_image(rec.image), box))
    ensemble = train_ensemble(samples, _train_config(args))
    save_model_file(ensemble, args.out)
    log.info("wrote %s (%d modes, %d detectors)", args.out, ensemble.n_modes, len(ensemble.detectors))
    return 0


def cmd_align(args) -> int:
    _need(args, "model", "boxes")
    ensemble = load_model_file(args.model)
    boxes = load_face_boxes(args.boxes)
    root = Path(args.images) if args.images else Path(args.boxes).parent
    cfg = AlignConfig(strategy=args.strategy, seed=args.seed, max_iter=args.max_iter, workers=args.workers)
    records, cache = [], {}
    for b in boxes:
        path = root / b.image if root.is_dir() else root
        if path not in cache:
            cache = {path: load_image(path)}
        res = align_face(cache[path], b.rect, ensemble, cfg)
        records.append(ResultRecord.from_alignment(b.image, res, b.rect))
        log.info("%s: %s", b.image, res.mode_id if res.success else res.message)
    _write(args.out, "".join(r.to_json() + "\n" for r in records))
    failed = sum(not r.success for r in records)
    if failed:
        log.error("%d of %d faces could not be aligned", failed, len(records))
        return EXIT_ALIGN
    return 0


def _annotation_key(rec: AnnotationRecord, base: Path) -> str:
    return os.path.relpath(rec.image, base)


def cmd_eval(args) -> int:
    _need(args, "results", "annotations")
    results = read_results(args.results)
    truths = load_annotations(args.annotations)
    base = Path(args.annotations).parent
    pending: dict[str, list[ResultRecord]] = {}
    for r in results:
        pending.setdefault(r.image, []).append(r)
    preds, gts, names = [], [], []
    for t in truths:
        key = _annotation_key(t, base)
        queue = pending.get(key) or pending.get(Path(key).name) or []
        r = queue.pop(0) if queue else None
        ok = r is not None and r.success and r.points is not None and len(r.points) == t.n_points
        preds.append(r.points if ok else None)
        gts.append(t.points)
        names.append(key)
    report = evaluate(preds, gts, args.subset, names)
    _write(args.out, json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.out and str(args.out) != "-":
        _write(Path(args.out).with_suffix(".ced.csv"), ced_csv(report))
    return 0


def cmd_synth(args) -> int:
    _need(args, "out")
    out = Path(args.out)
    if args.kind == "faces":
        (out / "images").mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(args.seed)
        lines, boxes = [], []
        n_modes = len(DEFAULT_POSES) * len(EXPRESSIONS)
        for j in range(args.count):
            pose, expr = divmod(j % n_modes, len(EXPRESSIONS))
            face = sample_rendered_face(rng, pose, expr)
            name = f"images/{j:05d}.png"
            save_image(out / name, face.image)
            rec = AnnotationRecord(name, face.shape, np.zeros(68, np.uint8), pose, expr, face.box)
            lines.append(annotation_line(rec) + "\n")
            boxes.append(FaceBox(name, *face.box))
        (out / "annotations.jsonl").write_text("".join(lines))
        (out / "boxes.txt").write_text(format_face_boxes(boxes))
        return 0
    source = load_model_file(args.model) if args.model else reference_mode(args.seed)
    lines = []
    for j in range(args.count):
        inst = synth_generate(source, args.occlusion_rate, args.clutter, args.sigma, args.seed + j,
                              args.adversarial)
        lines.append(json.dumps(inst.to_dict(), sort_keys=True) + "\n")
    _write(out, "".join(lines))
    return 0


def cmd_ablate(args) -> int:
    mode = load_model_file(args.model).modes[0] if args.model else reference_mode(args.seed)
    rows = run_ablation(mode, args.strategy or STRATEGIES, args.max_iter_list or [args.max_iter],
                        args.count, args.seed, args.occlusion_rate, args.clutter, args.sigma,
                        args.adversarial)
    _write(args.out, ablation_csv(rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erclm", description="Occlusion-robust facial landmark alignment.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path ('-' or omitted: stdout where applicable)")

    t = sub.add_parser("train", help="annotations -> model container")
    t.add_argument("--annotations", help="JSON-lines manifest of annotated images")
    t.add_argument("--config", help="JSON file overriding training options")
    common(t)

    a = sub.add_parser("align", help="model + images + boxes -> result records")
    a.add_argument("--model")
    a.add_argument("--images", help="image directory (default: the boxes file's directory) or one image")
    a.add_argument("--boxes", help="face boxes, 'path x y w h' per line")
    a.add_argument("--strategy", choices=STRATEGIES, default="uniform")
    a.add_argument("--max-iter", type=int, default=2000)
    a.add_argument("--workers", type=int, default=1)
    common(a)

    e = sub.add_parser("eval", help="results + ground truth -> report")
    e.add_argument("--results")
    e.add_argument("--annotations")
    e.add_argument("--subset", type=int, choices=(68, 51), default=68)
    common(e)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--kind", choices=("candidates", "faces"), default="candidates")
    s.add_argument("--model", help="model container to plant from (default: built-in frontal mode)")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--occlusion-rate", type=float, default=0.0)
    s.add_argument("--clutter", type=int, default=3)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--adversarial", action="store_true")
    common(s)

    b = sub.add_parser("ablate", help="sampling-strategy study")
    b.add_argument("--model")
    b.add_argument("--strategy", choices=STRATEGIES, action="append")
    b.add_argument("--max-iter", type=int, default=2000)
    b.add_argument("--budget", type=int, action="append", dest="max_iter_list",
                   help="extra budgets (repeatable; overrides --max-iter)")
    b.add_argument("--count", type=int, default=20)
    b.add_argument("--occlusion-rate", type=float, default=0.3)
    b.add_argument("--clutter", type=int, default=3)
    b.add_argument("--sigma", type=float, default=1.0)
    b.add_argument("--adversarial", action="store_true")
    common(b)
    return p


COMMANDS = {"train": cmd_train, "align": cmd_align, "eval": cmd_eval, "synth": cmd_synth,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, InputError, ParseError, ContainerError, DimensionError, KeyError, ValueError) as exc:
        print(f"erclm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
