"""Command-line frontends wiring the library together.

Metric subcommands print a JSON report to stdout and can render a figure
next to it; data subcommands write JSON-lines or binary artifacts. All
randomness is seed-controlled, so the same flags reproduce the same bytes.

Exit codes: 0 success, 2 input validation failure (the diagnostic names the
first bad record), 64 usage error, 74 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import featmap, geometry, grit, grounding, quantizer, sampler

EXIT_OK = 0
EXIT_DATA = 2
EXIT_USAGE = 64
EXIT_IO = 74


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class DataError(ValueError):
    """Input content failed validation; message names the offender."""


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest(paths) -> dict:
    return {str(p): _sha256(p) for p in paths if p}


def _write_manifest(out_path, inputs) -> None:
    with open(str(out_path) + ".manifest.json", "w") as f:
        json.dump({"inputs": _manifest(inputs)}, f, sort_keys=True, indent=2)
        f.write("\n")


def _dump_report(report: dict) -> None:
    print(json.dumps(report, sort_keys=True, indent=2))


def _load_json(path) -> dict:
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
    return rows


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def _load_eval_records(pred_path, gt_path, task) -> list[grounding.EvalRecord]:
    rows = _load_jsonl(pred_path)
    gt_by_id = {}
    if gt_path:
        for row in _load_jsonl(gt_path):
            if "id" not in row:
                raise DataError(f"{gt_path}: ground-truth row without 'id'")
            gt_by_id[str(row["id"])] = row.get("gt", row)
    records = []
    for i, row in enumerate(rows):
        rid = str(row.get("id", f"line-{i + 1}"))
        if "id" not in row:
            raise DataError(f"{pred_path}: record {rid} missing 'id'")
        if "task" in row and row["task"] != task:
            raise DataError(
                f"record {rid}: task {row['task']!r} does not match {task!r}"
            )
        gt = row.get("gt")
        if rid in gt_by_id:
            gt = {**(gt or {}), **gt_by_id[rid]}
        if gt is None:
            raise DataError(f"record {rid}: no ground truth provided")
        try:
            records.append(
                grounding.EvalRecord(
                    id=rid,
                    task=task,
                    text=row.get("text"),
                    label=row.get("label"),
                    gt=gt,
                )
            )
        except grounding.RecordError as exc:
            raise DataError(str(exc)) from None
    return records


def _maybe_figure(args, report) -> None:
    if getattr(args, "figure", None):
        from . import viz

        viz.save_figure(viz.metrics_figure(report), args.figure)


def _cmd_rasterize(args) -> int:
    region = geometry.region_from_json(_load_json(args.region))
    mask = geometry.rasterize(region, (args.width, args.height))
    with open(args.out, "w") as f:
        json.dump(geometry.mask_to_json(mask), f, sort_keys=True)
        f.write("\n")
    if args.figure:
        from . import viz

        viz.save_figure(viz.mask_figure(mask), args.figure)
    if args.manifest:
        _write_manifest(args.out, [args.region])
    return EXIT_OK


def _cmd_sample(args) -> int:
    mask = geometry.mask_from_json(_load_json(args.mask))
    fmap = featmap.load_fmap(args.fmap)
    params, header = sampler.load_params(args.params)
    final = args.n_points // args.ratio ** header["blocks"]
    if final * header["channels"] != header["flat_dim"]:
        raise DataError(
            f"{args.params}: flat dim {header['flat_dim']} does not match "
            f"n-points {args.n_points} / ratio {args.ratio} "
            f"({final} final points x {header['channels']} channels)"
        )
    cfg = sampler.SamplerConfig(
        n_points=args.n_points,
        ratio=args.ratio,
        neighbors=args.neighbors,
        blocks=header["blocks"],
        channels=header["channels"],
        out_dim=header["out_dim"],
    )
    vector, tape = sampler.sampler_forward(mask, fmap, cfg, params, args.seed)
    if args.binary:
        payload = np.asarray(vector, dtype="<f8").tobytes()
        if args.out:
            with open(args.out, "wb") as f:
                f.write(payload)
        else:
            sys.stdout.buffer.write(payload)
    else:
        text = "\n".join(repr(float(v)) for v in vector) + "\n"
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
    if args.figure:
        from . import viz

        viz.save_figure(
            viz.points_figure(mask, tape.point_coords, tape.final_coords),
            args.figure,
        )
    if args.manifest and args.out:
        _write_manifest(args.out, [args.mask, args.fmap, args.params])
    return EXIT_OK


def _run_eval(args, task, evaluator) -> int:
    cfg = quantizer.QuantizerConfig(args.n_bins)
    records = _load_eval_records(args.pred, args.gt, task)
    try:
        report = evaluator(records, cfg)
    except grounding.RecordError as exc:
        raise DataError(str(exc)) from None
    if args.manifest:
        report["manifest"] = _manifest([args.pred, args.gt])
    _dump_report(report)
    _maybe_figure(args, report)
    return EXIT_OK


def _cmd_eval_rec(args) -> int:
    return _run_eval(args, "rec", grounding.eval_rec)


def _cmd_eval_ground(args) -> int:
    return _run_eval(args, "phrase_grounding", grounding.eval_phrase_grounding)


def _cmd_eval_groundcap(args) -> int:
    cfg = quantizer.QuantizerConfig(args.n_bins)
    records = _load_eval_records(args.pred, args.gt, "grounded_caption")
    try:
        report, captions = grounding.eval_grounded_caption(records, cfg)
    except grounding.RecordError as exc:
        raise DataError(str(exc)) from None
    if args.captions_out:
        _write_jsonl(args.captions_out, captions)
    if args.manifest:
        report["manifest"] = _manifest([args.pred, args.gt])
    _dump_report(report)
    _maybe_figure(args, report)
    return EXIT_OK


def _cmd_eval_refer(args) -> int:
    return _run_eval(args, "refer_cls", lambda records, cfg: grounding.eval_refer(records))


def _cmd_eval_pope(args) -> int:
    return _run_eval(args, "pope", lambda records, cfg: grounding.eval_pope(records))


def _cmd_bench_ratio(args) -> int:
    pred_rows = _load_jsonl(args.pred)
    judge_rows = _load_jsonl(args.judge)
    judge_by_id = {}
    for row in judge_rows:
        if "id" not in row or "score" not in row:
            raise DataError(f"{args.judge}: judge row needs 'id' and 'score'")
        judge_by_id[str(row["id"])] = row["score"]
    pred_scores, judge_scores = [], []
    for i, row in enumerate(pred_rows):
        rid = str(row.get("id", f"line-{i + 1}"))
        if "score" not in row:
            raise DataError(f"record {rid}: missing 'score'")
        if rid not in judge_by_id:
            raise DataError(f"record {rid}: no judge score")
        pred_scores.append(float(row["score"]))
        judge_scores.append(float(judge_by_id[rid]))
    try:
        ratio = grounding.bench_ratio(pred_scores, judge_scores)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = {
        "task": "bench",
        "ratio": ratio,
        "counts": {
            "pairs": len(pred_scores),
            "pred_sum": sum(pred_scores),
            "judge_sum": sum(judge_scores),
        },
    }
    if args.manifest:
        report["manifest"] = _manifest([args.pred, args.judge])
    _dump_report(report)
    _maybe_figure(args, report)
    return EXIT_OK


def _load_scenes(path) -> list[grit.SceneRecord]:
    scenes = []
    for i, row in enumerate(_load_jsonl(path)):
        try:
            scenes.append(grit.scene_from_json(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: scene record {i + 1} invalid ({exc})") from None
    return scenes


def _cmd_grit_compile(args) -> int:
    if not args.scenes and not args.pseudo_ground:
        raise DataError("either --scenes or --pseudo-ground is required")
    cfg = quantizer.QuantizerConfig(args.n_bins)
    inputs = [args.scenes or args.pseudo_ground, args.dedup]
    if args.pseudo_ground:
        rows = []
        for i, row in enumerate(_load_jsonl(args.pseudo_ground)):
            rid = str(row.get("id", f"line-{i + 1}"))
            try:
                detections = [
                    (
                        str(d["phrase"]),
                        (int(d["start"]), int(d["end"])),
                        geometry.Box(*(float(v) for v in d["box"])),
                    )
                    for d in row["detections"]
                ]
                grounded = grit.append_pseudo_grounding(
                    row["text"],
                    detections,
                    (int(row["width"]), int(row["height"])),
                    cfg,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"record {rid}: {exc}") from None
            rows.append({"id": rid, "text": grounded.raw})
        _write_jsonl(args.out, rows)
        if args.manifest:
            _write_manifest(args.out, inputs)
        return EXIT_OK

    tasks = args.tasks.split(",") if args.tasks else list(grit.TASKS)
    for task in tasks:
        if task not in grit.TASKS:
            raise DataError(f"unknown task {task!r} (choose from {', '.join(grit.TASKS)})")
    samples = []
    for scene in _load_scenes(args.scenes):
        for task in tasks:
            try:
                samples.extend(
                    grit.convert_record(
                        scene,
                        task,
                        cfg,
                        seed=args.seed,
                        include_feature=not args.no_spe,
                        coord_style=args.coord_style,
                    )
                )
            except grit.MissingAlignmentsError as exc:
                raise DataError(str(exc)) from None
    if args.dedup:
        with open(args.dedup) as f:
            banned = [line.strip() for line in f if line.strip()]
        samples = grit.dedup(samples, banned)
    _write_jsonl(args.out, [s.to_json() for s in samples])
    if args.manifest:
        _write_manifest(args.out, inputs)
    return EXIT_OK


def _cmd_grit_negatives(args) -> int:
    cfg = quantizer.QuantizerConfig(args.n_bins)
    scenes = _load_scenes(args.scenes)
    vocabulary = []
    if args.vocab:
        with open(args.vocab) as f:
            vocabulary = [line.strip() for line in f if line.strip()]

    if args.semantic_prompts_out:
        rows = []
        for scene in scenes:
            entities = scene.class_names()
            if not entities:
                continue
            rows.append(
                {
                    "image_id": scene.image_id,
                    "prompt": grit.build_semantic_negative_prompt(entities),
                }
            )
        _write_jsonl(args.semantic_prompts_out, rows)

    replies = {}
    if args.semantic_replies:
        for row in _load_jsonl(args.semantic_replies):
            replies[str(row["image_id"])] = row["entities"]

    samples = []
    for i, scene in enumerate(scenes):
        seed = args.seed + i
        try:
            samples.extend(grit.convert_record(scene, "hallucination", cfg, seed=seed))
            if vocabulary:
                samples.append(
                    grit.mine_negative_image_conditioned(scene, vocabulary, seed=seed)
                )
        except grit.ExhaustedVocabularyError as exc:
            raise DataError(str(exc)) from None
        if scene.image_id in replies:
            client = grit.StubLlmClient([json.dumps(replies[scene.image_id])])
            samples.extend(grit.mine_negative_semantic(scene, client, seed=seed))
        elif args.llm == "http" and scene.class_names():
            client = grit.HttpLlmClient()
            samples.extend(grit.mine_negative_semantic(scene, client, seed=seed))
    if args.balance:
        samples = grit.balance(samples, seed=args.seed)
    _write_jsonl(args.out, [s.to_json() for s in samples])
    if args.manifest:
        _write_manifest(
            args.out, [args.scenes, args.vocab, args.semantic_replies]
        )
    return EXIT_OK


TINY_CONFIG = dict(
    n_points=16, ratio=2, neighbors=3, blocks=2, channels=3, out_dim=5
)


def _cmd_gen_fixtures(args) -> int:
    if args.fmap_out:
        fmap = featmap.synth_feature_map(
            args.height, args.width, args.channels, args.pattern, args.seed
        )
        featmap.save_fmap(args.fmap_out, fmap)
        return EXIT_OK
    if not args.tiny:
        raise DataError("nothing to generate: pass --tiny or --fmap-out")

    os.makedirs(args.out_dir, exist_ok=True)
    cfg = sampler.SamplerConfig(**TINY_CONFIG)
    region = geometry.Box(4.0, 6.0, 26.0, 24.0)
    mask = geometry.rasterize(region, (32, 32))
    fmap = featmap.synth_feature_map(6, 6, cfg.channels, "random", args.seed)
    params = sampler.init_params(cfg, seed=args.seed)

    mask_path = os.path.join(args.out_dir, "mask.json")
    fmap_path = os.path.join(args.out_dir, "feats.fmap")
    params_path = os.path.join(args.out_dir, "params.sparams")
    with open(mask_path, "w") as f:
        json.dump(geometry.mask_to_json(mask), f, sort_keys=True)
        f.write("\n")
    featmap.save_fmap(fmap_path, fmap)
    sampler.save_params(params_path, params, cfg)
    # Record the output of the files as written, so the fixture stays
    # consistent with its float32 payloads.
    params, _ = sampler.load_params(params_path)
    fmap = featmap.load_fmap(fmap_path)
    vector, _ = sampler.sampler_forward(mask, fmap, cfg, params, args.seed)
    with open(os.path.join(args.out_dir, "fixture.json"), "w") as f:
        json.dump(
            {
                "config": TINY_CONFIG,
                "seed": args.seed,
                "mask": "mask.json",
                "fmap": "feats.fmap",
                "params": "params.sparams",
                "output": [float(v) for v in vector],
            },
            f,
            sort_keys=True,
            indent=2,
        )
        f.write("\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="refground", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rasterize", help="region JSON to RLE mask JSON")
    p.add_argument("--region", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure")
    p.add_argument("--manifest", action="store_true")
    p.set_defaults(func=_cmd_rasterize)

    p = sub.add_parser("sample", help="region feature from mask + feature map")
    p.add_argument("--mask", required=True)
    p.add_argument("--fmap", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--neighbors", type=int, default=24)
    p.add_argument("--out")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--figure")
    p.add_argument("--manifest", action="store_true")
    p.set_defaults(func=_cmd_sample)

    eval_specs = [
        ("eval-rec", "referring expression accuracy", _cmd_eval_rec),
        ("eval-ground", "phrase grounding accuracy", _cmd_eval_ground),
        ("eval-groundcap", "grounded captioning F1", _cmd_eval_groundcap),
        ("eval-refer", "referring classification accuracy", _cmd_eval_refer),
        ("eval-pope", "object existence yes/no metrics", _cmd_eval_pope),
    ]
    for name, help_text, func in eval_specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--pred", required=True)
        p.add_argument("--gt")
        p.add_argument("--n-bins", type=int, default=1000)
        p.add_argument("--figure")
        p.add_argument("--manifest", action="store_true")
        if name == "eval-groundcap":
            p.add_argument("--captions-out")
        p.set_defaults(func=func)

    p = sub.add_parser("bench-ratio", help="score ratio against judge answers")
    p.add_argument("--pred", required=True)
    p.add_argument("--judge", required=True)
    p.add_argument("--figure")
    p.add_argument("--manifest", action="store_true")
    p.set_defaults(func=_cmd_bench_ratio)

    p = sub.add_parser("grit-compile", help="compile scenes to instruction samples")
    p.add_argument("--scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", help="comma-separated task subset (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-bins", type=int, default=1000)
    p.add_argument("--no-spe", action="store_true",
                   help="omit the feature placeholder for plain-text export")
    p.add_argument("--coord-style", choices=("bins", "float"), default="bins")
    p.add_argument("--dedup", help="file of image ids to exclude")
    p.add_argument("--pseudo-ground",
                   help="JSONL of texts + detections to ground instead of scenes")
    p.add_argument("--manifest", action="store_true")
    p.set_defaults(func=_cmd_grit_compile)

    p = sub.add_parser("grit-negatives", help="existence negatives + balancing")
    p.add_argument("--scenes", required=True)
    p.add_argument("--vocab", help="newline-separated class vocabulary")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-bins", type=int, default=1000)
    p.add_argument("--balance", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--llm", choices=("stub", "http"), default="stub")
    p.add_argument("--semantic-prompts-out",
                   help="write the misleading-entity prompts per scene")
    p.add_argument("--semantic-replies",
                   help="JSONL of {image_id, entities} canned client replies")
    p.add_argument("--manifest", action="store_true")
    p.set_defaults(func=_cmd_grit_negatives)

    p = sub.add_parser("gen-fixtures", help="synthetic feature maps and fixtures")
    p.add_argument("--tiny", action="store_true",
                   help="emit the small end-to-end sampler fixture")
    p.add_argument("--out-dir", default="fixtures")
    p.add_argument("--fmap-out", help="write a synthetic .fmap and exit")
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--pattern", default="random",
                   choices=("random", "ramp-x", "ramp-y", "constant"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"refground: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError, TypeError) as exc:
        # Library validation errors are ValueError subclasses; Key/TypeError
        # come from malformed JSON structures.
        print(f"refground: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"refground: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
