"""``figforge`` command line.

Every subcommand takes an optional ``--config`` run configuration; explicit
flags override it.  The merged settings are written as
``effective_config.json`` next to the outputs.  Exit status is 0 on success,
1 on invalid input and 2 on I/O failure; errors are printed to stderr as a
JSON object ``{code, message, context}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import compositor, curation, detection, embed, formats, perturb
from .config import load_config
from .errors import FigforgeError
from .layout import LayoutConfig

log = logging.getLogger("figforge")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, code, message, exit_code, **context):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code
        self.context = context


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _section(cfg, name):
    return dict(cfg.get(name, {})) if cfg else {}


def _pick(flag, section, key, default=None):
    if flag is not None:
        return flag
    return section.get(key, default)


def _write_effective(dirpath: Path, command: str, settings: dict) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    dump_json(dirpath / "effective_config.json", {"command": command, **settings})


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("invalid_input", f"{path}: malformed JSON ({exc.msg})", EXIT_INVALID, line=exc.lineno)


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg):
    gen = _section(cfg, "generation")
    pool_path = args.pool or (cfg or {}).get("pool_index")
    if pool_path is None:
        raise CliError("invalid_input", "no panel pool given (--pool or pool_index)", EXIT_INVALID)
    out = args.out or gen.get("out_dir")
    if out is None:
        raise CliError("invalid_input", "no output directory given (--out or generation.out_dir)", EXIT_INVALID)
    count = _pick(args.count, gen, "count", 0)
    seed = _pick(args.seed, gen, "master_seed", 0)
    workers = _pick(args.workers, gen, "workers", None) or int(os.environ.get("FIGFORGE_WORKERS", "1"))
    layouts = (cfg or {}).get("layout", {})
    layouts = layouts if isinstance(layouts, list) else [layouts]
    gconf = compositor.GenerationConfig(
        layouts=tuple(LayoutConfig.from_dict(l) for l in layouts),
        mix=compositor.MixPolicy((cfg or {})["mix"]) if cfg and "mix" in cfg else compositor.MixPolicy.uniform(),
        label_style=compositor.LabelStyle.from_dict(_section(cfg, "label_style")),
        split=gen.get("split"),
    )
    pool = compositor.load_pool(pool_path)
    compositor.check_policy(pool, gconf)
    out = Path(out)
    # workers is deliberately left out: it never changes the output
    _write_effective(out, "generate", {
        "pool_index": str(pool_path),
        "layout": [l.to_dict() for l in gconf.layouts],
        "mix": gconf.mix.weights,
        "label_style": gconf.label_style.to_dict(),
        "generation": {"count": count, "master_seed": seed, "split": gconf.split},
    })
    manifests = compositor.generate_corpus(pool, gconf, count, seed, workers, out)
    print(f"wrote {len(manifests)} figures to {out}")


def cmd_export_coco(args, cfg):
    manifests = list(formats.read_manifest(args.manifest))
    try:
        doc = formats.export_coco(manifests)
    except ValueError as exc:
        raise CliError("invalid_input", str(exc), EXIT_INVALID)
    out = Path(args.out)
    _write_effective(out.parent, "export-coco", {"manifest": str(args.manifest)})
    formats.write_coco(out, doc)


def _eval_settings(args, cfg):
    ev = _section(cfg, "eval")
    thr = _floats(args.iou_thresholds) if args.iou_thresholds else ev.get("iou_thresholds")
    kw = {}
    if thr is not None:
        kw["iou_thresholds"] = tuple(thr)
    f1 = _pick(args.f1_iou, ev, "f1_iou")
    if f1 is not None:
        kw["f1_iou"] = f1
    st = _pick(args.score_threshold, ev, "score_threshold")
    if st is not None:
        kw["score_threshold"] = st
    return detection.EvalSettings(**kw)


def cmd_eval_detect(args, cfg):
    settings = _eval_settings(args, cfg)
    manifests = list(formats.read_manifest(args.manifest))
    dets = list(formats.read_detections(args.detections))
    report = detection.evaluate_detections(dets, manifests, settings)
    out = Path(args.out)
    _write_effective(out.parent, "eval-detect", {"eval": report.settings})
    dump_json(out, report.to_dict())


def cmd_decompose(args, cfg):
    flt = _section(cfg, "filters")
    min_score = _pick(args.min_score, flt, "min_score", curation.DEFAULT_MIN_SCORE)
    nms_iou = _pick(args.nms_iou, flt, "nms_iou", curation.DEFAULT_NMS_IOU)
    records = curation.read_records(args.records)
    dets = {}
    for d in formats.read_detections(args.detections):
        prev = dets.get(d.image_id)
        dets[d.image_id] = formats.DetectionSet(d.image_id, (prev.boxes if prev else ()) + d.boxes)
    known = {r.figure_id for r in records}
    unknown = sorted(set(dets) - known)
    if unknown:
        raise CliError("invalid_input", "detections reference unknown figures", EXIT_INVALID, image_ids=unknown[:20])
    out = Path(args.out)
    crops = out / "crops"
    crops.mkdir(parents=True, exist_ok=True)
    _write_effective(out, "decompose", {"filters": {"min_score": min_score, "nms_iou": nms_iou}})
    pairs, failures = [], []
    for r in records:
        ds = dets.get(r.figure_id, formats.DetectionSet(r.figure_id))
        try:
            got, _ = curation.decompose(r, ds, min_score, nms_iou, image_root=args.images, out_dir=crops)
        except curation.RecordError as exc:
            failures.append({"figure_id": r.figure_id, "message": str(exc)})
            continue
        pairs.extend(
            curation.SubfigurePair(p.subfigure_id, p.parent_id, f"crops/{p.file}", p.bbox, p.caption, p.score)
            for p in got
        )
    curation.write_pairs(out / "pairs.jsonl", pairs)
    dump_json(out / "decompose_report.json", {"records": len(records), "pairs": len(pairs), "failures": failures})
    if failures:
        raise CliError("io_error", f"{len(failures)} records could not be decomposed", EXIT_IO, failures=failures[:20])


def cmd_filter(args, cfg):
    flt = _section(cfg, "filters")
    threshold = _pick(args.score_threshold, flt, "score_threshold")
    pairs = curation.read_pairs(args.pairs)
    n_in = len(pairs)
    report = {"input_pairs": n_in}
    if args.labels:
        records = curation.read_records(args.labels)
        kept_records = curation.filter_metadata(records)
        before = len(pairs)
        pairs = curation.filter_pairs_by_parent(pairs, kept_records)
        report["dropped_metadata"] = before - len(pairs)
    if threshold is not None:
        scores = curation.read_scores(args.scores) if args.scores else None
        res = curation.filter_score(pairs, threshold, scores)
        pairs = res.kept
        report.update(res.report())
    report["output_pairs"] = len(pairs)
    out = Path(args.out)
    _write_effective(out.parent, "filter", {"filters": {"score_threshold": threshold}, "labels": args.labels, "scores": args.scores})
    curation.write_pairs(out, pairs)
    dump_json(out.parent / "filter_report.json", report)


def cmd_stats(args, cfg):
    pairs = curation.read_pairs(args.pairs)
    token_counts = None
    if args.token_counts:
        token_counts = {}
        for lineno, obj in formats.iter_jsonl(args.token_counts):
            try:
                formats.check_keys(obj, ("subfigure_id", "tokens"))
            except ValueError as exc:
                raise formats.FormatError(str(exc), path=args.token_counts, line=lineno)
            token_counts[obj["subfigure_id"]] = obj["tokens"]
    modalities = curation.primary_modality(curation.read_records(args.records)) if args.records else None
    try:
        stats = curation.corpus_stats(pairs, args.tokenizer, token_counts, modalities)
    except ValueError as exc:
        raise CliError("invalid_input", str(exc), EXIT_INVALID)
    out = Path(args.out)
    _write_effective(out.parent, "stats", {"tokenizer": args.tokenizer})
    dump_json(out, stats)


def cmd_eval_retrieval(args, cfg):
    ks = _ints(args.k) if args.k else _section(cfg, "retrieval").get("k", [10, 50, 200])
    img = formats.read_embeddings(args.image_emb)
    txt = formats.read_embeddings(args.text_emb)
    report = embed.retrieval_report(img, txt, ks)
    out = Path(args.out)
    _write_effective(out.parent, "eval-retrieval", {"retrieval": {"k": list(ks)}})
    dump_json(out, report)


def cmd_eval_zeroshot(args, cfg):
    img = formats.read_embeddings(args.image_emb)
    cls = formats.read_embeddings(args.class_emb)
    labels = _read_json(args.labels)
    if not isinstance(labels, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in labels):
        raise CliError("invalid_input", "labels must be a JSON array of class indices", EXIT_INVALID)
    f1 = embed.zero_shot_f1(img, cls, np.asarray(labels, dtype=np.int64))
    out = Path(args.out)
    _write_effective(out.parent, "eval-zeroshot", {})
    dump_json(out, {"macro_f1": f1, "n_images": img.n, "n_classes": cls.n})


def _parse_spec(text):
    kind, _, mag = text.partition(":")
    return perturb.PerturbationSpec(kind, float(mag) if mag else None)


def cmd_perturb(args, cfg):
    if args.spec:
        specs = [_parse_spec(s) for s in args.spec]
    else:
        specs = [perturb.PerturbationSpec.from_dict(d) for d in (cfg or {}).get("perturbations", [])]
    if not specs:
        raise CliError("invalid_input", "no perturbations given (--spec or config perturbations)", EXIT_INVALID)
    src = Path(args.images)
    if not src.is_dir():
        raise CliError("io_error", f"image directory {src} does not exist", EXIT_IO)
    out = Path(args.out)
    _write_effective(out, "perturb", {"perturbations": [s.to_dict() for s in specs]})
    counts = perturb.perturb_directory(src, specs, out)
    dump_json(out / "perturb_report.json", counts)


def cmd_robustness(args, cfg):
    perturbed = {}
    for item in args.perturbed:
        name, sep, value = item.partition("=")
        if not sep:
            raise CliError("invalid_input", f"expected name=value, got {item!r}", EXIT_INVALID)
        perturbed[name] = float(value)
    ratios, mean = embed.robustness_ratio(args.clean, perturbed)
    out = Path(args.out)
    _write_effective(out.parent, "robustness", {"clean": args.clean})
    dump_json(out, {"clean": args.clean, "ratios": ratios, "mean_ratio": mean})


def cmd_wilcoxon(args, cfg):
    a, b = _read_json(args.a), _read_json(args.b)
    res = embed.wilcoxon_signed_rank(a, b)
    out = Path(args.out)
    _write_effective(out.parent, "wilcoxon", {})
    dump_json(out, res.to_dict())


def cmd_mmd(args, cfg):
    sec = _section(cfg, "mmd")
    perms = _pick(args.permutations, sec, "permutations", 100)
    sigma = _pick(args.sigma, sec, "kernel_sigma")
    seed = _pick(args.seed, sec, "seed", 0)
    x = formats.read_embeddings(args.x)
    y = formats.read_embeddings(args.y)
    res = embed.mmd_permutation_test(x, y, perms, sigma, seed)
    out = Path(args.out)
    _write_effective(out.parent, "mmd", {"mmd": {"permutations": perms, "kernel_sigma": sigma, "seed": seed}})
    dump_json(out, res.to_dict())


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors: exit 1 with a JSON diagnostic
    def error(self, message):
        raise CliError("usage", message, EXIT_INVALID, prog=self.prog)


def build_parser():
    p = _Parser(prog="figforge", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run configuration")
        sp.set_defaults(func=func)
        return sp

    sp = add("generate", cmd_generate, "render a synthetic compound-figure corpus")
    sp.add_argument("--pool", help="panel pool index (JSONL)")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)

    sp = add("export-coco", cmd_export_coco, "convert a manifest to COCO annotations")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval-detect", cmd_eval_detect, "mAP and F1 of detections against a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iou-thresholds", help="comma-separated, e.g. 0.5,0.75")
    sp.add_argument("--f1-iou", type=float)
    sp.add_argument("--score-threshold", type=float)

    sp = add("decompose", cmd_decompose, "crop detected subfigures out of compound figures")
    sp.add_argument("--records", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--images", required=True, help="directory that record image paths are relative to")
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-score", type=float)
    sp.add_argument("--nms-iou", type=float)

    sp = add("filter", cmd_filter, "metadata and relevance-score filtering of pairs")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--labels", help="compound records JSONL with modality labels")
    sp.add_argument("--score-threshold", type=float)
    sp.add_argument("--scores", help="JSONL {subfigure_id, score}; defaults to the pair score")
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "caption and corpus statistics")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--tokenizer", choices=("whitespace", "external_token_counts"), default="whitespace")
    sp.add_argument("--token-counts", help="JSONL {subfigure_id, tokens}")
    sp.add_argument("--records", help="compound records, for modality shares")
    sp.add_argument("--out", required=True)

    sp = add("eval-retrieval", cmd_eval_retrieval, "image/text Recall@K")
    sp.add_argument("--image-emb", required=True)
    sp.add_argument("--text-emb", required=True)
    sp.add_argument("--k", help="comma-separated cutoffs (default 10,50,200)")
    sp.add_argument("--out", required=True)

    sp = add("eval-zeroshot", cmd_eval_zeroshot, "zero-shot macro-F1")
    sp.add_argument("--image-emb", required=True)
    sp.add_argument("--class-emb", required=True)
    sp.add_argument("--labels", required=True, help="JSON array of class indices")
    sp.add_argument("--out", required=True)

    sp = add("perturb", cmd_perturb, "write perturbed copies of an image directory")
    sp.add_argument("--images", required=True)
    sp.add_argument("--spec", action="append", help="kind[:magnitude], repeatable")
    sp.add_argument("--out", required=True)

    sp = add("robustness", cmd_robustness, "perturbed / clean metric ratios")
    sp.add_argument("--clean", type=float, required=True)
    sp.add_argument("--perturbed", action="append", required=True, help="name=value, repeatable")
    sp.add_argument("--out", required=True)

    sp = add("wilcoxon", cmd_wilcoxon, "paired Wilcoxon signed-rank test")
    sp.add_argument("--a", required=True, help="JSON array")
    sp.add_argument("--b", required=True, help="JSON array")
    sp.add_argument("--out", required=True)

    sp = add("mmd", cmd_mmd, "MMD permutation test between two embedding sets")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True)
    sp.add_argument("--permutations", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    return p


def _report(code, message, **context):
    print(json.dumps({"code": code, "message": message, "context": context}, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        _report(exc.code, str(exc), **exc.context)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        args.func(args, cfg)
    except CliError as exc:
        _report(exc.code, str(exc), **exc.context)
        return exc.exit_code
    except formats.FormatError as exc:
        _report("invalid_input", str(exc), path=str(exc.path) if exc.path else None, line=exc.line, offset=exc.offset)
        return EXIT_INVALID
    except (FigforgeError, ValueError) as exc:
        _report("invalid_input", str(exc), command=args.command)
        return EXIT_INVALID
    except OSError as exc:
        _report("io_error", str(exc), command=args.command, path=getattr(exc, "filename", None))
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
