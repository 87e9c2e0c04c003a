"""Command-line pipeline: split, extract, train, predict, eval, gen-defects, bench.

Every flag can also come from a JSON config file (``--config``) whose keys are
the flag names with dashes replaced by underscores; explicit flags win.
``SEGAD_THREADS`` caps the number of worker threads.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import brf, core, defectgen, metrics, stats, synthetic
from .errors import SegadError, ValidationError
from .io import read_amap, read_pnm, read_segmap, write_pnm

logger = logging.getLogger("segad")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4


class StageError(SegadError):
    def __init__(self, stage: str, artifact, cause: BaseException):
        self.stage, self.artifact, self.cause = stage, artifact, cause
        super().__init__(f"stage '{stage}' failed on {artifact}: {cause}")


@contextlib.contextmanager
def stage(name: str, artifact):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, artifact, exc) from exc


def exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, (ValidationError, ValueError, KeyError)):
        return EXIT_VALIDATION
    if isinstance(cause, OSError):
        return EXIT_IO
    return EXIT_INTERNAL


def threads() -> int:
    try:
        return max(1, int(os.environ.get("SEGAD_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------- #
# Provenance

_NOT_HASHED = {"out", "config", "func", "command", "verbose"}


def config_hash(args: argparse.Namespace) -> str:
    d = {k: v for k, v in vars(args).items() if k not in _NOT_HASHED}
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(args: argparse.Namespace, seed=None) -> dict:
    p = {"command": args.command, "config_sha256": config_hash(args)}
    if seed is not None:
        p["seed"] = seed
    return p


def provenance_line(p: dict) -> str:
    return "segad " + " ".join(f"{k}={v}" for k, v in p.items())


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def parse_seeds(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    seeds = [int(s) for s in str(text).split(",") if s.strip()]
    if not seeds:
        raise ValidationError("seed list is empty")
    return seeds


def brf_config(args, seed: int) -> brf.BrfConfig:
    cfg = brf.preset(args.preset)
    if getattr(args, "brf", None):
        cfg = brf.BrfConfig.from_dict({**asdict(cfg), **args.brf})
    return replace(cfg, seed=seed)


def feature_config(args, variant="full", one_segment=False) -> stats.FeatureConfig:
    return stats.FeatureConfig(stats.Setup.parse(args.setup), args.detector, variant, one_segment)


# --------------------------------------------------------------------------- #
# Scores CSV: id,label,score

def format_scores(ids, labels, scores, comments=()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "score"])
    for i, y, s in zip(ids, labels, scores):
        w.writerow([i, "bad" if y else "good", repr(float(s))])
    return buf.getvalue()


def read_scores(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(ln for ln in fh.read().split("\n") if ln and not ln.startswith("#")))
    if not rows or rows[0] != ["id", "label", "score"]:
        raise ValidationError(f"{path}: scores CSV must have header id,label,score")
    ids = [r[0] for r in rows[1:]]
    labels = np.array([r[1] == "bad" for r in rows[1:]], dtype=np.int64)
    scores = np.array([float(r[2]) for r in rows[1:]])
    return ids, labels, scores


def read_features(path):
    with open(path, encoding="utf-8") as fh:
        return stats.parse_features_csv(fh.read())


# --------------------------------------------------------------------------- #
# Commands

def cmd_split(args) -> int:
    with stage("split", args.manifest):
        manifest = core.load_manifest(args.manifest)
        out = core.split_dataset(manifest, args.protocol, args.seed, args.n_bad, args.base_fraction)
    with stage("split", args.out):
        core.write_manifest(out, args.out, [provenance_line(provenance(args, args.seed))])
    counts = {t.value: out.count(t) for t in core.SplitTag}
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_extract(args) -> int:
    with stage("extract", args.manifest):
        manifest = core.load_manifest(args.manifest)
        seg = read_segmap(args.segmap)
        fc = feature_config(args, args.variant, args.one_segment)
        tags = args.tag.split(",") if args.tag else None
        X, y, ids = stats.extract_corpus(manifest, seg, tags, fc, threads())
        names = stats.corpus_layout(manifest, seg, fc).names()
    with stage("extract", args.out):
        write_text(args.out, stats.format_features_csv(X, y, ids, names, [provenance_line(provenance(args))]))
    print(f"{X.shape[0]} rows x {X.shape[1]} features -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    with stage("train", args.features):
        X, y, _, _ = read_features(args.features)
        model = brf.train(X, y, brf_config(args, args.seed), threads())
    with stage("train", args.out):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        brf.save_model(model, args.out, provenance(args, args.seed))
    print(f"trained {model.config.num_rounds}x{model.config.trees_per_round} trees -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    with stage("predict", args.model):
        model = brf.load_model(args.model)
    with stage("predict", args.features):
        X, y, ids, _ = read_features(args.features)
        scores = brf.predict_margin(model, X)
    with stage("predict", args.out):
        write_text(args.out, format_scores(ids, y, scores, [provenance_line(provenance(args))]))
    return EXIT_OK


def cmd_eval(args) -> int:
    with stage("eval", args.scores):
        ids, labels, scores = read_scores(args.scores)
        if args.manifest:
            by_id = {s.id: int(s.label) for s in core.load_manifest(args.manifest).samples}
            labels = np.array([by_id[i] for i in ids])
        report = metrics.evaluate(scores, labels, args.target_tpr)
    text = dump_json({"provenance": provenance(args), **report.to_dict()})
    if args.out:
        with stage("eval", args.out):
            write_text(args.out, text)
    if args.csv_row:
        sys.stdout.write(metrics.report_csv_row(args.csv_row, args.seed, report))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_defects(args) -> int:
    with stage("gen-defects", args.segmap):
        seg = read_segmap(args.segmap)
    with stage("gen-defects", args.images):
        files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
        if not files:
            raise ValidationError(f"no .pgm/.ppm images in {args.images}")
        images = [(p.stem, read_pnm(p)) for p in files]
    opts = defectgen.DefectOptions(exclude_segments=tuple(args.exclude_segments or ()))
    with stage("gen-defects", args.out):
        corpus = defectgen.generate_corpus(images, seg, args.n, args.seed, opts)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, (img, sid) in enumerate(zip(corpus.images, corpus.sources)):
            write_pnm(img, out / f"defect_{i:05d}_{sid}{'.ppm' if img.ndim == 3 else '.pgm'}")
        write_text(out / "specs.csv", defectgen.format_spec_log(corpus.log))
    print(f"{len(corpus.images)} defective images -> {args.out}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = synthetic.SyntheticConfig(n_good=args.n_good, n_bad=args.n_bad, size=args.size,
                                    num_detectors=args.detectors, with_score=args.with_score, seed=args.seed)
    with stage("make-synthetic", args.out):
        manifest, segmap = synthetic.make_corpus(args.out, cfg)
    print(f"{manifest}\n{segmap}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Benchmark

VARIANTS = (
    ("segad", "full", False),
    ("max", "max", False),
    ("one_seg", "full", True),
)


def global_max_matrix(manifest: core.DatasetManifest, detectors) -> np.ndarray:
    out = np.empty((len(manifest.samples), len(detectors)))
    for i, s in enumerate(manifest.samples):
        for j, k in enumerate(detectors):
            out[i, j] = stats.global_max(read_amap(manifest.resolve(s.anomaly_map_paths[k])))
    return out


def detector_importance(model: brf.BrfModel, layout: stats.FeatureLayout, detectors) -> dict:
    imp = model.feature_importance()
    total = imp.sum() or 1.0
    by = {}
    for i, v in enumerate(imp):
        loc = layout.locate(i)
        key = "classifier_score" if loc is None else f"detector_{detectors[loc[1]]}"
        by[key] = by.get(key, 0.0) + float(v / total)
    return by


def run_bench(args) -> dict:
    """Per seed: split, train every variant, score the test split, evaluate."""
    out = Path(args.out)
    seeds = parse_seeds(args.seeds)
    with stage("bench:load", args.manifest):
        manifest = core.load_manifest(args.manifest)
        seg = read_segmap(args.segmap)

    features = {}
    for name, variant, one_seg in VARIANTS:
        fc = feature_config(args, variant, one_seg)
        with stage(f"bench:extract[{name}]", args.manifest):
            X, y, ids = stats.extract_corpus(manifest, seg, None, fc, threads())
            features[name] = (X, stats.corpus_layout(manifest, seg, fc))
    detectors = feature_config(args).detectors(manifest.num_detectors)
    with stage("bench:extract[global_max]", args.manifest):
        gmax = global_max_matrix(manifest, detectors)

    rows = []
    per_seed = []
    for seed in seeds:
        sdir = out / f"seed_{seed}"
        prov = provenance(args, seed)
        with stage("bench:split", f"seed {seed}"):
            split = core.split_dataset(manifest, args.protocol, seed, args.n_bad, args.base_fraction)
            sdir.mkdir(parents=True, exist_ok=True)
            core.write_manifest(split, sdir / "manifest.csv", [provenance_line(prov)])
        train_mask = np.array([s.split_tag == core.SplitTag.SEGAD_TRAIN for s in split.samples])
        test_mask = np.array([s.split_tag == core.SplitTag.TEST for s in split.samples])
        seed_report = {"seed": seed, "n_train": int(train_mask.sum()), "n_test": int(test_mask.sum()),
                       "methods": {}}
        for name, _, _ in VARIANTS:
            X, layout = features[name]
            model_path = sdir / f"model_{name}.json"
            with stage(f"bench:train[{name}]", model_path):
                model = brf.train(X[train_mask], y[train_mask], brf_config(args, seed), threads())
                brf.save_model(model, model_path, prov)
            with stage(f"bench:predict[{name}]", model_path):
                scores = brf.predict_margin(model, X[test_mask])
                write_text(sdir / f"scores_{name}.csv",
                           format_scores(np.array(ids)[test_mask], y[test_mask], scores, [provenance_line(prov)]))
            with stage(f"bench:eval[{name}]", sdir / f"scores_{name}.csv"):
                rep = metrics.evaluate(scores, y[test_mask])
            entry = rep.to_dict()
            if name == "segad":
                entry["importance"] = detector_importance(model, layout, detectors)
            seed_report["methods"][name] = entry
            rows.append((name, seed, rep))
        for j, k in enumerate(detectors):
            name = f"global_max_k{k}"
            with stage(f"bench:eval[{name}]", args.manifest):
                rep = metrics.evaluate(gmax[test_mask, j], y[test_mask])
            seed_report["methods"][name] = rep.to_dict()
            rows.append((name, seed, rep))
        write_text(sdir / "report.json", dump_json({"provenance": prov, **seed_report}))
        per_seed.append(seed_report)
        logger.info("seed %d: %s", seed,
                    {m: round(v["auroc"], 4) for m, v in seed_report["methods"].items()})

    methods = list(per_seed[0]["methods"])
    summary = {}
    for m in methods:
        au = metrics.aggregate([r["methods"][m]["auroc"] for r in per_seed])
        fp = metrics.aggregate([r["methods"][m]["fpr_at_95tpr"] for r in per_seed])
        summary[m] = {"auroc": asdict(au), "fpr_at_95tpr": asdict(fp)}
    report = {
        "provenance": provenance(args),
        "protocol": core.Protocol.parse(args.protocol).value,
        "setup": args.setup,
        "preset": args.preset,
        "brf_config": {k: v for k, v in asdict(brf_config(args, 0)).items() if k != "seed"},
        "seeds": seeds,
        "per_seed": per_seed,
        "summary": summary,
    }
    write_text(out / "report.json", dump_json(report))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "auroc", "fpr_at_95tpr"])
    for name, seed, rep in rows:
        w.writerow([name, seed, repr(rep.auroc), repr(rep.fpr_at_95tpr)])
    write_text(out / "ablation.csv", buf.getvalue())
    return report


def format_summary(report: dict) -> str:
    lines = [f"{'method':<18} {'Cl. AUROC':>20} {'FPR@95TPR':>20}"]
    rank = {name: i for i, (name, _, _) in enumerate(VARIANTS)}
    for m, s in sorted(report["summary"].items(), key=lambda kv: (rank.get(kv[0], len(rank)), kv[0])):
        a, f = s["auroc"], s["fpr_at_95tpr"]
        lines.append(f"{m:<18} {a['mean'] * 100:>12.1f} ± {a['std'] * 100:<5.1f}"
                     f" {f['mean'] * 100:>12.1f} ± {f['std'] * 100:<5.1f}")
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    report = run_bench(args)
    sys.stdout.write(format_summary(report))
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser

def _protocol(text):
    return core.Protocol.parse(text).value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segad", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        return sp

    def features_opts(sp):
        sp.add_argument("--setup", default="all_ad", choices=[s.value for s in stats.Setup])
        sp.add_argument("--detector", type=int, default=0, help="detector index for --setup single_ad")

    sp = add("split", cmd_split, "assign split tags to a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", type=_protocol, default="high_shot")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-bad", type=int, default=100)
    sp.add_argument("--base-fraction", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "write a feature CSV")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--segmap", required=True)
    sp.add_argument("--tag", help="comma-separated split tags to keep (default: all samples)")
    sp.add_argument("--variant", default="full", choices=[v.value for v in stats.Variant])
    sp.add_argument("--one-segment", action="store_true")
    features_opts(sp)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model on a feature CSV")
    sp.add_argument("--features", required=True)
    sp.add_argument("--preset", default="brf", choices=["brf", "rf", "bt"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(brf=None)

    sp = add("predict", cmd_predict, "score a feature CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "AUROC and FPR@95TPR of a scores CSV")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--manifest", help="take labels from this manifest instead of the scores file")
    sp.add_argument("--target-tpr", type=float, default=0.95)
    sp.add_argument("--csv-row", metavar="METHOD", help="print a CSV row (method,seed,auroc,fpr) instead")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("gen-defects", cmd_gen_defects, "perturb good images into a defect corpus")
    sp.add_argument("--images", required=True, help="directory of .pgm/.ppm good images")
    sp.add_argument("--segmap", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--exclude-segments", type=lambda s: [int(x) for x in s.split(",") if x], default=None)
    sp.add_argument("--out", required=True)

    sp = add("bench", cmd_bench, "full pipeline over several seeds with ablation baselines")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--segmap", required=True)
    sp.add_argument("--protocol", type=_protocol, default="high_shot")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--preset", default="brf", choices=["brf", "rf", "bt"])
    sp.add_argument("--n-bad", type=int, default=100)
    sp.add_argument("--base-fraction", type=float, default=0.5)
    features_opts(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(brf=None)

    sp = add("make-synthetic", cmd_make_synthetic, "write a synthetic anomaly-map corpus")
    sp.add_argument("--n-good", type=int, default=2000)
    sp.add_argument("--n-bad", type=int, default=600)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--detectors", type=int, default=1)
    sp.add_argument("--with-score", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            defaults = json.load(fh)
        if not isinstance(defaults, dict):
            raise ValidationError(f"{known.config}: config must be a JSON object")
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in subparsers), None)
        if command is not None:
            # File values become defaults, so explicit flags still win and
            # required flags may come from the file.
            sub = subparsers[command]
            for action in sub._actions:
                if action.dest in defaults:
                    action.required = False
            sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SegadError as exc:
        print(f"segad: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"segad: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # staged errors and anything unexpected
        print(f"segad: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
