"""Command-line entry point: gen-dataset, train, eval-pairs, rank-set."""
from __future__ import annotations

import argparse
import json
import logging
import re
import shutil
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from . import distortion as dist
from . import model as M
from . import ranking as R
from . import report
from .errors import NoQualifyingRoi, RankDistError
from .imaging import average_ranks, list_images, load_image

log = logging.getLogger("rankdist")

_LEVEL_RE = re.compile(r"_level(\d+(?:\.\d+)?)$")


class CommandError(Exception):
    """A user-facing failure that maps to exit status 1."""


def level_from_name(path) -> float:
    m = _LEVEL_RE.search(Path(path).stem)
    if not m:
        raise CommandError(f"cannot parse level from file name {Path(path).name!r} (expected *_level<k>)")
    return float(m.group(1))


# -- gen-dataset ------------------------------------------------------------


def _synthetic_sources(kind, count, size, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    sources = []
    for i in range(count):
        sub = np.random.default_rng(rng.integers(2**63))
        if kind == dist.MOIRE:
            sources.append(D.Source(f"chart{i:05d}", pattern=dist.sample_pattern_spec(sub, size)))
        else:
            sources.append(D.Source(f"scene{i:05d}", image=dist.dead_leaves(size, sub)))
    return sources


def _directory_sources(directory, count=None):
    paths = list_images(directory)
    if count:
        paths = paths[:count]
    return [D.Source(p.stem, image=load_image(p)) for p in paths]


def cmd_gen_dataset(args) -> int:
    out = Path(args.out)
    created = not out.exists()
    try:
        if args.sources == "synthetic":
            size = args.size or (320 if args.kind == dist.MOIRE else 256)
            sources = _synthetic_sources(args.kind, args.count, size, args.seed)
        else:
            src_dir = Path(args.sources)
            if not src_dir.is_dir():
                raise CommandError(f"source directory {src_dir} does not exist")
            sources = _directory_sources(src_dir, args.count)
        if not sources:
            raise CommandError("no source images")
        manifest = D.build_corpus(sources, args.kind, args.pairs_per_source, args.max_rois,
                                  args.seed, out, workers=args.workers)
    except BaseException:
        if created and out.exists():
            shutil.rmtree(out, ignore_errors=True)
        raise
    c = manifest.counts
    print(f"kind: {args.kind}")
    print(f"sources: {len(sources)}")
    print(f"pairs: {c['total']} (train {c['train']}, val {c['val']}, test {c['test']})")
    print(f"skipped image pairs: {c['skipped']}")
    print(f"manifest: {out / D.MANIFEST_NAME}")
    return 0


# -- train ------------------------------------------------------------------

HISTORY_FIELDS = ["batch", "epoch", "train_loss", "val_tp"]


def cmd_train(args) -> int:
    manifest = D.CorpusManifest.read(args.manifest)
    cfg = M.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
        momentum=args.momentum, weight_decay=args.weight_decay, epsilon=args.epsilon,
        seed=args.seed, eval_every=args.eval_every,
    )
    model = M.init_model(args.arch, args.seed, epsilon=args.epsilon)
    best, history = M.train(model, manifest, cfg)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else ckpt.with_suffix(".history.csv")
    M.save_checkpoint(best, ckpt)
    report.write_csv(history_path, HISTORY_FIELDS, history)
    if args.emit_svg and history:
        report.plot_history(history, history_path.with_suffix(".svg"))
    va, vb, _, _ = manifest.load_patches("val")
    print(f"checkpoint: {ckpt}")
    print(f"history: {history_path} ({len(history)} rows)")
    print(f"val TP: {M.evaluate_tp(best, va, vb):.2f}%")
    return 0


# -- eval-pairs -------------------------------------------------------------

TRIAL_FIELDS = ["trial", "type", "decision", "rho", "n_rois"]


def _level_images(directory):
    paths = list_images(directory)
    return [(load_image(p), level_from_name(p)) for p in paths], paths


def cmd_eval_pairs(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval_pairs.csv"
    if args.manifest:
        manifest = D.CorpusManifest.read(args.manifest)
        xa, xb, la, lb = manifest.load_patches(args.split)
        if len(xa) == 0:
            raise CommandError(f"split {args.split!r} is empty")
        sa, sb = M._score_all(model, xa), M._score_all(model, xb)
        tp, ties, false = R.pair_outcome_rates(sa, sb)
        rows = []
        for i, (a, b) in enumerate(zip(sa, sb)):
            decision = R._compare(float(a), float(b))
            rows.append({"trial": i, "type": "pair", "decision": decision, "n_rois": 1})
        report.write_csv(csv_path, TRIAL_FIELDS, rows,
                         summary={"trial": "summary", "type": "tp_percent", "decision": f"{tp:.4f}"})
        if args.emit_svg:
            report.plot_score_vs_level(np.r_[la, lb], np.r_[sa, sb], out_dir / "score_vs_level.svg")
        print(f"pairs: {len(xa)}")
        print(f"TP: {tp:.2f}% (ties {ties:.2f}%, false {false:.2f}%)")
    else:
        image_set, paths = _level_images(args.images)
        result = R.monte_carlo_pairs(image_set, model, args.trials, args.crop, args.seed, args.max_rois)
        rows = [{"trial": t["trial"], "type": "pair", "decision": t["decision"],
                 "n_rois": t["n_rois"]} for t in result.trials]
        report.write_csv(csv_path, TRIAL_FIELDS, rows,
                         summary={"trial": "summary", "type": "tp_percent",
                                  "decision": f"{result.value:.4f}", "n_rois": f"skipped={result.skipped}"})
        if args.emit_svg:
            _plot_image_scores(model, image_set, out_dir / "score_vs_level.svg", args.max_rois)
        print(f"images: {len(paths)}")
        print(f"trials: {len(result.trials)} (skipped {result.skipped})")
        print(f"TP: {result.value:.2f}%")
    print(f"report: {csv_path}")
    return 0


def _plot_image_scores(model, image_set, path, max_rois):
    images = [im for im, _ in image_set]
    try:
        rects = R.set_rois(images, max_rois)
    except (NoQualifyingRoi, RankDistError) as exc:
        log.warning("no score plot: %s", exc)
        return
    sm = R.score_matrix(model, images, rects)
    report.plot_score_vs_level([lv for _, lv in image_set], np.median(sm.scores, axis=0), path)


# -- rank-set ---------------------------------------------------------------

RANK_FIELDS = ["image", "rank", "median_patch_rank", "expected_rank"]


def _parse_expected(text, n):
    values = [float(v) for v in re.split(r"[,\s]+", text.strip()) if v]
    if len(values) != n:
        raise CommandError(f"--expected has {len(values)} values for {n} images")
    return values


def cmd_rank_set(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    paths = []
    for item in args.images:
        p = Path(item)
        paths.extend(list_images(p) if p.is_dir() else [p])
    if len(paths) < 2:
        raise CommandError("rank-set needs at least two images")
    images = [load_image(p) for p in paths]
    if len({im.shape for im in images}) != 1:
        raise CommandError("images differ in size; rank-set needs registered images")
    expected = None
    if args.expected:
        expected = average_ranks(_parse_expected(args.expected, len(paths)))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [p.name for p in paths]
    if all(np.array_equal(images[0], im) for im in images[1:]):
        ranks = np.full(len(images), (len(images) + 1) / 2.0)
        medians = ranks
        print("tie: all images are identical")
    else:
        rects = R.set_rois(images, args.max_rois)
        sm = R.score_matrix(model, images, rects, names)
        ranks, per_patch = R.rank_image_set(sm)
        medians = np.median(per_patch, axis=0)
        print(f"ROIs: {len(rects)}")
        for pos, k in enumerate(np.argsort(ranks, kind="stable"), start=1):
            print(f"{pos}\t{ranks[k]:g}\t{names[k]}")
        if len(set(ranks.tolist())) < len(ranks):
            print("tie: some images received the same rank")
        if expected is not None:
            rho = R.set_rank_accuracy(per_patch, expected)
            print(f"median rho vs expected: {rho:.4f}")
    rows = [{"image": n, "rank": f"{r:g}", "median_patch_rank": f"{m:g}",
             "expected_rank": "" if expected is None else f"{e:g}"}
            for n, r, m, e in zip(names, ranks, medians,
                                  [None] * len(names) if expected is None else expected)]
    csv_path = report.write_csv(out_dir / "rank_set.csv", RANK_FIELDS, rows)
    if args.emit_svg and expected is not None:
        report.plot_rank_scatter(expected, ranks, out_dir / "rank_set.svg")
    print(f"report: {csv_path}")
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankdist", description="Learn to rank image distortion level")
    parser.add_argument("--config", help="JSON file of option defaults (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="simulate an ordered-pair corpus")
    g.add_argument("--kind", choices=dist.KINDS, required=True)
    g.add_argument("--sources", default="synthetic", help="'synthetic' or a directory of base images")
    g.add_argument("--count", type=int, default=200, help="number of sources")
    g.add_argument("--pairs-per-source", type=int, default=5)
    g.add_argument("--max-rois", type=int, default=8)
    g.add_argument("--size", type=int, default=None, help="synthetic source size in px")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--workers", type=int, default=None)
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_gen_dataset, required_opts=["out"])

    t = sub.add_parser("train", help="train a scorer on a corpus manifest")
    t.add_argument("--manifest", help="manifest.jsonl or its directory")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--history", default=None, help="history CSV (default next to checkpoint)")
    t.add_argument("--arch", default="small-v1", choices=sorted(M.ARCHS))
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--learning-rate", "--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--epsilon", type=float, default=M.DEFAULT_EPSILON)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--emit-svg", action="store_true")
    t.set_defaults(func=cmd_train, required_opts=["manifest", "out"])

    e = sub.add_parser("eval-pairs", help="pairwise ordering accuracy")
    e.add_argument("--checkpoint")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--manifest", help="labelled corpus manifest")
    src.add_argument("--images", help="directory of registered images named *_level<k>.png")
    e.add_argument("--split", default="test", choices=D.SPLITS)
    e.add_argument("--trials", type=int, default=150)
    e.add_argument("--crop", type=int, default=150)
    e.add_argument("--max-rois", type=int, default=8)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out-dir", default=".")
    e.add_argument("--emit-svg", action="store_true")
    e.set_defaults(func=cmd_eval_pairs, required_opts=["checkpoint"])

    r = sub.add_parser("rank-set", help="rank registered images by distortion level")
    r.add_argument("--checkpoint")
    r.add_argument("images", nargs="+", help="image files or a directory")
    r.add_argument("--expected", default=None, help="comma-separated expected ranks or levels")
    r.add_argument("--max-rois", type=int, default=8)
    r.add_argument("--out-dir", default=".")
    r.add_argument("--emit-svg", action="store_true")
    r.set_defaults(func=cmd_rank_set, required_opts=["checkpoint"])
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sp = _subparser(parser, args.command)
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    sp = _subparser(parser, args.command)
    missing = [o for o in args.required_opts if getattr(args, o, None) in (None, "")]
    if missing:
        sp.error("the following arguments are required: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if args.command == "eval-pairs" and not (args.manifest or args.images):
        sp.error("one of --manifest or --images is required")
    if getattr(args, "seed", "absent") is None:
        args.seed = 0
        log.warning("no --seed given, using seed 0")
    return args


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO)
    try:
        return args.func(args)
    except (RankDistError, CommandError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
