"""Operator entry point: dataset synthesis, training, evaluation, gradient
checking, scan benchmarking, and embedding-container validation.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
Every subcommand is deterministic under --seed in f64 apart from the
wall-clock timing columns of bench-scan.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_precision(precision):
    from .tensor import set_default_dtype

    set_default_dtype(np.float32 if precision == "f32" else np.float64)


def _network_config(preset, num_classes, input_size=None):
    from .network import desk_config, paper_config

    if preset == "desk":
        cfg = desk_config(num_classes=num_classes)
    else:
        cfg = paper_config(num_classes=num_classes)
    if input_size:
        from dataclasses import replace

        cfg = replace(cfg, input_size=tuple(input_size))
    return cfg


def cmd_synth(args) -> int:
    from .volume import save_dataset, synth_generate

    if args.size < 12:
        print(f"error: --size {args.size} too small to place shapes", file=sys.stderr)
        return EXIT_VALIDATION
    cases, names = synth_generate(args.seed, args.count, args.classes, size=(args.size,) * 3)
    save_dataset(cases, names, args.out, seed=args.seed)
    print(f"wrote {len(cases)} volumes with classes {names} to {args.out}")
    return EXIT_OK


def _load_embedding_set(args, class_names, fallback_path=None):
    from .textbridge import load_embeddings, synth_embeddings

    if args.embeddings and os.path.exists(args.embeddings):
        return load_embeddings(args.embeddings)
    if args.embeddings and not args.fallback_synth_embeddings:
        print(f"error: embeddings file {args.embeddings} not found "
              "(pass --fallback-synth-embeddings to substitute synthetic vectors)", file=sys.stderr)
        return None
    if fallback_path and os.path.exists(fallback_path):
        print(f"note: using embeddings saved by the training run: {fallback_path}", file=sys.stderr)
        return load_embeddings(fallback_path)
    where = args.embeddings or "(none given)"
    print(f"warning: embeddings {where} unavailable; using synthetic vectors", file=sys.stderr)
    return synth_embeddings(class_names, args.seed)


def cmd_train(args) -> int:
    from .network import SegNetwork
    from .trainer import NumericFailure, OptimConfig, evaluate_dice, train
    from .volume import PreprocessConfig, load_dataset

    _apply_precision(args.precision)
    try:
        cases, names = load_dataset(args.data)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: cannot load dataset: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    size = cases[0].volume.extents
    cfg = _network_config(args.preset, len(names), input_size=size)
    try:
        emb = _load_embedding_set(args, names)
        if emb is None:
            return EXIT_VALIDATION
        e_label = emb.matrix(names, branch=1)
        e_desc = emb.matrix(names, branch=2)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    from .textbridge import save_embeddings

    os.makedirs(args.out, exist_ok=True)
    save_embeddings(emb, os.path.join(args.out, "embeddings_used.json"))
    model = SegNetwork(cfg, seed=args.seed)
    warmup = max(1, round(args.steps * 50 / 2000))  # paper warmup fraction
    ocfg = OptimConfig(lr=args.lr, weight_decay=args.weight_decay, steps=args.steps, warmup_steps=warmup)
    pp = PreprocessConfig(crop_size=cfg.input_size, augment=args.augment)
    try:
        ckpt, history = train(
            cases, model, e_label, e_desc, ocfg, pp, args.out,
            seed=args.seed, ckpt_every=args.ckpt_every, resume_from=args.resume,
        )
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    dice = evaluate_dice(model, cases, e_label, e_desc, pp)
    print(f"finished {args.steps} steps; train dice {dice:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import tensor as T
    from .metrics import SurfaceSpec, per_class_metrics
    from .network import load_checkpoint
    from .tensor import Tensor
    from .trainer import _batch_from_case
    from .volume import PreprocessConfig, load_dataset, preprocess

    _apply_precision(args.precision)
    try:
        cases, names = load_dataset(args.data)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: cannot load dataset: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    use_gt = args.use_gt_as_pred
    model = None
    e_label = e_desc = None
    if not use_gt:
        if not args.checkpoint:
            print("error: --checkpoint required (or pass --use-gt-as-pred)", file=sys.stderr)
            return EXIT_VALIDATION
        try:
            model, _, _ = load_checkpoint(args.checkpoint)
        except (OSError, ValueError) as e:
            print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        model.eval()
        saved = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "embeddings_used.json")
        try:
            emb = _load_embedding_set(args, names, fallback_path=saved)
            if emb is None:
                return EXIT_VALIDATION
            e_label = emb.matrix(names, branch=1)
            e_desc = emb.matrix(names, branch=2)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_VALIDATION

    pp = PreprocessConfig(crop_size=model.config.input_size if model else cases[0].volume.extents, augment=False)
    rows = []
    for case in cases:
        v, l = preprocess(case.volume, case.label, pp, None, "center")
        if use_gt:
            pred = l.data.data
        else:
            dtype = model.parameters()[0].dtype.type
            with T.no_grad():
                out = model(Tensor(v.data.data[None].astype(dtype)), e_label, e_desc)
            pred = out.masks[0]
        spec = SurfaceSpec(tolerance_mm=args.tolerance_mm, spacing_mm=v.spacing_mm)
        for k, scores in enumerate(per_class_metrics(pred, l.data.data, spec)):
            rows.append((case.case_id, names[k], scores["dice"], scores["nsd"]))
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("case_id", "class", "dice", "nsd"))
        for row in rows:
            writer.writerow((row[0], row[1], repr(row[2]), repr(row[3])))
    mean_dice = float(np.mean([r[2] for r in rows])) if rows else float("nan")
    print(f"wrote {len(rows)} rows to {args.out}; mean dice {mean_dice:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import negative_control, run_registered

    _apply_precision("f64")  # finite differences need the headroom
    nc = negative_control()
    if nc.passed:
        print("self-test FAILED: the checker accepted a deliberately wrong gradient", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"self-test ok: wrong-gradient fixture rejected (rel err {nc.max_rel_err:.2e})")
    results = run_registered(args.module, trials=args.trials, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:22s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g} kinks_skipped={r.skipped_kinks}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_bench_scan(args) -> int:
    from .bench import bench_scan, check_scaling

    lengths = [int(s) for s in args.lengths.split(",")]
    rows = bench_scan(lengths, repeats=args.repeats, seed=args.seed, include_quadratic=not args.no_quadratic)
    cols = ["length", "sequential_ms", "parallel_ms"] + ([] if args.no_quadratic else ["quadratic_ms"])
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] if c == "length" else repr(row[c]) for c in cols])
    for row in rows:
        print("  ".join(f"{c}={row[c]:.2f}" if c != "length" else f"L={row[c]}" for c in cols))
    if args.check:
        try:
            ratios = check_scaling(rows)
        except (AssertionError, ValueError) as e:
            print(f"scaling check failed: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"scaling ok: parallel doubling ratios {[round(r, 2) for r in ratios]}")
    return EXIT_OK


def cmd_check_embeddings(args) -> int:
    from .textbridge import load_embeddings

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            emb = load_embeddings(args.file)
    except (OSError, ValueError) as e:
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    n1 = len(emb.class_names(branch=1))
    n2 = len(emb.class_names(branch=2))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"OK dim={emb.dim} classes_branch1={n1} classes_branch2={n2} warnings={len(caught)}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="triseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", choices=("f32", "f64"), default="f64")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--fallback-synth-embeddings", action="store_true")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--ckpt-every", type=int, default=100)
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; emits per-class CSV")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--embeddings")
    p.add_argument("--fallback-synth-embeddings", action="store_true")
    p.add_argument("--tolerance-mm", type=float, default=2.0)
    p.add_argument("--use-gt-as-pred", action="store_true",
                   help="score ground truth against itself (metric smoke test)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for registered ops")
    common(p)
    p.add_argument("--module", default="all",
                   choices=("all", "tensor", "ssm", "blocks", "network", "metrics"))
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time scan kernels; emits CSV")
    common(p)
    p.add_argument("--lengths", default="4096,8192,16384")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-quadratic", action="store_true")
    p.add_argument("--check", action="store_true", help="assert scaling ratios")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("check-embeddings", help="validate an embedding container file")
    p.add_argument("file")
    p.set_defaults(fn=cmd_check_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
