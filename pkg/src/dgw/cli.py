"""Command-line entry point: ``dgw gen-data | train | eval | export-masks | compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, datagen, trainer
from .numcore import ContractError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMPARE_KEYS = ("unbiased_accuracy", "conflicting_accuracy", "aligned_accuracy", "ece", "nll",
                "v_score_intrinsic", "v_score_bias")


def _threshold(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= analysis.MAX_THRESHOLD:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, {analysis.MAX_THRESHOLD}], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgw", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic biased dataset")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--side", type=int, default=16)
    g.add_argument("--n-train", type=int, default=5000)
    g.add_argument("--n-test", type=int, default=1000)
    g.add_argument("--rho", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory for train.dgwd / test.dgwd")

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--vanilla", action="store_true", help="plain CE baseline: no workspace, no weights, no swap")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bins-out", help="optional CSV of the 15 reliability bins")

    m = sub.add_parser("export-masks", help="write CA attention masks as CSV and PGM")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--threshold", type=_threshold, default=0.0)
    m.add_argument("--out", required=True)
    m.add_argument("--limit", type=int, default=16, help="number of samples to export")

    c = sub.add_parser("compare", help="metric deltas between two run directories (b - a)")
    c.add_argument("--run-a", required=True)
    c.add_argument("--run-b", required=True)
    c.add_argument("--data", help="dataset file for the encoder CKA matrix")
    c.add_argument("--cka-out", help="CSV path for the layer-by-layer CKA matrix (needs --data)")
    return p


def _load_for_eval(ckpt, data):
    model, _, cfg, _ = trainer.load_checkpoint(ckpt)
    ds = datagen.load(data)
    if ds.side != cfg.side or ds.num_classes != cfg.num_classes:
        raise trainer.ConfigError(
            f"checkpoint expects K={cfg.num_classes}, side={cfg.side} (input {model.dims.in_dim}); "
            f"data has K={ds.num_classes}, side={ds.side} (input {3 * ds.side * ds.side})")
    return model, cfg, ds


def cmd_gen_data(args) -> int:
    train, test = datagen.generate(args.classes, args.side, args.n_train, args.n_test, args.rho, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datagen.save(train, out / "train.dgwd")
    datagen.save(test, out / "test.dgwd")
    for ds in (train, test):
        s = ds.summary()
        print(f"{s['split']}: n: {s['n']} aligned: {s['aligned']} conflicting: {s['conflicting']}")
    print(f"rho: {args.rho} seed: {args.seed} classes: {args.classes} side: {args.side}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"vanilla": True} if args.vanilla else {}
    cfg = trainer.TrainConfig.from_file(args.config, **overrides)
    run_dir = trainer.train(cfg)
    print((run_dir / "eval.json").read_text().strip())
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, ds = _load_for_eval(args.checkpoint, args.data)
    print(json.dumps(analysis.evaluate(model, ds).to_dict(), sort_keys=True))
    if args.bins_out:
        probs = analysis.softmax_np(model.predict(ds.flat()))
        analysis.write_reliability_csv(args.bins_out, probs.max(axis=1), probs.argmax(axis=1) == ds.labels)
    return EXIT_OK


def cmd_export_masks(args) -> int:
    model, cfg, ds = _load_for_eval(args.checkpoint, args.data)
    files = analysis.export_masks(model, ds.flat()[:args.limit], args.out, args.threshold, cfg.seed)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def _final_report(run_dir) -> dict:
    return json.loads((Path(run_dir) / "eval.json").read_text())


def cmd_compare(args) -> int:
    if bool(args.data) != bool(args.cka_out):
        raise trainer.ConfigError("--data and --cka-out must be given together")
    a, b = _final_report(args.run_a), _final_report(args.run_b)
    deltas = {}
    for k in COMPARE_KEYS:
        deltas[k] = None if a.get(k) is None or b.get(k) is None else b[k] - a[k]
    print(json.dumps({"run_a": str(args.run_a), "run_b": str(args.run_b), "delta": deltas}, sort_keys=True))
    if args.cka_out:
        model_a, *_ = trainer.load_checkpoint(trainer.final_checkpoint(args.run_a))
        model_b, *_ = trainer.load_checkpoint(trainer.final_checkpoint(args.run_b))
        x = datagen.load(args.data).flat()
        analysis.write_csv(args.cka_out, analysis.cka_matrix(model_a, model_b, x))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "export-masks": cmd_export_masks, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (trainer.ConfigError, ContractError, datagen.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
