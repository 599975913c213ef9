"""Command-line entry point for the full pipeline.

Verbs: synth, mix, embed, fit-diet, eval-diet, train-source, run-tta, report.
Exit codes: 0 success, 2 validation failure, 3 runtime failure (a resume
token was written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, diet, report, synth
from .adapt import METHODS
from .encoder import cache_embeddings, load_encoder, make_toy_encoder, save_encoder
from .errors import AdaptationInterrupted, LadenError
from .experiment import ExperimentConfig, load_config, run_experiment
from .model import AmConfig, AmModel, save_checkpoint, train_source

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laden", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clean/noise corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-utts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=synth.PROFILES, default="source")
    p.add_argument("--min-duration", type=float, default=1.0)
    p.add_argument("--max-duration", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mix", help="build an SNR-mixing manifest")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--snr", type=float, nargs=2, metavar=("LO", "HI"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("embed", help="cache utterance embeddings for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True, help="encoder weights file")
    p.add_argument("--new-toy-seed", type=int, default=None,
                   help="create a toy encoder at --encoder first, with this seed")
    p.add_argument("--dim", type=int, default=64, help="dimension for a new toy encoder")
    p.add_argument("--which", choices=("clean", "noisy", "both"), default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fit-diet", help="fit the noisy-to-clean embedding map")
    p.add_argument("--clean-cache", required=True)
    p.add_argument("--noisy-cache", required=True)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--affine", action="store_true", help="fit an offset too (default: strictly linear)")
    p.add_argument("--manifest-id", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_diet)

    p = sub.add_parser("eval-diet", help="similarity table for one or more datasets")
    p.add_argument("--map", dest="map_path", required=True)
    p.add_argument(
        "--dataset",
        action="append",
        required=True,
        metavar="NAME:CLEAN_CACHE:NOISY_CACHE",
        help="repeatable; caches must match the map's encoder",
    )
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_eval_diet)

    p = sub.add_parser("train-source", help="train the mask model on labeled pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("run-tta", help="run adaptation arms over the stream")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--encoder", dest="encoder_path", default=None)
    p.add_argument("--map", dest="diet_path", default=None)
    p.add_argument("--pesq-cmd", dest="pesq_command", default=None)
    p.set_defaults(func=cmd_run_tta)

    p = sub.add_parser("report", help="aggregate runs into tables and CSV")
    p.add_argument(
        "--runs",
        action="append",
        required=True,
        metavar="DATASET=DIR",
        help="repeatable; DIR is a run-tta output directory",
    )
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def cmd_synth(args) -> int:
    clean_dir, noise_dir = synth.synth_corpus(
        args.out,
        n_utts=args.n_utts,
        seed=args.seed,
        profile=args.profile,
        duration_range=(args.min_duration, args.max_duration),
    )
    print(f"wrote {args.n_utts} utterances under {clean_dir.parent}")
    return EXIT_OK


def cmd_mix(args) -> int:
    records = data.build_manifest(
        args.clean_dir, args.noise_dir, tuple(args.snr), args.seed, args.split, args.out
    )
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    if args.new_toy_seed is not None:
        encoder = make_toy_encoder(args.new_toy_seed, dim=args.dim)
        save_encoder(encoder, args.encoder)
        print(f"created encoder {encoder.spec.encoder_id} at {args.encoder}")
    encoder = load_encoder(args.encoder)
    records = data.load_manifest(args.manifest)
    cache_embeddings(records, encoder, args.which, args.out)
    print(f"cached {args.which} embeddings for {len(records)} utterances to {args.out}")
    return EXIT_OK


def cmd_fit_diet(args) -> int:
    fitted = diet.fit(
        args.clean_cache, args.noisy_cache, ridge=args.ridge,
        source_manifest_id=args.manifest_id, affine=args.affine,
    )
    diet.save(fitted, args.out)
    print(
        f"fitted {fitted.dim}x{fitted.dim} map from {fitted.k_samples} samples "
        f"(residual {fitted.fit_residual:.3e}) -> {args.out}"
    )
    return EXIT_OK


def cmd_eval_diet(args) -> int:
    fitted = diet.load(args.map_path)
    results = {}
    for spec in args.dataset:
        try:
            name, clean_cache, noisy_cache = spec.split(":")
        except ValueError:
            raise LadenError(f"--dataset must be NAME:CLEAN_CACHE:NOISY_CACHE, got {spec!r}")
        rep = diet.evaluate(fitted, clean_cache, noisy_cache)
        results[name] = {
            "mean_sim_noisy": rep.mean_sim_noisy,
            "mean_sim_transformed": rep.mean_sim_transformed,
        }
    names = sorted(results)
    print("row             " + "  ".join(f"{n:>12}" for n in names))
    print("sim_noisy       " + "  ".join(f"{results[n]['mean_sim_noisy']:12.4f}" for n in names))
    print("sim_transformed " + "  ".join(f"{results[n]['mean_sim_transformed']:12.4f}" for n in names))
    if args.out_csv:
        report.write_diet_eval_csv(results, args.out_csv)
    return EXIT_OK


def cmd_train_source(args) -> int:
    import torch

    records = data.load_manifest(args.manifest)
    torch.manual_seed(args.seed)
    model = AmModel(AmConfig(n_blocks=args.blocks, hidden_dim=args.hidden, attention_heads=args.heads))
    result = train_source(model, records, epochs=args.epochs, lr=args.lr, seed=args.seed)
    save_checkpoint(model, args.out, extra_meta={"role": "source", "train_seed": args.seed})
    print(
        f"validation MSE {result.initial_val_mse:.3e} -> {result.final_val_mse:.3e}; "
        f"checkpoint at {args.out}"
    )
    return EXIT_OK


def cmd_run_tta(args) -> int:
    overrides = {
        "manifest": args.manifest,
        "checkpoint": args.checkpoint,
        "output_dir": args.output_dir,
        "methods": args.methods,
        "seeds": args.seeds,
        "encoder_path": args.encoder_path,
        "diet_path": args.diet_path,
        "pesq_command": args.pesq_command,
    }
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        required = ("manifest", "checkpoint", "output_dir")
        missing = [k for k in required if overrides.get(k) is None]
        if missing:
            raise LadenError(f"without --config these flags are required: {missing}")
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    reports = run_experiment(cfg)
    for (seed, method), rep in sorted(reports.items()):
        sisdr = rep.aggregate["si_sdr"]
        print(f"seed {seed} {method:>12}: mean SI-SDR {sisdr:7.3f} dB over {rep.count} utterances")
    return EXIT_OK


def cmd_report(args) -> int:
    dataset_dirs = {}
    for spec in args.runs:
        try:
            name, path = spec.split("=", 1)
        except ValueError:
            raise LadenError(f"--runs must be DATASET=DIR, got {spec!r}")
        dataset_dirs[name] = path
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report.build_table(dataset_dirs)
    report.write_table_csv(table, out_dir / "results.csv")
    report.save_table_json(table, out_dir / "results.json")
    print(report.format_table(table, keys=("si_sdr", "ssnr", "pesq")))
    if any(method == "source_only" for method, _ in table.rows):
        deltas = report.delta_table(table)
        report.write_table_csv(deltas, out_dir / "deltas.csv")
        report.write_radar_csv(deltas, out_dir / "radar.csv")
        print(f"wrote results.csv, deltas.csv, radar.csv to {out_dir}")
    else:
        print(f"wrote results.csv to {out_dir} (no source_only arm, skipping deltas)")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AdaptationInterrupted as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"resume token: {exc.resume_token_path}", file=sys.stderr)
        return EXIT_RUNTIME
    except (LadenError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
