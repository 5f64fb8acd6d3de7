"""Command-line entry point: generate, dedup, train, predict, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import data, evaluation, pipeline
from .config import RunConfig
from .errors import FedCausalError, IoError, MissingTruth, NumericError, ValidationError, WorkerFailure

log = logging.getLogger("fedcausal")

EXIT_OK, EXIT_NUMERIC, EXIT_IO, EXIT_VALIDATION = 0, 1, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--ablate-g", action="store_true", default=None)
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "TEST", "VAL"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcausal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic multi-source dataset")
    _add_common(p)
    p.add_argument("--variant", choices=data.VARIANTS)
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("dedup", help="drop records duplicated across sources")
    _add_common(p)
    p.add_argument("--sources", type=Path, nargs="+", required=True)
    p.add_argument("--k-keep", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="federated training on the training split")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--sources", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("predict", help="impute missing outcomes and estimate effects")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--sources", type=Path, nargs="+", required=True)
    p.add_argument("--draws", type=int)
    p.add_argument("--part", choices=pipeline.PARTS, default="test")
    p.add_argument("--hist-source", type=int, help="restrict hist.csv to one source")
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("evaluate", help="score predictions against true effects")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--sources", type=Path, nargs="+", required=True)
    p.add_argument("--pred", type=Path, nargs="+", required=True, help="prediction directories")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--csv", type=Path, help="aggregation CSV to append a row to")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    flags = {
        "seed": args.seed,
        "data.variant": getattr(args, "variant", None),
        "data.split": getattr(args, "split", None),
        "train.rounds": getattr(args, "rounds", None),
        "train.learning_rate": getattr(args, "learning_rate", None),
        "train.optimizer": getattr(args, "optimizer", None),
        "train.ablate_g": getattr(args, "ablate_g", None),
        "train.transport": getattr(args, "transport", None),
        "variational.mc_samples": getattr(args, "mc_samples", None),
        "predict.draws": getattr(args, "draws", None),
        "dedup.k_keep": getattr(args, "k_keep", None),
    }
    return cfg.override(flags)


def _load_sources(paths) -> list:
    return [data.load_csv(p, source_id=i) for i, p in enumerate(paths)]


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


def cmd_generate(args, cfg: RunConfig) -> int:
    out = _mkdir(args.out)
    d = cfg.data
    scfg = data.SyntheticConfig(d.variant, d.n, d.m, d.d_x, cfg.seed, d.split)
    files = [data.write_csv(s, out / f"source_{s.source_id}.csv") for s in data.generate_synthetic(scfg)]
    data.write_manifest(scfg, files, out / "manifest.json")
    print(f"wrote {len(files)} sources to {out}")
    return EXIT_OK


def cmd_dedup(args, cfg: RunConfig) -> int:
    out = _mkdir(args.out)
    sources = _load_sources(args.sources)
    kept = pipeline.deduplicate(sources, cfg)
    for path, before, after in zip(args.sources, sources, kept):
        data.write_csv(after, out / Path(path).name)
        print(f"{Path(path).name}: {before.n} -> {after.n} rows")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _mkdir(args.out)
    prepared = pipeline.prepare(_load_sources(args.sources), cfg.data.split, cfg.seed)
    model, trace = pipeline.fit(prepared, cfg)
    model.save(out / "model.json")
    trace.to_csv(out / "trace.csv")
    print(f"trained {len(trace)} rounds; final ELBO {trace.elbo[-1]:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    model = pipeline.FittedModel.load(args.model)
    prepared = model.prepared(_load_sources(args.sources))
    pred = pipeline.predict_part(model, prepared, args.part, cfg.predict.draws)
    pipeline.write_prediction(pred, model.splits, args.out, args.hist_source)
    print(f"ATE {pred.effects.ate_mean:.4f} (95% {pred.effects.interval[0]:.4f}..{pred.effects.interval[1]:.4f})")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    model = pipeline.FittedModel.load(args.model)
    sources = _load_sources(args.sources)
    prepared = model.prepared(sources)
    per_split = {}
    for pred_dir in args.pred:
        try:
            ate = json.loads((pred_dir / "ate.json").read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read {pred_dir / 'ate.json'}: {exc}") from exc
        part = ate["part"]
        rows = prepared.part(part)
        if not all(s.has_truth for s in rows):
            raise MissingTruth("evaluation needs y0 and y1 columns for every source")
        est = pipeline.read_effects_csv(pred_dir / "effects.csv")
        truth = [s.true_ite() for s in rows]
        if sorted(est) != [s.source_id for s in rows]:
            raise ValidationError(f"{pred_dir}: effects cover sources {sorted(est)}")
        flat = [v for s in rows for v in est[s.source_id]]
        per_split[part] = evaluation.split_metrics(truth, flat, ate["ate_mean"])
    headline = cfg.eval.headline if cfg.eval.headline in per_split else next(iter(per_split))
    report = evaluation.MetricsReport(
        model.seed,
        model.config.get("data", {}).get("variant", cfg.data.variant),
        len(sources),
        evaluation.config_digest(model.config),
        per_split,
        headline,
        time.perf_counter() - t0,
    )
    _mkdir(args.out)
    evaluation.emit_report(report, args.out / "metrics.json", args.csv)
    print(f"{headline}: sqrt_pehe {report.sqrt_pehe:.4f}  ate_error {report.ate_error:.4f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "dedup": cmd_dedup,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, IoError):
        return EXIT_IO
    if isinstance(exc, (NumericError, WorkerFailure)):
        return EXIT_NUMERIC
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except FedCausalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
