"""Command-line front end: ``deepsofa <subcommand> [flags]``.

Settings come from, in increasing precedence: built-in defaults, the config
file (``--config`` or ``$DEEPSOFA_CONFIG``; one INI section per subcommand,
keys named like the long flags with dashes or underscores), and flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, eval as ev, ingest, sofa
from .model import ATTENTION_MODES, DeepSofaModel, ModelConfig, predict_stream
from .numerics import make_rng
from .synth import SynthConfig, generate
from .train import split_validation, train
from .variables import load_specs

logger = logging.getLogger("deepsofa")

ENV_CONFIG = "DEEPSOFA_CONFIG"
SUBCOMMANDS = ("synth", "preprocess", "sofa-score", "train", "predict", "evaluate", "compare")


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepsofa", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"INI config file (default ${ENV_CONFIG})")
    parser.add_argument("--log-file", help="append the run log here as well as stderr")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic cohort as event + outcome CSVs")
    p.add_argument("--n", type=int, default=200, help="number of encounters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth", help="output directory")
    p.add_argument("--baseline-logit", type=float, default=SynthConfig.baseline_logit)
    p.add_argument("--effect-weight", type=float, default=SynthConfig.effect_weight)
    p.add_argument("--motif-fraction", type=float, default=SynthConfig.motif_fraction)
    p.add_argument("--median-stay-hours", type=float, default=SynthConfig.median_stay_hours)
    p.add_argument("--multi-stay-fraction", type=float, default=SynthConfig.multi_stay_fraction)

    p = sub.add_parser("preprocess", help="events + outcomes -> filtered hourly cohort")
    p.add_argument("--events", required=False, help="event CSV")
    p.add_argument("--outcomes", required=False, help="outcome CSV")
    p.add_argument("--out", default="cohort.bin")
    p.add_argument("--test-out", help="also split off a test cohort here (split by patient)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variables", help="variable table (INI); bundled defaults if omitted")
    p.add_argument("--multi-stay-policy", choices=("all", "first_only", "unique_only"), default="all")
    p.add_argument("--min-age", type=float, default=ingest.CohortCriteria.min_age_years)
    p.add_argument("--min-stay-hours", type=int, default=ingest.CohortCriteria.min_stay_hours)
    p.add_argument("--max-stay-days", type=int, default=ingest.CohortCriteria.max_stay_days)
    p.add_argument("--rejections", help="write the rejection report CSV here")

    p = sub.add_parser("sofa-score", help="hourly SOFA components and Bedside probability")
    p.add_argument("--cohort", required=False)
    p.add_argument("--bedside-table", help="lo,hi,rate table; bundled fixture if omitted")
    p.add_argument("--out", default="sofa.csv")

    p = sub.add_parser("train", help="train the network (and the logistic-regression baseline)")
    p.add_argument("--cohort", required=False)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", help="per-epoch CSV (default <out>.log.csv)")
    p.add_argument("--logreg-out", help="baseline model path (default <out>.logreg)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=int, default=ModelConfig.hidden_dim)
    p.add_argument("--dropout", type=float, default=ModelConfig.dropout_p)
    p.add_argument("--l2", type=float, default=ModelConfig.l2_lambda)
    p.add_argument("--batch-size", type=int, default=ModelConfig.batch_size)
    p.add_argument("--patience", type=int, default=ModelConfig.patience_epochs)
    p.add_argument("--max-epochs", type=int, default=ModelConfig.max_epochs)
    p.add_argument("--learning-rate", type=float, default=ModelConfig.learning_rate)
    p.add_argument("--attention-mode", choices=ATTENTION_MODES, default=ModelConfig.attention_mode)
    p.add_argument("--feature-subset", default=ModelConfig.feature_subset)
    p.add_argument("--scale-attention", action="store_true")
    p.add_argument("--val-fraction", type=float, default=ModelConfig.val_fraction)

    p = sub.add_parser("predict", help="per-hour probabilities, optionally attention matrices")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--cohort", required=False)
    p.add_argument("--out", default="predictions.csv")
    p.add_argument("--attention", action="store_true", help="write attention CSV + PGM per encounter")
    p.add_argument("--attention-dir", default="attention")

    p = sub.add_parser("evaluate", help="hourly AUC curves for the network and the baselines")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--cohort", required=False)
    p.add_argument("--logreg", help="logistic-regression baseline (default <checkpoint>.logreg if present)")
    p.add_argument("--bedside-table")
    p.add_argument("--out-dir", default="eval")
    p.add_argument("--align", choices=ev.ALIGNMENTS + ("both",), default="both")
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("compare", help="paired-bootstrap AUC comparison of two prediction files")
    p.add_argument("--a", required=False, help="predictions CSV (encounter_id,hour,prob)")
    p.add_argument("--b", required=False)
    p.add_argument("--cohort", required=False, help="cohort supplying labels")
    p.add_argument("--out", default="comparison.csv")
    p.add_argument("--align", choices=ev.ALIGNMENTS, default="from_admission")
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from the config file section for the chosen subcommand."""
    pre, _ = parser.parse_known_args(argv)
    path = pre.config or os.environ.get(ENV_CONFIG)
    if not path:
        return parser.parse_args(argv)
    if not Path(path).is_file():
        raise ValidationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path, encoding="utf-8")
    if cp.has_section(pre.command):
        sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
        sp = sub.choices[pre.command]
        known = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in cp.items(pre.command):
            dest = key.replace("-", "_")
            action = known.get(dest)
            if action is None:
                raise ValidationError(f"config [{pre.command}]: unknown key {key!r}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = cp.getboolean(pre.command, key)
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    for name in names:
        value = getattr(args, name)
        if value is None:
            raise ValidationError(f"--{name.replace('_', '-')} is required")


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ValidationError(f"file not found: {p}")


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = SynthConfig(
        n_encounters=args.n,
        seed=args.seed,
        baseline_logit=args.baseline_logit,
        effect_weight=args.effect_weight,
        motif_fraction=args.motif_fraction,
        median_stay_hours=args.median_stay_hours,
        multi_stay_fraction=args.multi_stay_fraction,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate(cfg)
    cohort.write(out / "events.csv", out / "outcomes.csv")
    cohort.write_truth(out / "truth.csv")
    logger.info("wrote %d events for %d encounters to %s", len(cohort.events), len(cohort.outcomes), out)


def cmd_preprocess(args):
    _require(args, "events", "outcomes")
    _require_files(args.events, args.outcomes, args.variables)
    specs = load_specs(args.variables)
    events, rejections = ingest.parse_events(args.events)
    outcomes = ingest.parse_outcomes(args.outcomes)
    series, more = ingest.build_cohort(events, outcomes, specs)
    rejections.extend(more)
    criteria = ingest.CohortCriteria(
        min_age_years=args.min_age,
        min_stay_hours=args.min_stay_hours,
        max_stay_days=args.max_stay_days,
        multi_stay_policy=args.multi_stay_policy,
    )
    cohort, report = ingest.apply_cohort_filters(series, criteria)
    logger.info("cohort: %d of %d encounters kept; exclusions %s", len(cohort), len(series), report)
    if args.rejections:
        with open(args.rejections, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("line", "reason", "detail"))
            for r in rejections:
                w.writerow((r.line, r.reason, r.detail))
    if args.test_out:
        patients = sorted({s.patient_id for s in cohort})
        order = make_rng(args.seed, 7).permutation(len(patients))
        n_test = int(round(args.test_fraction * len(patients)))
        test_patients = {patients[i] for i in order[:n_test]}
        train_part = [s for s in cohort if s.patient_id not in test_patients]
        test_part = [s for s in cohort if s.patient_id in test_patients]
        ingest.save_cohort(args.out, train_part)
        ingest.save_cohort(args.test_out, test_part)
        logger.info("split: %d development / %d test encounters", len(train_part), len(test_part))
    else:
        ingest.save_cohort(args.out, cohort)


def cmd_sofa_score(args):
    _require(args, "cohort")
    _require_files(args.cohort, args.bedside_table)
    table = sofa.BedsideTable.load(args.bedside_table)
    cohort = ingest.load_cohort(args.cohort)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("encounter_id", "hour") + sofa.COMPONENTS + ("total", "bedside_prob"))
        for s in cohort:
            for a in sofa.sofa_trajectory(s):
                w.writerow(
                    (s.encounter_id, a.hour, a.cardio, a.resp, a.cns, a.coag, a.liver, a.renal, a.total,
                     f"{table.probability(a.total):.6f}")
                )


def cmd_train(args):
    _require(args, "cohort")
    _require_files(args.cohort)
    cohort = ingest.load_cohort(args.cohort)
    if not cohort:
        raise ValidationError("training cohort is empty")
    config = ModelConfig(
        hidden_dim=args.hidden_dim,
        dropout_p=args.dropout,
        l2_lambda=args.l2,
        batch_size=args.batch_size,
        patience_epochs=args.patience,
        max_epochs=args.max_epochs,
        attention_mode=args.attention_mode,
        feature_subset=args.feature_subset,
        seed=args.seed,
        scale_attention=args.scale_attention,
        learning_rate=args.learning_rate,
        val_fraction=args.val_fraction,
    )
    train_part, val_part = split_validation(cohort, config.val_fraction, config.seed)
    model, log = train(train_part, val_part, config)
    model.save(args.out)
    log.to_csv(args.log or f"{args.out}.log.csv")
    logger.info("best epoch %d (val AUC %.4f); checkpoint %s", log.best_epoch, log.best_val_auc, args.out)
    lr = baselines.train_logistic_baseline(cohort)
    lr.save(args.logreg_out or f"{args.out}.logreg")


def _write_predictions(path, preds: ev.HourlyPredictions):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("encounter_id", "hour", "prob"))
        for enc, traj in zip(preds.encounter_ids, preds.trajectories):
            for h, p in enumerate(traj, start=1):
                w.writerow((enc, h, repr(float(p))))


def _read_predictions(path, cohort) -> ev.HourlyPredictions:
    rows = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            rows.setdefault(r["encounter_id"], []).append((int(r["hour"]), float(r["prob"])))
    trajs = []
    for s in cohort:
        if s.encounter_id not in rows:
            raise ValidationError(f"{path}: no predictions for {s.encounter_id}")
        trajs.append(np.array([p for _, p in sorted(rows[s.encounter_id])]))
    return ev.HourlyPredictions([s.encounter_id for s in cohort], trajs, [s.label for s in cohort])


def write_attention_csv(path, matrix):
    np.savetxt(path, matrix, delimiter=",", fmt="%.8f")


def write_attention_pgm(path, matrix, cell: int = 4):
    """Binary PGM heatmap; darker cells mean more attention (row = hour of prediction)."""
    m = np.asarray(matrix, dtype=float)
    top = m.max() if m.size and m.max() > 0 else 1.0
    img = 255 - np.round(255 * m / top).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def network_predictions(model: DeepSofaModel, cohort, chunk: int = 64) -> ev.HourlyPredictions:
    order = sorted(range(len(cohort)), key=lambda i: cohort[i].T)
    trajs = [None] * len(cohort)
    for start in range(0, len(order), chunk):
        idx = order[start : start + chunk]
        for i, (probs, _) in zip(idx, model.forward([cohort[i] for i in idx])):
            trajs[i] = probs
    return ev.HourlyPredictions([s.encounter_id for s in cohort], trajs, [s.label for s in cohort])


def cmd_predict(args):
    _require(args, "checkpoint", "cohort")
    _require_files(args.checkpoint, args.cohort)
    model = DeepSofaModel.load(args.checkpoint)
    cohort = ingest.load_cohort(args.cohort)
    if args.attention:
        Path(args.attention_dir).mkdir(parents=True, exist_ok=True)
        trajs = []
        for s in cohort:
            tr = predict_stream(model, s)
            trajs.append(tr.probs)
            write_attention_csv(Path(args.attention_dir) / f"{s.encounter_id}.csv", tr.attention)
            write_attention_pgm(Path(args.attention_dir) / f"{s.encounter_id}.pgm", tr.attention)
        preds = ev.HourlyPredictions([s.encounter_id for s in cohort], trajs, [s.label for s in cohort])
    else:
        preds = network_predictions(model, cohort)
    _write_predictions(args.out, preds)


def cmd_evaluate(args):
    _require(args, "checkpoint", "cohort")
    logreg_path = args.logreg
    if logreg_path is None and Path(f"{args.checkpoint}.logreg").is_file():
        logreg_path = f"{args.checkpoint}.logreg"
    _require_files(args.checkpoint, args.cohort, args.bedside_table, logreg_path)
    model = DeepSofaModel.load(args.checkpoint)
    cohort = ingest.load_cohort(args.cohort)
    table = sofa.BedsideTable.load(args.bedside_table)
    totals = [sofa.sofa_totals(s) for s in cohort]
    models = {
        "deepsofa": network_predictions(model, cohort),
        "traditional_sofa": baselines.traditional_sofa_predictions(cohort),
        "bedside_sofa": baselines.bedside_sofa_predictions(cohort, table, totals),
    }
    if logreg_path:
        models["logistic_regression"] = baselines.logistic_predictions(
            baselines.LogisticRegression.load(logreg_path), cohort
        )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aligns = ev.ALIGNMENTS if args.align == "both" else (args.align,)
    for align in aligns:
        for name, preds in models.items():
            pts = ev.hourly_curve(preds, align, args.horizon, args.iterations, args.seed)
            ev.write_curve_csv(out / f"auc_{name}_{align}.csv", pts)
            logger.info("%s %s: mean AUC %.4f", name, align, np.mean([p.auc for p in pts]))
        for name in ("deepsofa", "bedside_sofa"):
            pts = ev.stratified_mean_prob(models[name], align, args.horizon, args.iterations, args.seed)
            ev.write_stratified_csv(out / f"meanprob_{name}_{align}.csv", pts)
        for name in models:
            if name == "deepsofa":
                continue
            comp = ev.compare_models(models["deepsofa"], models[name], align, args.horizon, args.iterations, args.seed)
            ev.write_comparison_csv(out / f"compare_deepsofa_vs_{name}_{align}.csv", comp)


def cmd_compare(args):
    _require(args, "a", "b", "cohort")
    _require_files(args.a, args.b, args.cohort)
    cohort = ingest.load_cohort(args.cohort)
    a = _read_predictions(args.a, cohort)
    b = _read_predictions(args.b, cohort)
    comp = ev.compare_models(a, b, args.align, args.horizon, args.iterations, args.seed)
    ev.write_comparison_csv(args.out, comp)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "sofa-score": cmd_sofa_score,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def _setup_logging(args):
    root = logging.getLogger("deepsofa")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    root.addHandler(h)
    if args.log_file:
        fh = logging.FileHandler(args.log_file, encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)
    root.propagate = False


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except ValidationError as exc:
        print(f"deepsofa: error: {exc}", file=sys.stderr)
        return 1
    _setup_logging(args)
    effective = {k: v for k, v in sorted(vars(args).items())}
    logger.info("effective config: %s", json.dumps(effective, sort_keys=True, default=str))
    try:
        COMMANDS[args.command](args)
    except (ValidationError, ingest.IngestError, ev.EvalError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
