"""Command-line entry point: ``survshape <command> ...``.

Results go to stdout (or to the files named by flags), logs go to stderr.
Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import VOLUME_COLUMN, DataFormatError, load_cohort, load_manifest, write_cohort
from .preprocess import FeatureEncoder
from .synthdata import generate_cohort, parse_cohort_spec
from .trainer import (
    ConfigFile,
    ExperimentConfig,
    evaluate,
    hyperparameter_search,
    load_config,
    prepare,
    repeat_seeds,
    run_experiment,
    search_candidates,
    split_dataset,
    train_variant,
)
from .widedeep import VARIANTS, load_checkpoint, save_checkpoint

log = logging.getLogger("survshape")

SEED_ENV = "SURVSHAPE_SEED"


class UserError(Exception):
    """Bad input from the caller; reported without a traceback and exit code 1."""


# ---------------------------------------------------------------------------
# helpers


def _read_config(path) -> ConfigFile:
    try:
        cfg = ConfigFile(ExperimentConfig()) if path is None else load_config(path)
    except (ValueError, TypeError, KeyError) as exc:
        raise UserError(f"{path}: invalid config: {exc}") from None
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            seed_value = int(seed)
        except ValueError:
            raise UserError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        exp = cfg.experiment
        cfg.experiment = replace(exp, train=replace(exp.train, rng_seed=seed_value))
    return cfg


def _parse_variant(token: str) -> tuple[str, bool]:
    """``wide``, ``deep``, ``widedeep``, optionally suffixed with ``+volume``."""
    name, _, suffix = token.strip().partition("+")
    if name not in VARIANTS or suffix not in ("", "volume"):
        raise UserError(f"unknown variant {token!r}; choose from {', '.join(VARIANTS)} (optionally +volume)")
    if name == "deep" and suffix:
        raise UserError("the deep variant has no tabular input, so +volume does not apply")
    return name, bool(suffix)


def _variant_label(variant: str, with_volume: bool) -> str:
    return f"{variant}+volume" if with_volume else variant


def _load(manifest_path, points):
    manifest = load_manifest(manifest_path)
    return manifest, load_cohort(manifest, points=points)


def _check_volume(manifest, with_volume: bool) -> None:
    if with_volume and not manifest.has_volume:
        raise UserError(f"{manifest.path}: --volume needs a {VOLUME_COLUMN!r} column")


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _describe(values: np.ndarray) -> dict:
    return {"mean": float(values.mean()), "std": float(values.std()), "min": float(values.min()), "max": float(values.max())}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    try:
        spec = parse_cohort_spec(Path(args.spec).read_text(encoding="utf-8"))
    except (ValueError, TypeError) as exc:
        raise UserError(f"{args.spec}: invalid cohort spec: {exc}") from None
    subjects = generate_cohort(spec)
    out = Path(args.out)
    manifest = write_cohort(out, subjects, with_volume=True)
    truth = _csv_text(
        ["subject_id", "true_log_hazard", "deformation"],
        [(s.raw.subject_id, repr(s.true_log_hazard), repr(s.deformation)) for s in subjects],
    )
    (out / "truth.csv").write_text(truth, encoding="utf-8")
    (out / "spec.json").write_text(_json_text(spec.to_dict()), encoding="utf-8")
    n_events = sum(s.record.delta for s in subjects)
    log.info("wrote %d subjects (%d events) to %s", len(subjects), n_events, out)
    sys.stdout.write(_json_text({"manifest": str(manifest), "n_subjects": len(subjects), "n_events": int(n_events)}))
    return 0


def cmd_train(args) -> int:
    variant, vol_suffix = _parse_variant(args.variant)
    with_volume = args.volume or vol_suffix
    cfg = _read_config(args.config)
    manifest, cohort = _load(args.manifest, cfg.points)
    _check_volume(manifest, with_volume)
    exp = cfg.experiment
    result = run_experiment(cohort, variant, exp, with_volume=with_volume)
    model, encoder = result.model, result.encoder
    columns = encoder.column_names if encoder is not None else []
    extra = {
        "variant": variant,
        "with_volume": with_volume,
        "points": int(cohort.clouds.shape[1]),
        "columns": columns,
        "rng_seed": exp.train.rng_seed,
    }
    if args.out_checkpoint:
        save_checkpoint(args.out_checkpoint, model, encoder.to_dict() if encoder else None, extra)
        log.info("checkpoint written to %s", args.out_checkpoint)
    if args.report:
        Path(args.report).write_text(result.report.to_csv(), encoding="utf-8")
    summary = {
        "variant": _variant_label(variant, with_volume),
        "n_train": int(result.split[0].size),
        "n_val": int(result.split[1].size),
        "n_test": int(result.split[2].size),
        "test_c_index": result.test.c_index,
        "test_comparable_pairs": result.test.num_comparable_pairs,
        "selected_epoch": result.report.selected_epoch,
        "epochs": len(result.report.train_loss),
    }
    if model.config.has_wide:
        summary["coefficients"] = [{"feature": n, "coefficient": c} for n, c in model.wide_coefficients(columns)]
    if variant == "widedeep":
        parts = model.score_parts(result.test_data.features, result.test_data.clouds)
        summary["decomposition"] = {
            "wide": _describe(parts.wide),
            "deep": _describe(parts.deep),
            "total": _describe(parts.total),
            "corr_wide_deep": float(np.corrcoef(parts.wide, parts.deep)[0, 1]) if parts.deep.std() > 0 and parts.wide.std() > 0 else None,
        }
    _write_text(args.summary, _json_text(summary))
    return 0


def cmd_repeat(args) -> int:
    cfg = _read_config(args.config)
    variants = [_parse_variant(v) for v in args.variants.split(",")]
    manifest, cohort = _load(args.manifest, cfg.points)
    for _, vol in variants:
        _check_volume(manifest, vol)
    exp = cfg.experiment
    n = args.n_repeats if args.n_repeats is not None else exp.train.n_repeats
    if n < 1:
        raise UserError("--n-repeats must be positive")
    rows = []
    by_variant: dict[str, list[float]] = {_variant_label(v, vol): [] for v, vol in variants}
    for r, seed in enumerate(repeat_seeds(exp.train.rng_seed, n)):
        split = split_dataset(cohort.events, exp.train.split_fractions, seed)
        for variant, vol in variants:
            label = _variant_label(variant, vol)
            model, _, report, _, test = train_variant(cohort, split, variant, vol, exp, seed)
            c = evaluate(model, test).c_index
            by_variant[label].append(c)
            rows.append((r + 1, seed, label, repr(c), report.selected_epoch))
            log.info("repeat %d/%d %s test c-index %.4f", r + 1, n, label, c)
    table = _csv_text(["repeat", "seed", "variant", "test_c_index", "selected_epoch"], rows)
    medians = {k: float(np.median(v)) for k, v in by_variant.items()}
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        sys.stdout.write(_json_text({"master_seed": exp.train.rng_seed, "n_repeats": n, "median_c_index": medians}))
    else:
        sys.stdout.write(table)
        log.info("median c-index: %s", json.dumps(medians, sort_keys=True))
    return 0


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UserError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_coefficients(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    if not ckpt.model.config.has_wide:
        raise UserError(f"{args.checkpoint}: deep-only checkpoint has no wide coefficients")
    names = ckpt.extra.get("columns") or FeatureEncoder.from_dict(ckpt.encoder).column_names
    rows = [(n, repr(c)) for n, c in ckpt.model.wide_coefficients(names)]
    _write_text(args.out, _csv_text(["feature", "coefficient"], rows))
    return 0


def _cohort_for_checkpoint(ckpt, manifest_path):
    manifest = load_manifest(manifest_path)
    with_volume = bool(ckpt.extra.get("with_volume", False))
    if with_volume and not manifest.has_volume:
        raise UserError(f"{manifest.path}: feature schema mismatch, checkpoint needs column(s) {VOLUME_COLUMN}")
    encoder = FeatureEncoder.from_dict(ckpt.encoder) if ckpt.encoder is not None else None
    if encoder is not None and ckpt.extra.get("columns") not in (None, encoder.column_names):
        raise UserError("checkpoint metadata is inconsistent: encoder columns differ from recorded columns")
    cohort = load_cohort(manifest, points=ckpt.extra.get("points"))
    return cohort, encoder


def cmd_predict(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    cohort, encoder = _cohort_for_checkpoint(ckpt, args.manifest)
    data = prepare(cohort, np.arange(len(cohort)), encoder)
    model = ckpt.model
    scores = model.predict(data.features if model.config.has_wide else None, data.clouds if model.config.has_deep else None)
    rows = [(sid, repr(float(s))) for sid, s in zip(cohort.subject_ids, scores)]
    _write_text(args.out, _csv_text(["subject_id", "risk_score"], rows))
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    cohort, encoder = _cohort_for_checkpoint(ckpt, args.manifest)
    data = prepare(cohort, np.arange(len(cohort)), encoder)
    if not ckpt.model.config.has_wide:
        data.features = None
    res = evaluate(ckpt.model, data)
    out = {
        "c_index": res.c_index,
        "comparable_pairs": res.num_comparable_pairs,
        "concordant": res.num_concordant,
        "tied_scores": res.num_tied_scores,
        "n_subjects": len(cohort),
    }
    _write_text(args.out, _json_text(out))
    return 0


def cmd_search(args) -> int:
    cfg = _read_config(args.config)
    if not cfg.search_space:
        raise UserError(f"{args.config}: config has no [search] section")
    variant, vol_suffix = _parse_variant(args.variant)
    with_volume = args.volume or vol_suffix
    manifest, cohort = _load(args.manifest, cfg.points)
    _check_volume(manifest, with_volume)
    exp = cfg.experiment
    cands = search_candidates(cfg.search_space, cfg.search_strategy, cfg.search_samples, exp.train.rng_seed)
    res = hyperparameter_search(cands, cohort, exp, variant, with_volume)
    keys = sorted(cfg.search_space)
    rows = [[_fmt(row[k]) for k in keys] + [repr(row["val_c_index"]), row["selected_epoch"]] for row in res.table]
    table = _csv_text(keys + ["val_c_index", "selected_epoch"], rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        sys.stdout.write(_json_text({k: _jsonable(v) for k, v in res.best.items()}))
    else:
        sys.stdout.write(table)
    return 0


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="survshape", description="Wide and deep survival models on point clouds and clinical data.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--spec", required=True, help="INI file with a [cohort] section")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="split, fit and test one model variant")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="INI experiment config")
    t.add_argument("--variant", default="widedeep", help="wide, deep or widedeep")
    t.add_argument("--volume", action="store_true", help="add the hippocampal volume column")
    t.add_argument("--out-checkpoint")
    t.add_argument("--report", help="per-epoch CSV")
    t.add_argument("--summary", help="summary JSON (default stdout)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("repeat", help="repeat the protocol over several splits")
    r.add_argument("--manifest", required=True)
    r.add_argument("--config")
    r.add_argument("--n-repeats", type=int)
    r.add_argument("--variants", default="wide,deep,widedeep", help="comma-separated, e.g. wide,wide+volume,widedeep")
    r.add_argument("--out", help="per-split CSV; medians go to stdout as JSON")
    r.set_defaults(func=cmd_repeat)

    c = sub.add_parser("coefficients", help="wide coefficients of a checkpoint as CSV")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_coefficients)

    pr = sub.add_parser("predict", help="risk scores for every subject of a manifest")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="c-index of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("search", help="hyperparameter search on the validation split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--variant", default="widedeep")
    s.add_argument("--volume", action="store_true")
    s.add_argument("--out", help="candidate table CSV; the best candidate goes to stdout")
    s.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are user errors here
        return 0 if exc.code == 0 else 1
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UserError as exc:
        log.error("%s", exc)
        return 1
    except (DataFormatError, FileNotFoundError, configparser.Error) as exc:
        log.error("%s", exc)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
