"""Command-line front end: ``crossmodal <command> ...``.

Exit codes: 0 success, 1 failed check (gradcheck), 2 configuration or usage
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, io, synthdata
from .errors import ConfigError, CrossModalError, InputError, NumericalError, UsageError
from .features import SAMPLE_RATE, format_vectors, mel_spectrogram, mfcc, read_wav, resample
from .retrieval import DIRECTIONS, LEVELS, cross_validate, evaluate, format_reports
from .training import COMBINE_MODES, DEFAULT_EPOCHS, VARIANTS, TrainConfig, format_trace, train

log = logging.getLogger("crossmodal")

CONFIG_ENV = "CROSSMODAL_CONFIG"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4

DEFAULT_RUN_CONFIG = {
    "variant": "feature-dcca",
    "train": {},
    "eval": {
        "components": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "recall": [1, 5, 10],
        "direction": "both",
        "level": "instance",
        "combine": "average",
    },
    "split": {"ratio": 0.8, "test_fraction": 0.2, "seed": 0},
}


# ---------------------------------------------------------------- config


def _check_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _positive_ints(values, name):
    if not isinstance(values, list) or not values or not all(isinstance(v, int) and v >= 1 for v in values):
        raise ConfigError(f"{name} must be a non-empty list of positive integers, got {values!r}")
    return values


def validate_run_config(cfg: dict) -> dict:
    """Check every key and value; returns the config with a resolved TrainConfig under ``train``."""
    _check_keys(cfg, DEFAULT_RUN_CONFIG, "config")
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    ev, sp = cfg["eval"], cfg["split"]
    _check_keys(ev, DEFAULT_RUN_CONFIG["eval"], "eval")
    _check_keys(sp, DEFAULT_RUN_CONFIG["split"], "split")
    _positive_ints(ev["components"], "eval.components")
    _positive_ints(ev["recall"], "eval.recall")
    if ev["direction"] not in DIRECTIONS + ("both",):
        raise ConfigError(f"eval.direction must be one of {DIRECTIONS + ('both',)}, got {ev['direction']!r}")
    if ev["level"] not in LEVELS + ("both",):
        raise ConfigError(f"eval.level must be one of {LEVELS + ('both',)}, got {ev['level']!r}")
    if ev["combine"] not in COMBINE_MODES:
        raise ConfigError(f"eval.combine must be one of {COMBINE_MODES}, got {ev['combine']!r}")
    try:
        ratio, test_fraction = float(sp["ratio"]), float(sp["test_fraction"])
    except (TypeError, ValueError):
        raise ConfigError("split.ratio and split.test_fraction must be numbers") from None
    if not (0 < ratio < 1 and 0 < test_fraction < 1 and ratio + test_fraction <= 1 + 1e-12):
        raise ConfigError(f"invalid split: ratio {ratio}, test_fraction {test_fraction}")
    train_section = dict(cfg["train"])
    train_section.setdefault("epochs", DEFAULT_EPOCHS[cfg["variant"]])
    train_section.setdefault("combine", ev["combine"])
    cfg = dict(cfg)
    cfg["train"] = TrainConfig.from_dict(train_section)
    return cfg


def load_run_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return cfg
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(user, DEFAULT_RUN_CONFIG, "config")
    for key, value in user.items():
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: section {key!r} must be an object")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


_TRAIN_FLAGS = {
    "batch_size": "batch_size", "epochs": "epochs", "ridge": "ridge", "shared_dim": "shared_dim",
    "margin": "margin", "seed": "seed", "learning_rate": "learning_rate", "hidden": "hidden",
    "cnn_variant": "cnn_variant",
}


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line flags; validated before any work."""
    cfg = load_run_config(getattr(args, "config", None))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg["train"][key] = value
    if getattr(args, "variant", None):
        cfg["variant"] = args.variant
    for flag in ("direction", "level", "combine"):
        if getattr(args, flag, None):
            cfg["eval"][flag] = getattr(args, flag)
    if getattr(args, "components", None):
        cfg["eval"]["components"] = args.components
    if getattr(args, "recall", None):
        cfg["eval"]["recall"] = args.recall
    if getattr(args, "split_ratio", None) is not None:
        cfg["split"]["ratio"] = args.split_ratio
    return validate_run_config(cfg)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_extract(args) -> int:
    """Compute MFCC or mel features for every WAV in a manifest."""
    manifest = Path(args.manifest)
    records = io.read_manifest(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.tsv"
    previous = {}
    if index_path.exists():
        for line in index_path.read_text(encoding="utf-8").splitlines()[1:]:
            cells = line.split("\t")
            if len(cells) == 5:
                previous[cells[0]] = cells
    rows, kept, errors, written = [], [], [], 0
    for rec in records:
        src, _ = io.resolve(manifest, rec.audio)
        feat_path = out / f"{rec.id}.{args.variant}.xmf"
        try:
            raw = src.read_bytes()
            source_hash = io.sha256(raw + args.variant.encode())
            prev = previous.get(rec.id)
            if prev and prev[4] == source_hash and feat_path.exists() and io.sha256(feat_path.read_bytes()) == prev[3]:
                rows.append(prev)
            else:
                clip = resample(read_wav(src), SAMPLE_RATE)
                spec = mfcc(clip) if args.variant == "mfcc" else mel_spectrogram(clip)
                data = io.encode_features(spec.values, args.variant)
                written += io.write_if_changed(feat_path, data)
                rows.append([rec.id, feat_path.name, f"{spec.values.shape[0]}x{spec.values.shape[1]}",
                             io.sha256(data), source_hash])
        except (CrossModalError, OSError) as exc:
            errors.append(f"{rec.id}: {exc}")
            continue
        text_path, row = io.resolve(manifest, rec.text)
        text_ref = os.path.relpath(text_path, out) + (f"#{row}" if row else "")
        kept.append(io.ManifestRecord(rec.id, feat_path.name, text_ref, rec.category, rec.split))
    index = "\t".join(["id", "path", "shape", "sha256", "source_sha256"]) + "\n"
    index += "".join("\t".join(r) + "\n" for r in rows)
    written += io.write_if_changed(index_path, index.encode("utf-8"))
    before = (out / "manifest.tsv").read_bytes() if (out / "manifest.tsv").exists() else None
    if kept:
        data = io.write_manifest(out / "manifest.tsv", kept)
        written += data != before
    print(f"extracted {len(rows)} item(s), {len(errors)} error(s), {written} file(s) written")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_DATA if errors else EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = io.load_dataset(args.manifest, split="train")
    start = time.perf_counter()
    model = train(data, cfg["variant"], cfg["train"])
    elapsed = time.perf_counter() - start
    io.save_model(args.out, model)
    trace_path = args.trace or f"{args.out}.trace.tsv"
    io.atomic_write(trace_path, format_trace(model.loss_trace).encode("utf-8"))
    print(f"trained {cfg['variant']} on {len(data)} item(s) in {elapsed:.1f} s -> {args.out}")
    if model.cca is not None:
        print(f"final total correlation {float(np.sum(model.cca.correlations)):.4f} "
              f"over {model.cca.n_components} component(s)")
    return EXIT_OK


def _expand(value, choices):
    return list(choices) if value == "both" else [value]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = io.load_model(args.model)
    data = io.load_dataset(args.manifest, split="test")
    ev = cfg["eval"]
    reports = []
    for d in _expand(ev["direction"], DIRECTIONS):
        for lv in _expand(ev["level"], LEVELS):
            reports.extend(evaluate(model, data, d, lv, ev["components"], ev["recall"], ev["combine"]))
    table = format_reports(reports)
    prefix = args.out
    io.atomic_write(f"{prefix}.tsv", table.encode("utf-8"))
    meta = {"model": Path(args.model).name, "variant": model.variant, "seed": model.config.seed,
            "reports": [r.to_dict() for r in reports]}
    io.atomic_write(f"{prefix}.json", (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode("utf-8"))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.layer_suite(args.seed, corrupt=args.corrupt, tol=args.tol)
    results.append(gradcheck.cca_suite(args.seed, batches=args.batches, corrupt=args.corrupt, tol=args.tol))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    if not 0 < args.split_ratio < 1:
        raise ConfigError(f"--split-ratio must lie in (0, 1), got {args.split_ratio}")
    spec = synthdata.SynthSpec(
        n_pairs=args.pairs, latent_dim=args.latent, audio_dim=args.audio_dim, text_dim=args.text_dim,
        noise=args.noise, nonlinear=args.mode == "nonlinear" or args.nonlinear,
        spectrogram_shape=(args.bands, args.frames) if args.mode == "spectrogram" else None,
        n_categories=args.categories, seed=args.seed,
    )
    data, truth = synthdata.generate(spec)
    out = Path(args.out)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    kind = "mfcc" if data.is_spectrogram else "vector"
    order = np.random.default_rng(args.seed).permutation(len(data))
    n_train = int(round(args.split_ratio * len(data)))
    split = np.empty(len(data), dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:]] = "test"
    records = []
    for i, pid in enumerate(data.pair_ids):
        io.write_if_changed(out / "audio" / f"{pid}.xmf", io.encode_features(data.audio[i], kind))
        records.append(io.ManifestRecord(pid, f"audio/{pid}.xmf", f"text.tsv#{pid}",
                                         str(data.categories[i]), split[i]))
    io.write_if_changed(out / "text.tsv", format_vectors(zip(data.pair_ids, data.text)).encode("utf-8"))
    io.write_manifest(out / "manifest.tsv", records)
    truth_doc = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()},
        "mode": spec.mode,
        "population_correlations": truth.population_correlations.tolist(),
        "oracle_correlations": truth.oracle_correlations.tolist(),
        "rotation": truth.rotation.tolist(),
        "category_means": truth.category_means.tolist(),
        "latent_cov": truth.latent_cov.tolist(),
    }
    io.write_if_changed(out / "truth.json", (json.dumps(truth_doc, sort_keys=True, indent=1) + "\n").encode())
    io.write_if_changed(out / "loadings.xmf", io.encode_features(
        np.hstack([truth.audio_loading.T.ravel(), truth.text_loading.T.ravel()]), "vector"))
    print(f"wrote {len(data)} pairs ({spec.mode}) to {out}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = resolve_config(args)
    data = io.load_dataset(args.manifest)
    ev = cfg["eval"]
    cv = cross_validate(
        data, cfg["variant"], cfg["train"], runs=args.runs, seed=cfg["train"].seed,
        train_fraction=cfg["split"]["ratio"], test_fraction=cfg["split"]["test_fraction"],
        directions=_expand(ev["direction"], DIRECTIONS), levels=_expand(ev["level"], LEVELS),
        ks=ev["components"], ns=ev["recall"], combine=ev["combine"],
    )
    table = format_reports(cv.reports)
    io.atomic_write(f"{args.out}.tsv", table.encode("utf-8"))
    meta = {"variant": cfg["variant"], "seeds": list(cv.seeds), "train_fraction": cfg["split"]["ratio"],
            "reports": [r.to_dict() for r in cv.reports]}
    io.atomic_write(f"{args.out}.json", (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode("utf-8"))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    """Emit ``x, y, series`` triples from evaluation report files."""
    lines = ["x\ty\tseries"]
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read report {path}: {exc}") from exc
        label = args.label or Path(path).stem
        for r in doc.get("reports", []):
            if r["mrr1"] is None:
                continue
            y = r["mrr1"] if args.metric == "mrr1" else r["recall_at"].get(args.metric.split("@")[1])
            if y is None:
                raise InputError(f"{path}: report has no {args.metric}")
            if args.x == "components":
                x = r["k"]
            else:
                if "train_fraction" not in doc:
                    raise InputError(f"{path}: no train_fraction recorded (produce it with crossval)")
                if r["k"] != args.at_k:
                    continue
                x = doc["train_fraction"]
            lines.append(f"{x!r}\t{y!r}\t{label}/{r['direction']}/{r['level']}/{args.metric}")
    text = "\n".join(lines) + "\n"
    if args.out:
        io.atomic_write(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_train_flags(p):
    p.add_argument("--config", help=f"JSON run configuration (default: ${CONFIG_ENV})")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--shared-dim", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--cnn-variant", choices=("mfcc", "mel"))
    p.add_argument("--seed", type=int)
    p.add_argument("--split-ratio", type=float)


def _add_eval_flags(p):
    p.add_argument("--direction", choices=DIRECTIONS + ("both",))
    p.add_argument("--level", choices=LEVELS + ("both",))
    p.add_argument("--components", type=_int_list, help="comma-separated k values")
    p.add_argument("--recall", type=_int_list, help="comma-separated N values for recall@N")
    p.add_argument("--combine", choices=COMBINE_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmodal", description="Audio/text cross-modal retrieval with deep CCA.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute MFCC / mel features from WAV files")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("mfcc", "mel"), default="mfcc")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model on the manifest's train split")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="loss trace file (default: <out>.trace.tsv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval on the manifest's test split")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="report prefix; writes <out>.tsv and <out>.json")
    p.add_argument("--config")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="repeated random splits: train and evaluate per run, report means")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=5)
    _add_train_flags(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every layer and the CCA head")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset (manifest + feature files)")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=400)
    p.add_argument("--latent", type=int, default=3)
    p.add_argument("--mode", choices=("linear", "nonlinear", "spectrogram"), default="linear")
    p.add_argument("--nonlinear", action="store_true", help="cube nonlinearity in spectrogram mode too")
    p.add_argument("--audio-dim", type=int, default=64)
    p.add_argument("--text-dim", type=int, default=300)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--frames", type=int, default=161)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--categories", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot-data", help="emit (x, y, series) triples from report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--metric", default="mrr1", help="mrr1 or recall@N")
    p.add_argument("--x", choices=("components", "train-fraction"), default="components")
    p.add_argument("--at-k", type=int, default=30, help="k used for train-fraction series")
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CrossModalError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
