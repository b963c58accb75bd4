"""Command-line pipeline: synth, partition, train, advtrain, attack, baseline, eval."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as adv
from . import baseline as base
from .corpus import synthesize_corpus
from .evaluation import (DataError, DatasetManifest, ManifestEntry, binomial_test,
                         compute_fom, counts_from_ratios, fom_report, manifest_text,
                         partition_artist_filtered, partition_random, read_manifest)
from .network import model as net
from .network.checkpoint import checkpoint_bytes, load_checkpoint
from .network.features import features_text
from .network.training import TrainConfig, TrainingDivergence, fit
from .spectral import SpectralError, analyse, load_audio, store_audio

log = logging.getLogger("advmca")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------

DEFAULTS = {
    "out": ".",
    "seed": "0",
    # synth
    "classes": "4",
    "items_per_class": "25",
    "artists_per_class": "5",
    "duration": "10",
    # partition
    "manifest": "manifest.csv",
    "partition": "random",
    "split_counts": "15,5,5",
    "split_ratios": "0.6,0.2,0.2",
    "splits": "",
    # network
    "arch": "dnn",
    "dnn_width": "50",
    "dnn_depth": "3",
    "learning_rate": "0.01",
    "momentum": "0.9",
    "batch_size": "64",
    "max_epochs": "100",
    "patience": "20",
    "dropout": "0",
    "adv_epsilon": "",
    # adversary
    "model": "",
    "attack_split": "test",
    "snr_db": "15",
    "mu": "0.1",
    "r_min": "0.9",
    "k_max": "100",
    "directive": "correct_with_prob",
    "directive_p": "",
    "target": "",
    "write_audio": "true",
    # eval
    "predictions": "",
}

FLAG_KEYS = {"out": "out", "seed": "seed", "target": "target", "directive": "directive",
             "snr": "snr_db", "rmin": "r_min", "mu": "mu", "kmax": "k_max",
             "predictions": "predictions", "manifest": "manifest", "model": "model"}


def parse_config_text(text: str, source="config") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{source}:{n}: unknown key {key!r}")
        values[key] = value
    return values


@dataclass
class Settings:
    values: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def raw(self, key):
        return self.values.get(key, DEFAULTS[key])

    def text(self, key):
        return self.raw(key)

    def path(self, key, default=None):
        v = self.raw(key)
        if not v:
            return default
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def int(self, key):
        try:
            return int(self.raw(key))
        except ValueError:
            raise UsageError(f"{key} must be an integer, got {self.raw(key)!r}") from None

    def float(self, key):
        try:
            return float(self.raw(key))
        except ValueError:
            raise UsageError(f"{key} must be a number, got {self.raw(key)!r}") from None

    def floats(self, key):
        try:
            return [float(v) for v in self.raw(key).split(",")]
        except ValueError:
            raise UsageError(f"{key} must be comma-separated numbers") from None

    def flag(self, key):
        v = self.raw(key).lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key} must be true or false")
        return v in ("true", "1", "yes")

    @property
    def out(self) -> Path:
        return self.path("out", Path("."))


def load_settings(args) -> Settings:
    values, base_dir = {}, Path(".")
    if args.config:
        cfg_path = Path(args.config)
        try:
            text = cfg_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        values = parse_config_text(text, str(cfg_path))
        base_dir = cfg_path.parent
    s = Settings(values, base_dir)
    # command-line overrides are relative to the working directory
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            s.values[key] = str(Path(v).resolve()) if key in ("out", "predictions", "manifest", "model") else str(v)
    return s


# -- atomic artifacts ---------------------------------------------------------

def write_atomic(path: Path, data) -> None:
    """Write to a temporary sibling and rename, so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def store_audio_atomic(path: Path, x) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        store_audio(tmp, x)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- shared helpers -----------------------------------------------------------

def _split_dir(s: Settings) -> Path:
    return s.path("splits", s.out)


def _read_split(s: Settings, name: str) -> DatasetManifest:
    path = _split_dir(s) / f"{name}.csv"
    if not path.exists():
        raise DataError(f"missing split {path}; run 'partition' first")
    return read_manifest(path)


def _label_names(s: Settings):
    splits = [_read_split(s, n) for n in ("train", "valid", "test")]
    names = sorted({e.label for m in splits for e in m.entries})
    return splits, names


def _load_examples(manifest: DatasetManifest, names, T):
    lookup = {n: i for i, n in enumerate(names)}
    out = []
    for e in manifest.entries:
        if e.label not in lookup:
            raise DataError(f"{e.path}: label {e.label!r} unknown to the model")
        out.append((analyse(load_audio(manifest.resolve(e)), T), lookup[e.label]))
    return out


def _architecture(s: Settings):
    arch = s.text("arch")
    if arch == "dnn":
        return net.dnn_spec(s.int("dnn_width"), s.int("dnn_depth"))
    if arch == "cdnn":
        return net.cdnn_spec()
    raise UsageError(f"arch must be dnn or cdnn, got {arch!r}")


def _train_config(s: Settings) -> TrainConfig:
    drop = s.floats("dropout")
    try:
        return TrainConfig(s.float("learning_rate"), s.float("momentum"), s.int("batch_size"),
                           s.int("max_epochs"), s.int("patience"),
                           drop[0] if len(drop) == 1 else tuple(drop), s.int("seed"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _adversary_config(s: Settings) -> adv.AdversaryConfig:
    try:
        return adv.AdversaryConfig(s.float("snr_db"), s.float("mu"), s.float("r_min"),
                                   s.int("k_max"))
    except adv.AdversaryError as exc:
        raise UsageError(str(exc)) from exc


def _directive(s: Settings, names) -> adv.Directive:
    kind = s.text("directive")
    seed = s.int("seed")
    try:
        if kind == "correct_with_prob":
            p = s.float("directive_p") if s.raw("directive_p") else None
            return adv.Directive.correct_with_prob(p, seed)
        if kind == "always_wrong":
            return adv.Directive.always_wrong(seed)
        if kind == "fixed_label":
            target = s.text("target")
            if target not in names:
                raise UsageError(f"target {target!r} is not one of {names}")
            return adv.Directive.fixed_label(names.index(target))
        if kind == "all_labels":
            return adv.Directive.all_labels()
    except adv.AdversaryError as exc:
        raise UsageError(str(exc)) from exc
    raise UsageError(f"unknown directive {kind!r}")


def _model_path(s: Settings) -> Path:
    return s.path("model", s.out / "model.adnn")


def _load_model(s: Settings):
    path = _model_path(s)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run 'train' first")
    return load_checkpoint(path)


def _prediction_rows(params, examples, entries):
    rows = []
    for (X, y), e in zip(examples, entries):
        conf = net.confidence(net.forward(params, X))
        k = int(np.argmax(conf))
        rows.append([e.path, params.label_names[y], params.label_names[k], f"{conf[k]:.6f}"])
    return rows


PREDICTION_HEADER = ["file", "true_label", "predicted_label", "confidence"]


# -- subcommands --------------------------------------------------------------

def cmd_synth(s: Settings) -> None:
    m = synthesize_corpus(s.int("classes"), s.int("items_per_class"),
                          s.int("artists_per_class"), s.int("seed"), s.out,
                          s.float("duration"))
    log.info("wrote %d recordings and %s", len(m), s.out / "manifest.csv")


def cmd_partition(s: Settings) -> None:
    manifest = read_manifest(s.path("manifest"))
    mode = s.text("partition")
    if mode == "random":
        counts = [int(v) for v in s.floats("split_counts")]
        part = partition_random(manifest, counts, s.int("seed"))
    elif mode == "random_ratio":
        part = partition_random(manifest, counts_from_ratios(manifest, s.floats("split_ratios")),
                                s.int("seed"))
    elif mode == "artist_filtered":
        part = partition_artist_filtered(manifest, s.floats("split_ratios"), s.int("seed"))
    else:
        raise UsageError(f"partition must be random, random_ratio or artist_filtered, got {mode!r}")
    out = s.out
    for name, entries in part.splits().items():
        rel = [ManifestEntry(os.path.relpath(manifest.resolve(e), out), e.label, e.artist)
               for e in entries]
        write_atomic(out / f"{name}.csv", manifest_text(DatasetManifest(rel, out)))
    rows = [[label, *(f"{d:+.4f}" for d in dev)] for label, dev in part.ratio_deviation.items()]
    if rows:
        write_atomic(out / "partition_deviation.csv",
                     csv_text(["label", "train", "valid", "test"], rows))
    log.info("%s partition: %d/%d/%d", mode, len(part.train), len(part.valid), len(part.test))


def _train(s: Settings, adversarial: bool) -> None:
    spec = _architecture(s)
    (train_m, valid_m, test_m), names = _label_names(s)
    T = spec.frames_per_element
    train = _load_examples(train_m, names, T)
    valid = _load_examples(valid_m, names, T)
    cfg = _train_config(s)
    if adversarial:
        eps = s.float("adv_epsilon") if s.raw("adv_epsilon") else None
        params, history = adv.adversarial_fit(spec, train, valid, cfg, eps, names)
    else:
        params, history = fit(spec, train, valid, cfg, names)
    out = s.out
    write_atomic(_model_path(s), checkpoint_bytes(params))
    write_atomic(out / "train_log.csv", csv_text(
        ["epoch", "train_loss", "valid_mean_recall", "valid_loss"],
        [[h["epoch"], f"{h['train_loss']:.6f}", f"{h['valid_mean_recall']:.6f}",
          f"{h['valid_loss']:.6f}"] for h in history]))
    test = _load_examples(test_m, names, T)
    rows = _prediction_rows(params, test, test_m.entries)
    write_atomic(out / "predictions.csv", csv_text(PREDICTION_HEADER, rows))
    log.info("trained %d epochs; checkpoint %s", len(history), _model_path(s))


def cmd_train(s: Settings) -> None:
    _train(s, adversarial=False)


def cmd_advtrain(s: Settings) -> None:
    _train(s, adversarial=True)


def cmd_attack(s: Settings) -> None:
    params = _load_model(s)
    names = params.label_names
    split = _read_split(s, s.text("attack_split"))
    examples = _load_examples(split, names, params.spec.frames_per_element)
    cfg = _adversary_config(s)
    directive = _directive(s, names)
    targets = adv.choose_targets(params, [y for _, y in examples], directive)
    write_audio = s.flag("write_audio")
    out = s.out
    records = []
    for (X, y), entry, t in zip(examples, split.entries, targets):
        for target in (t if isinstance(t, list) else [t]):
            result = adv.attack(params, X, target, cfg)
            records.append(adv.make_record(params, entry.path, y, result))
            log.info("%s -> %s: %s after %d iterations, %.2f dB", entry.path, names[target],
                     "success" if result.succeeded else "failure", result.iterations,
                     result.achieved_snr)
            if write_audio:
                stem = Path(entry.path).stem
                store_audio_atomic(out / "adversarial" / f"{stem}.adv-{names[target]}.wav",
                                   adv.render_audio(result))
    write_atomic(out / "attack_report.csv", adv.report_text(records))
    if directive.kind == "all_labels":
        write_atomic(out / "ensemble.csv", adv.ensemble_table(records, names))
    rate = np.mean([r.succeeded for r in records])
    log.info("%d attacks, success rate %.3f", len(records), rate)


def cmd_baseline(s: Settings) -> None:
    (train_m, _, test_m), names = _label_names(s)
    lookup = {n: i for i, n in enumerate(names)}

    def features(manifest):
        return [base.texture_features(load_audio(manifest.resolve(e))) for e in manifest.entries]

    train_f = features(train_m)
    test_f = features(test_m)
    X = np.concatenate(train_f)
    y = np.concatenate([np.full(len(f), lookup[e.label])
                        for f, e in zip(train_f, train_m.entries)])
    model = base.fit_mahalanobis(X, y, names)
    out = s.out
    export = [(e.path, f) for e, f in zip(train_m.entries, train_f)]
    export += [(e.path, f) for e, f in zip(test_m.entries, test_f)]
    write_atomic(out / "baseline_features.csv", features_text(export))
    write_atomic(out / "baseline_model.json", json.dumps({
        "label_names": names,
        "class_means": model.class_means.tolist(),
        "covariance": model.covariance.tolist(),
    }, indent=1))
    rows = []
    for e, f in zip(test_m.entries, test_f):
        votes = np.bincount(model.predict(f), minlength=len(names))
        k = base.classify_majority(model, f)
        rows.append([e.path, e.label, names[k], f"{votes[k] / votes.sum():.6f}"])
    write_atomic(out / "baseline_predictions.csv", csv_text(PREDICTION_HEADER, rows))
    log.info("baseline fitted on %d texture windows", len(X))


def cmd_eval(s: Settings) -> None:
    path = s.path("predictions")
    if path is None:
        raise UsageError("eval needs --predictions PATH")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames or not {"true_label", "predicted_label"} <= set(reader.fieldnames):
        raise DataError(f"{path}: needs true_label and predicted_label columns")
    rows = list(reader)
    truths = [r["true_label"] for r in rows]
    preds = [r["predicted_label"] for r in rows]
    fom = compute_fom(truths, preds)
    out = s.out
    write_atomic(out / "fom.csv", fom_report(fom))
    K = len(fom.labels)
    correct = sum(t == p for t, p in zip(truths, preds))
    summary = [["items", len(rows)], ["mean_recall", f"{fom.mean_recall:.6f}"],
               ["accuracy", f"{correct / len(rows):.6f}"],
               ["binomial_p", f"{binomial_test(correct, len(rows), 1.0 / K):.6g}" if K > 1 else "nan"]]
    if "succeeded" in reader.fieldnames:
        ok = [r for r in rows if r["succeeded"] == "true"]
        summary.append(["success_rate", f"{len(ok) / len(rows):.6f}"])
        # zero-iteration successes have infinite SNR and carry no size information
        finite = [float(r["snr_db"]) for r in ok if np.isfinite(float(r["snr_db"]))]
        if finite:
            summary.append(["mean_success_snr_db", f"{np.mean(finite):.4f}"])
    write_atomic(out / "eval_summary.csv", csv_text(["metric", "value"], summary))
    log.info("mean recall %.2f", 100 * fom.mean_recall)


COMMANDS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "train": cmd_train,
    "advtrain": cmd_advtrain,
    "attack": cmd_attack,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advmca", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "partition":
            p.add_argument("--manifest")
        if name == "attack":
            p.add_argument("--target", help="label for the fixed_label directive")
            p.add_argument("--directive",
                           choices=["correct_with_prob", "always_wrong", "fixed_label", "all_labels"])
            p.add_argument("--snr", type=float, help="minimum perturbation SNR in dB")
            p.add_argument("--rmin", type=float, help="confidence threshold")
            p.add_argument("--mu", type=float, help="gradient step size")
            p.add_argument("--kmax", type=int, help="iteration cap")
        if name in ("attack", "train", "advtrain"):
            p.add_argument("--model", help="checkpoint path (default OUT/model.adnn)")
        if name == "eval":
            p.add_argument("--predictions", help="predictions CSV or attack report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        settings = load_settings(args)
        COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"advmca {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"advmca {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SpectralError, net.NetworkError, adv.AdversaryError,
            base.BaselineError, OSError) as exc:
        print(f"advmca {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
