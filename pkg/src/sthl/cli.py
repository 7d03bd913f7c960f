"""Command-line runner: generate | train | eval | gradcheck | ablate.

Runs are described by one INI file with [model], [train] and [data]
sections; ``--seed``, ``--threads`` and ``--ablation`` override it. Every
output file carries the hash of the resolved configuration.
"""
import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autograd import gradcheck
from .construction import build_snapshot, incidence_csv_rows
from .dataset import (
    FORMATS,
    DatasetError,
    SamplePair,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_pairs,
    save_dataset,
    stack_pairs,
)
from .layer import attention_csv_rows
from .model import (
    ModelConfig,
    forward_batch,
    init_model,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
)
from .training import ABLATIONS, DivergenceError, TrainConfig, evaluate, split_indices, train

log = logging.getLogger("sthl")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4

# sizes a gradcheck run uses when [model] leaves them out
TINY = {"N": 3, "d": 4, "C": 2, "K": 2}


class ConfigError(ValueError):
    pass


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


MODEL_KEYS = set(_fields(ModelConfig))
TRAIN_KEYS = (set(_fields(TrainConfig)) - {"threads"}) | {"ablate_seeds"}
DATA_KEYS = set(_fields(SyntheticSpec)) | {"path", "format"}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}

LIST_KEYS = {"classifier_hidden", "update_hidden"}
STR_KEYS = {"activation", "optimizer", "split", "ablation", "path", "format"}
INT_KEYS = {"N", "d", "C", "K", "rng_seed", "epochs", "batch_size", "shuffle_seed",
            "ablate_seeds", "num_classes", "T"}


def _coerce(section, key, raw):
    try:
        if key in LIST_KEYS:
            return [int(v) for v in raw.replace(",", " ").split()]
        if key in STR_KEYS:
            return raw.strip()
        if key in INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid value") from None


def read_config(path):
    """Parse an INI file into {section: {key: value}}; unknown names are rejected."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive (N, d, C, K, T)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(section, key, raw)
        out[section] = values
    return out


@dataclasses.dataclass
class RunConfig:
    model: dict
    train: dict
    data: dict
    threads: int = 1

    def to_dict(self):
        return {"model": self.model, "train": self.train, "data": self.data}

    @property
    def hash(self):
        """Hash of the resolved run; independent of --threads by design."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve(args, require=()):
    """Load --config, apply flag overrides and validate everything up front."""
    raw = read_config(args.config) if args.config else {}
    for section in require:
        if args.config and section not in raw:
            raise ConfigError(f"{args.config}: missing section [{section}]")
    model = dict(raw.get("model", {}))
    tr = dict(raw.get("train", {}))
    data = dict(raw.get("data", {}))
    if getattr(args, "ablation", None):
        tr["ablation"] = args.ablation
    if args.seed is not None:
        if args.command == "generate":
            data["rng_seed"] = args.seed
        else:
            model["rng_seed"] = args.seed
            tr["shuffle_seed"] = args.seed
    threads = getattr(args, "threads", 1) or 1
    run = RunConfig(model, tr, data, threads)
    # dry-construct every typed block so bad values fail before any compute
    try:
        synthetic_spec(run)
        train_config(run)
        if data.get("format", "dense-binary") not in FORMATS:
            raise ValueError(f"[data] format must be one of {FORMATS}")
        ModelConfig(**{**TINY, **model})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return run


def synthetic_spec(run):
    return SyntheticSpec(**{k: v for k, v in run.data.items() if k not in ("path", "format")})


def train_config(run):
    kw = {k: v for k, v in run.train.items() if k != "ablate_seeds"}
    return TrainConfig(threads=run.threads, **kw)


def model_config(run, ds=None):
    kw = dict(run.model)
    if ds is not None:
        shape = {"N": ds.N, "d": ds.d, "C": ds.num_classes}
        for k, v in shape.items():
            if k in kw and kw[k] != v:
                raise ConfigError(f"[model] {k}={kw[k]} but the dataset has {k}={v}")
        kw.update(shape)
    try:
        return ModelConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dataset_for(run):
    if "path" in run.data:
        return load_dataset(run.data["path"], run.data.get("format", "dense-binary"),
                            num_classes=run.data.get("num_classes"))
    return generate_synthetic(synthetic_spec(run))


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands


def cmd_generate(args):
    run = resolve(args, require=("data",))
    ds = generate_synthetic(synthetic_spec(run))
    out = Path(args.out or "data.sthl")
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    summary = {"config_hash": run.hash, "path": str(out), **ds.summary(),
               "spec": dataclasses.asdict(synthetic_spec(run))}
    # the binary layout has no spare header field, so the hash lives in a sidecar
    _write_json(str(out) + ".json", summary)
    print(json.dumps({k: summary[k] for k in ("T", "N", "d", "C", "class_histogram")}))
    return EXIT_OK


def _history_rows(history, config_hash):
    rows = [["epoch", "split", "loss", "acc", "weighted_f1", "config_hash"]]
    for h in history:
        rows.append([h["epoch"], h["split"], repr(h["loss"]), repr(h["accuracy"]),
                     repr(h["weighted_f1"]), config_hash])
    return rows


def _run_training(run, ds, variant_override=None):
    tcfg = train_config(run)
    if variant_override is not None:
        tcfg = dataclasses.replace(tcfg, ablation=variant_override)
    mcfg = model_config(run, ds)
    model = init_model(mcfg, tcfg.variant)
    return train(model, ds, tcfg), tcfg


def cmd_train(args):
    run = resolve(args)
    ds = dataset_for(run)
    out = _outdir(args, "run")
    result, tcfg = _run_training(run, ds)
    h = run.hash
    _write_csv(out / "metrics.csv", _history_rows(result.history, h))
    save_checkpoint(result.model, out / "model.ckpt",
                    extra={"config_hash": h, "best_epoch": result.best_epoch})
    summary = {
        "config_hash": h,
        "variant": result.model.variant,
        "best_epoch": result.best_epoch,
        "dataset": ds.summary(),
        "config": run.to_dict(),
        "final": {name: {"accuracy": r.accuracy, "weighted_f1": r.weighted_f1, "loss": r.loss}
                  for name, r in result.reports.items()},
        "weighted_f1": result.reports["val"].weighted_f1,
        "reports": {name: r.to_dict() for name, r in result.reports.items()},
    }
    _write_json(out / "summary.json", summary)
    if args.dump_incidence or args.dump_attention:
        _dumps(args, out, result.model, ds, tcfg, h)
    print(f"variant={result.model.variant} best_epoch={result.best_epoch} "
          f"val_weighted_f1={result.reports['val'].weighted_f1:.4f} config_hash={h}")
    return EXIT_OK


def _dumps(args, out, model, ds, tcfg, config_hash):
    pairs = make_pairs(ds)
    val = split_indices(len(pairs), tcfg)["val"]
    if args.dump_incidence and model.has_hyperedges:
        # incidence depends on the coefficients only, so one matrix covers every sample
        rows = incidence_csv_rows(build_snapshot(pairs[val[0]], model.construction))
        rows[0].append("config_hash")
        for r in rows[1:]:
            r.append(config_hash)
        _write_csv(out / "incidence.csv", rows)
    if args.dump_attention and model.has_attention:
        cur, prev, _ = stack_pairs([pairs[i] for i in val])
        _, _, cache = forward_batch(model, cur, prev)
        rows = attention_csv_rows(cache["w_spa"], [int(i) + 1 for i in val])
        rows[0][0] = "t"
        rows[0].append("config_hash")
        for r in rows[1:]:
            r.append(config_hash)
        _write_csv(out / "attention.csv", rows)


def cmd_eval(args):
    try:
        model = load_checkpoint(args.checkpoint)
        meta = read_checkpoint_meta(args.checkpoint)[0]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    ds = load_dataset(args.dataset, args.format)
    cfg = model.config
    if (ds.N, ds.d, ds.num_classes) != (cfg.N, cfg.d, cfg.C):
        raise ConfigError(f"checkpoint expects N={cfg.N}, d={cfg.d}, C={cfg.C} but dataset "
                          f"{args.dataset} has N={ds.N}, d={ds.d}, C={ds.num_classes}")
    rep = evaluate(model, make_pairs(ds), threads=args.threads)
    report = {"config_hash": meta.get("config_hash", ""), "variant": model.variant,
              "dataset_sha256": hashlib.sha256(Path(args.dataset).read_bytes()).hexdigest(),
              **rep.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    run = resolve(args)
    mcfg = ModelConfig(**{**TINY, **run.model})
    tcfg = train_config(run)
    seed = mcfg.rng_seed
    rng = np.random.default_rng(seed + 1)
    pair = SamplePair(rng.standard_normal((mcfg.N, mcfg.d)), rng.standard_normal((mcfg.N, mcfg.d)),
                      int(rng.integers(mcfg.C)))
    model = init_model(mcfg, tcfg.variant)
    report = gradcheck(model, pair, seed=seed)
    h = run.hash
    out = _outdir(args, "gradcheck")
    (out / "gradcheck.txt").write_text(f"config_hash={h} variant={model.variant}\n"
                                       + report.format_text() + "\n")
    rows = report.csv_rows()
    rows[0].append("config_hash")
    for r in rows[1:]:
        r.append(h)
    _write_csv(out / "gradcheck.csv", rows)
    w = report.worst()
    print(f"worst slot {w.name}: max_rel={w.max_rel_error:.3e} max_abs={w.max_abs_error:.3e}")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_ablate(args):
    run = resolve(args)
    ds = dataset_for(run)
    out = _outdir(args, "ablate")
    n_seeds = int(run.train.get("ablate_seeds", 5))
    base = int(run.model.get("rng_seed", 0))
    rows = [["variant", "seed", "best_epoch", "val_weighted_f1", "val_accuracy", "config_hash"]]
    scores = {}
    for ablation in ABLATIONS:
        for s in range(base, base + n_seeds):
            seeded = RunConfig({**run.model, "rng_seed": s},
                               {**run.train, "shuffle_seed": s}, run.data, run.threads)
            result, tcfg = _run_training(seeded, ds, ablation)
            val = result.reports["val"]
            scores.setdefault(tcfg.variant, []).append(val.weighted_f1)
            rows.append([tcfg.variant, s, result.best_epoch, repr(val.weighted_f1),
                         repr(val.accuracy), run.hash])
            log.info("%s seed %d val f1 %.4f", tcfg.variant, s, val.weighted_f1)
    means = {k: float(np.mean(v)) for k, v in scores.items()}
    ordered = means["default"] > means["no_attention"] > means["no_hyperedge"]
    _write_csv(out / "ablation.csv", rows)
    _write_json(out / "ablation.json", {"config_hash": run.hash, "seeds": n_seeds,
                                        "mean_val_weighted_f1": means, "per_seed": scores,
                                        "default_gt_no_attention_gt_no_hyperedge": ordered})
    for k, v in means.items():
        print(f"{k:<13} mean val weighted F1 {v:.4f}")
    print(f"ordering default > no_attention > no_hyperedge: {ordered}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(prog="sthl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, threads=True):
        sp.add_argument("--config", help="INI run description")
        sp.add_argument("--out", help="output file (generate, eval) or directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override the run seed")
        if threads:
            sp.add_argument("--threads", type=int, default=1,
                            help="worker threads (default 1, bit-reproducible)")

    common(sub.add_parser("generate", help="write a synthetic dataset"), threads=False)
    for name in ("train", "ablate"):
        sp = sub.add_parser(name, help=f"{name} on the configured dataset")
        common(sp)
        sp.add_argument("--ablation", choices=ABLATIONS)
        if name == "train":
            sp.add_argument("--dump-incidence", action="store_true",
                            help="write incidence.csv for the returned model")
            sp.add_argument("--dump-attention", action="store_true",
                            help="write per-head attention weights on the validation split")
    sp = sub.add_parser("gradcheck", help="certify analytic gradients on a tiny model")
    common(sp, threads=False)
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp = sub.add_parser("eval", help="score a checkpoint on a dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("--format", choices=FORMATS, default="dense-binary")
    sp.add_argument("--out", help="metrics JSON path")
    sp.add_argument("--threads", type=int, default=1)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
