"""Command-line driver: ``hibehrt <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .byol import ByolState, transfer_weights
from .checkpoint import load_model, save_model
from .config import RunConfig, default_entries, format_value, load_run_config
from .data import Vocabulary, build_vocabulary, load_dataset, parse_modality, split_dataset
from .errors import ConfigInvalid, ConfigMismatch, DataError, HiBehrtError
from .model import attention_cost, hierarchical_cost, segment_count
from .synth import write_cohort
from .training import (
    Stratum,
    age_strata,
    curve_spearman,
    encode_dataset,
    evaluate,
    fraction_subset,
    length_strata,
    modality_strata,
    model_factory,
    pretrain,
    stratified_eval,
    train_with_lr_sweep,
    training_fraction_sweep,
)

log = logging.getLogger("hibehrt")

METRIC_COLUMNS = ["task", "stratum", "n", "positives", "auroc", "auprc", "seed", "error"]
DEFAULT_WINDOW_STRIDE = "50:30,50:50,100:50,100:100,150:150"


# ---------------------------------------------------------------- helpers


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    columns = columns or (list(rows[0]) if rows else [])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row.get(k)) for k in columns})
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if v != v else repr(v)
    return v


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.canonical_text(),
        "seeds": list(cfg.seeds),
        "outputs": [str(p) for p in outputs],
        "versions": {
            "hibehrt": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    manifest.update(extra or {})
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _load_vocab_and_records(cfg: RunConfig) -> tuple[Vocabulary, list]:
    vocab = Vocabulary.load(cfg.paths.vocab)
    records = load_dataset(cfg.paths.dataset)
    _bind_vocab(cfg, vocab)
    return vocab, records


def _bind_vocab(cfg: RunConfig, vocab: Vocabulary) -> None:
    if cfg.model.vocab_size == 0:
        cfg.model.vocab_size = len(vocab)
    elif cfg.model.vocab_size != len(vocab):
        raise ConfigMismatch(f"model.vocab_size={cfg.model.vocab_size} but the vocabulary has {len(vocab)} entries")


def _splits(cfg: RunConfig, records):
    return split_dataset(records, tuple(cfg.split.ratios), cfg.split.seed)


def _max_len(cfg: RunConfig, kind: str) -> int:
    return cfg.model.flat_max_len if kind == "behrt" else cfg.model.max_len


def _encode_splits(cfg: RunConfig, records, vocab, kind: str):
    train, tune, val = _splits(cfg, records)
    ml = _max_len(cfg, kind)
    return tuple(encode_dataset(part, vocab, ml, skip_empty=True) for part in (train, tune, val))


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigInvalid(f"expected comma-separated numbers, got {text!r}") from None


def parse_window_stride(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        w, sep, s = item.strip().partition(":")
        if not sep:
            raise ConfigInvalid(f"window:stride pair expected, got {item!r}")
        try:
            pairs.append((int(w), int(s)))
        except ValueError:
            raise ConfigInvalid(f"window:stride pair expected, got {item!r}") from None
    return pairs


def parse_strata(spec: str):
    """``length:256``, ``age:35-50,50-70,70-90`` or ``modality:DIAG+MED,DIAG+MED+PROC``."""
    kind, sep, arg = spec.partition(":")
    if not sep:
        raise ConfigInvalid(f"--strata expects kind:args, got {spec!r}")
    try:
        if kind == "length":
            return length_strata(int(arg))
        if kind == "age":
            bands = []
            for band in arg.split(","):
                lo, _, hi = band.partition("-")
                bands.append((int(lo), int(hi)))
            return age_strata(bands)
    except ValueError:
        raise ConfigInvalid(f"cannot parse strata {spec!r}") from None
    if kind == "modality":
        try:
            subsets = [[parse_modality(m) for m in group.split("+")] for group in arg.split(",")]
        except DataError as e:
            raise ConfigInvalid(str(e)) from None
        return modality_strata(subsets)
    raise ConfigInvalid(f"unknown strata kind {kind!r} (length, age, modality)")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    path = Path(cfg.paths.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_cohort(cfg.gen, path)
    log.info("wrote %d patients (%d positive) to %s", manifest["n_patients"], manifest["positives"], path)
    return [path, Path(str(path) + ".manifest.json")]


def cmd_build_vocab(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    records = load_dataset(cfg.paths.dataset)
    if args.train_only:
        records = _splits(cfg, records)[0]
    vocab = build_vocabulary(records)
    path = Path(cfg.paths.vocab)
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    log.info("vocabulary of %d tokens written to %s", len(vocab), path)
    return [path]


def cmd_pretrain(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    vocab, records = _load_vocab_and_records(cfg)
    if args.split == "train":
        records = _splits(cfg, records)[0]
    ds = encode_dataset(records, vocab, cfg.model.max_len, skip_empty=True)
    seed = cfg.seeds[0]
    state, curve = pretrain(ds, cfg.model, cfg.pretrain, cfg.aug, seed)
    ckpt = Path(args.checkpoint or out_dir / "pretrain.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, "byol", state, {"seed": seed})
    curve_path = write_csv(out_dir / "pretrain_loss.csv", curve, ["epoch", "step", "lr", "loss"])
    return [ckpt, curve_path]


def _supervised(cfg: RunConfig, args, out_dir: Path, make_model, kind: str, task: str) -> list[Path]:
    vocab, records = _load_vocab_and_records(cfg)
    train, tune, val = _encode_splits(cfg, records, vocab, kind)
    if args.fraction < 1.0:
        train = train.subset(fraction_subset(len(train), args.fraction, cfg.seeds[0]))
    outputs, rows, history = [], [], []
    for seed in cfg.seeds:
        res = train_with_lr_sweep(make_model(seed), train, tune, cfg.train, seed, val)
        ckpt = Path(args.checkpoint or cfg.paths.checkpoint)
        if len(cfg.seeds) > 1:
            ckpt = ckpt.with_name(f"{ckpt.stem}.seed{seed}{ckpt.suffix}")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_model(ckpt, kind, res.model, {"seed": seed, "peak_lr": res.peak_lr, "task": task})
        outputs.append(ckpt)
        for row in res.history:
            history.append({"seed": seed, "peak_lr": res.peak_lr, **row})
        rep = evaluate(res.model, val, batch_size=cfg.train.eval_batch_size)
        rows.append({"task": task, "stratum": rep.stratum, "n": rep.n, "positives": rep.positives,
                     "auroc": rep.auroc, "auprc": rep.auprc, "seed": seed, "error": rep.error})
    cols = ["seed", "peak_lr", "epoch", "step", "lr", "train_loss", "tune_loss", "val_auroc", "val_auprc"]
    outputs.append(write_csv(out_dir / f"{task}_epochs.csv", history, cols))
    outputs.append(write_csv(out_dir / f"{task}_metrics.csv", rows, METRIC_COLUMNS))
    return outputs


def cmd_train(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    return _supervised(cfg, args, out_dir, lambda seed: model_factory(args.model, cfg.model, seed),
                       args.model, f"train-{args.model}")


def _load_pretrained(path: str, cfg: RunConfig) -> ByolState:
    kind, state, _ = load_model(path)
    if kind != "byol":
        raise ConfigMismatch(f"{path} holds a {kind!r} checkpoint, expected a pretrained byol state")
    return state


def cmd_finetune(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    state = None
    freeze = tuple(p for p in args.freeze.split(",") if p)

    def make(seed):
        def build():
            nonlocal state
            if state is None:
                state = _load_pretrained(args.pretrained, cfg)
            torch.manual_seed(seed)
            return transfer_weights(state, cfg.model, freeze)

        return build

    return _supervised(cfg, args, out_dir, make, "hibehrt", "finetune")


def cmd_evaluate(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    vocab, records = _load_vocab_and_records(cfg)
    if args.split != "all":
        records = dict(zip(("train", "tune", "val"), _splits(cfg, records)))[args.split]
    paths = [args.checkpoint] if args.checkpoint else [cfg.paths.checkpoint]
    strata = parse_strata(args.strata) if args.strata else [Stratum("all")]
    match = args.match_prevalence
    if match is not None and match != "first":
        try:
            match = float(match)
        except ValueError:
            raise ConfigInvalid(f"--match-prevalence expects a number or 'first', got {match!r}") from None
    rows = []
    for path in paths:
        kind, model, ck = load_model(path)
        if kind == "byol":
            raise ConfigMismatch(f"{path} is a pretraining checkpoint; fine-tune it before evaluating")
        seed = ck.config.get("seed", "")
        task = ck.config.get("task", f"train-{kind}")
        for rep in stratified_eval(model, records, vocab, strata, match_prevalence=match,
                                   draws=args.draws, seed=cfg.seeds[0]):
            rows.append({"task": task, "stratum": rep.stratum, "n": rep.n, "positives": rep.positives,
                         "auroc": rep.auroc, "auprc": rep.auprc, "seed": seed, "error": rep.error})
    return [write_csv(out_dir / "metrics.csv", rows, METRIC_COLUMNS)]


def cmd_sweep(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    vocab, records = _load_vocab_and_records(cfg)
    if args.window_stride:
        rows = []
        train_r, tune_r, val_r = _splits(cfg, records)
        train, tune, val = (encode_dataset(p, vocab, cfg.model.max_len, skip_empty=True) for p in (train_r, tune_r, val_r))
        for w, s in parse_window_stride(args.window_stride):
            mcfg = dataclasses.replace(cfg.model, window=w, stride=s).validate()
            reps = []
            for seed in cfg.seeds:
                res = train_with_lr_sweep(model_factory("hibehrt", mcfg, seed), train, tune, cfg.train, seed)
                reps.append(evaluate(res.model, val, batch_size=cfg.train.eval_batch_size))
            rows.append({"window": w, "stride": s, "segments": segment_count(mcfg.max_len, w, s),
                         "seeds": len(cfg.seeds),
                         "auroc": float(np.nanmean([r.auroc for r in reps])),
                         "auprc": float(np.nanmean([r.auprc for r in reps]))})
        return [write_csv(out_dir / "sweep_window_stride.csv", rows,
                          ["window", "stride", "segments", "seeds", "auroc", "auprc"])]

    fractions = _float_list(args.fractions)
    if not fractions or min(fractions) <= 0 or max(fractions) > 1:
        raise ConfigInvalid("--fractions must lie in (0, 1]")
    kind = args.model
    train, tune, val = _encode_splits(cfg, records, vocab, kind)
    if args.pretrained:
        state = _load_pretrained(args.pretrained, cfg)

        def make(seed):
            torch.manual_seed(seed)
            return transfer_weights(state, cfg.model)
    else:
        def make(seed):
            return model_factory(kind, cfg.model, seed)()

    rows = training_fraction_sweep(make, train, tune, val, cfg.train, fractions, cfg.seeds)
    label = "pretrained" if args.pretrained else kind
    for r in rows:
        r["model"] = label
    rho = curve_spearman(rows) if len(rows) > 1 else float("nan")
    log.info("spearman(fraction, auroc) = %.3f", rho)
    path = write_csv(out_dir / "sweep_fraction.csv", rows, ["model", "fraction", "n_train", "seeds", "auroc", "auprc"])
    return [path]


def cmd_complexity(cfg: RunConfig, args, out_dir: Path) -> list[Path]:
    d, w, s = cfg.model.hidden, cfg.model.window, cfg.model.stride
    if args.lengths:
        lengths = [int(x) for x in _float_list(args.lengths)]
    else:
        lengths = sorted(set(range(args.l_min, args.l_max + 1, args.l_step)) | {cfg.model.max_len})
    rows = []
    for L in lengths:
        flat, hier = attention_cost(L, d), hierarchical_cost(L, w, s, d)
        rows.append({"L": L, "d": d, "window": w, "stride": s, "segments": hier["segments"],
                     "flat_space": flat["space"], "hier_space": hier["space"],
                     "flat_time": flat["time"], "hier_time": hier["time"]})
    path = write_csv(out_dir / "complexity.csv", rows)
    if args.print:
        sys.stdout.write(path.read_text())
    return [path]


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic cohort and its manifest"),
    "build-vocab": (cmd_build_vocab, "build the token vocabulary from a dataset"),
    "pretrain": (cmd_pretrain, "BYOL pretraining of the hierarchical encoder"),
    "train": (cmd_train, "supervised training of hibehrt or behrt"),
    "finetune": (cmd_finetune, "supervised fine-tuning from a pretrained checkpoint"),
    "evaluate": (cmd_evaluate, "AUROC/AUPRC of a checkpoint, optionally stratified"),
    "sweep": (cmd_sweep, "training-fraction learning curve or window/stride grid"),
    "complexity": (cmd_complexity, "flat vs hierarchical attention cost table"),
}


def _keys_epilog() -> str:
    lines = ["configuration keys (override with --set key=value; defaults shown):"]
    for k, v in sorted(default_entries().items()):
        lines.append(f"  {k}={format_value(v)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of key=value lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out-dir", help="output directory (default: paths.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hibehrt", description="Hierarchical EHR transformer toolkit.",
                                epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    parsers = {}
    for name, (_, help_) in COMMANDS.items():
        parsers[name] = sub.add_parser(name, parents=[common], help=help_, description=help_,
                                       epilog=_keys_epilog(), formatter_class=fmt)

    parsers["build-vocab"].add_argument("--train-only", action="store_true",
                                        help="only use the training split")
    parsers["pretrain"].add_argument("--split", choices=("all", "train"), default="train")
    parsers["pretrain"].add_argument("--checkpoint", help="output checkpoint (default: OUT_DIR/pretrain.ckpt)")
    for name in ("train", "finetune"):
        parsers[name].add_argument("--checkpoint", help="output checkpoint (default: paths.checkpoint)")
        parsers[name].add_argument("--fraction", type=float, default=1.0, help="fraction of the training split")
    parsers["train"].add_argument("--model", choices=("hibehrt", "behrt"), default="hibehrt")
    parsers["finetune"].add_argument("--pretrained", required=True, help="byol checkpoint")
    parsers["finetune"].add_argument("--freeze", default="", help="comma-separated parameter prefixes to freeze")

    ev = parsers["evaluate"]
    ev.add_argument("--checkpoint", help="model checkpoint (default: paths.checkpoint)")
    ev.add_argument("--split", choices=("train", "tune", "val", "all"), default="val")
    ev.add_argument("--strata", help="length:256 | age:35-50,50-70,70-90 | modality:DIAG+MED,DIAG+MED+TEST")
    ev.add_argument("--match-prevalence", help="target prevalence, or 'first' for the first stratum's")
    ev.add_argument("--draws", type=int, default=5, help="downsampling draws for --match-prevalence")

    sw = parsers["sweep"]
    sw.add_argument("--fractions", default="0.01,0.05,0.1,0.2,0.5,1.0")
    sw.add_argument("--window-stride", nargs="?", const=DEFAULT_WINDOW_STRIDE,
                    help=f"window:stride grid (default when given without value: {DEFAULT_WINDOW_STRIDE})")
    sw.add_argument("--model", choices=("hibehrt", "behrt"), default="hibehrt")
    sw.add_argument("--pretrained", help="start every fraction from this byol checkpoint")

    cx = parsers["complexity"]
    cx.add_argument("--lengths", help="comma-separated sequence lengths")
    cx.add_argument("--l-min", type=int, default=50)
    cx.add_argument("--l-max", type=int, default=2000)
    cx.add_argument("--l-step", type=int, default=50)
    cx.add_argument("--print", action="store_true", help="also print the table to stdout")
    return p


def _exit_code(err: BaseException) -> int:
    if isinstance(err, HiBehrtError):
        return err.exit_code
    if isinstance(err, (FileNotFoundError, IsADirectoryError)):
        return DataError.exit_code
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_run_config(args.config, _parse_set(args.set))
        out_dir = Path(args.out_dir or cfg.paths.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fn, _ = COMMANDS[args.command]
        outputs = fn(cfg, args, out_dir)
        write_manifest(out_dir, args.command, cfg, outputs)
        for path in outputs:
            print(path)
        return 0
    except (HiBehrtError, FileNotFoundError, IsADirectoryError) as err:
        name = "FileNotFound" if isinstance(err, FileNotFoundError) else type(err).__name__
        msg = str(err).replace("\n", " ")
        print(f"error: {name}: {msg}", file=sys.stderr)
        return _exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
