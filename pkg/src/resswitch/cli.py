"""``resswitch`` command line: train, eval, analyze, interpolate-bn, count-madds, export.

Exit codes: 0 success, 2 configuration/usage error, 3 training divergence,
4 I/O or checkpoint failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, load_config, load_datasets
from .data import preprocess_eval_set
from .madds import count_madds, format_madds
from .model import SwitchableClassifier, interpolate_bn_bank
from .trainer import TrainingDiverged, train_plans

log = logging.getLogger("resswitch")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SUBCOMMANDS = ("train", "eval", "analyze", "interpolate-bn", "count-madds", "export")
ANALYSES = ("disagreement", "alpha", "gap-cdf", "bn-summary")


class UsageError(ValueError):
    pass


@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{out_dir} is locked by another invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def parse_resolutions(text):
    if not text:
        raise UsageError("--resolutions needs at least one value")
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--resolutions must be comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("--resolutions needs at least one value")
    return values


def _config_for(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        for parent in Path(args.checkpoint).resolve().parents:
            if (parent / "config.yaml").exists():
                path = parent / "config.yaml"
                break
    return load_config(path, overrides)


def _write_table(rows, path, echo=True):
    analysis.write_rows(rows, path)
    if echo:
        cols = list(rows[0])
        print("\t".join(cols))
        for row in rows:
            print("\t".join(f"{row[c]:.2f}" if isinstance(row[c], float) else str(row[c]) for c in cols))


# ---------------------------------------------------------------------------
# subcommands


def run_train(args):
    cfg = _config_for(args)
    out = Path(args.out)
    with output_lock(out):
        dump_config(cfg, out / "config.yaml")
        train_set, val_set = load_datasets(cfg.data)
        results = train_plans(cfg.model.arch, cfg.model.resolutions, cfg.model.num_classes,
                              train_set, cfg.train, cfg.data.augmentation(), val_set, out)
    for tag in results:
        print(f"{tag}: checkpoint {out / 'checkpoints' / tag / 'final'}  metrics {out / 'metrics' / (tag + '.csv')}")
    return EXIT_OK


def run_eval(args):
    model = load_checkpoint(args.checkpoint)
    resolutions = parse_resolutions(args.resolutions) if args.resolutions is not None \
        else list(model.profile)
    lo, hi = model.profile[-1], model.profile[0]
    bad = [r for r in resolutions if not lo <= r <= hi]
    if bad:
        raise UsageError(f"resolution(s) {bad} outside the interpolation range [{lo}, {hi}]")
    cfg = _config_for(args)
    _, val_set = load_datasets(cfg.data)
    if val_set is None:
        raise ConfigError("evaluation needs a validation set (data.val_path)")
    aug = cfg.data.augmentation()
    rows = []
    for r in resolutions:
        res = analysis.evaluate(model, preprocess_eval_set(val_set, r, aug), r)
        rows.append(dict(resolution=r, bank="training" if r in model.profile.resolutions else "interpolated",
                         top1=res["top1"], top5=res["top5"],
                         madds=count_madds(model.arch, r, model.num_classes).total))
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / "reports"
    _write_table(rows, out / "eval.csv")
    return EXIT_OK


def run_analyze(args):
    if args.kind not in ANALYSES:
        raise UsageError(f"unknown analysis kind {args.kind!r}; choose from {ANALYSES}")
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / "reports"
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "alpha":
        _write_table(analysis.report_alpha(model), out / "alpha.csv")
        return EXIT_OK
    if args.kind == "bn-summary":
        analysis.write_rows(analysis.bn_summary(model), out / "bn_summary.csv")
        print(out / "bn_summary.csv")
        return EXIT_OK

    cfg = _config_for(args)
    _, val_set = load_datasets(cfg.data)
    if val_set is None:
        raise ConfigError("this analysis needs a validation set (data.val_path)")
    aug = cfg.data.augmentation()
    resolutions = parse_resolutions(args.resolutions) if args.resolutions else list(model.profile)
    if args.kind == "disagreement":
        evals = [analysis.evaluate(model, preprocess_eval_set(val_set, r, aug), r) for r in resolutions]
        matrix = analysis.disagreement_matrix([e["predictions"] for e in evals], evals[0]["labels"])
        analysis.write_disagreement_csv(matrix, resolutions, out / "disagreement.csv")
        print((out / "disagreement.csv").read_text(), end="")
        return EXIT_OK
    # gap-cdf: one CSV per resolution and preprocessing tag
    for r in resolutions:
        for tag, images in (("test", preprocess_eval_set(val_set, r, aug)[0]),
                            ("train", analysis.train_preprocessed(val_set, r, aug, cfg.train.seed))):
            cdf = analysis.gap_activation_cdf(model, images, r, f"{tag}-preprocessing")
            path = out / f"gap_cdf_{r}_{tag}.csv"
            analysis.write_cdf_csv(cdf, path, points=args.points)
            print(path)
    return EXIT_OK


def run_interpolate_bn(args):
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for r in parse_resolutions(args.resolutions):
        bank = interpolate_bn_bank(model, r)
        arrays = {}
        for layer, e in bank.layers.items():
            for key in ("gamma", "beta", "running_mean", "running_var"):
                arrays[f"bn/{r}/{layer}/{key}"] = getattr(e, key).numpy().astype("<f4")
        path = out / f"bn_bank_{r}.npz"
        np.savez(path, **arrays)
        print(path)
    return EXIT_OK


def run_count_madds(args):
    cfg = _config_for(args)
    resolutions = parse_resolutions(args.resolutions) if args.resolutions else list(cfg.model.resolutions)
    rows = []
    for r in resolutions:
        rep = count_madds(cfg.model.arch, r, cfg.model.num_classes)
        rows.append(dict(arch=cfg.model.arch, resolution=r, madds=rep.total, readable=format_madds(rep.total)))
    if args.out:
        _write_table(rows, Path(args.out) / "madds.csv")
    else:
        for row in rows:
            print(f"{row['arch']}\t{row['resolution']}\t{row['madds']}\t{row['readable']}")
    return EXIT_OK


def export_resolution(model: SwitchableClassifier, r: int) -> SwitchableClassifier:
    """Fixed-resolution copy of ``model`` carrying only the (possibly interpolated) bank for ``r``."""
    bank = interpolate_bn_bank(model, r)
    single = SwitchableClassifier(model.arch, [r], model.num_classes)
    with torch.no_grad():
        own = dict(single.shared_parameters())
        for name, p in model.shared_parameters():
            own[name].copy_(p)
        for layer, m in single.bn_layers.items():
            e, slot = bank.layers[layer], m.banks[0]
            slot.weight.copy_(e.gamma)
            slot.bias.copy_(e.beta)
            slot.running_mean.copy_(e.running_mean)
            slot.running_var.copy_(e.running_var)
    return single.eval()


def run_export(args):
    model = load_checkpoint(args.checkpoint)
    if not args.out:
        raise UsageError("export needs --out")
    for r in parse_resolutions(args.resolutions):
        path = save_checkpoint(export_resolution(model, r), Path(args.out) / f"r{r}")
        print(path)
    return EXIT_OK


HANDLERS = {"train": run_train, "eval": run_eval, "analyze": run_analyze,
            "interpolate-bn": run_interpolate_bn, "count-madds": run_count_madds, "export": run_export}


def build_parser():
    p = argparse.ArgumentParser(prog="resswitch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, resolutions=False):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
        if resolutions:
            sp.add_argument("--resolutions", help="comma-separated side lengths, e.g. 32,28,24")

    sp = sub.add_parser("train", help="train a model (or the per-resolution set a mode calls for)")
    common(sp)
    sp.set_defaults(out="runs/default")
    common(sub.add_parser("eval", help="top-1/top-5 and MAdds per resolution"), True, True)
    sp = sub.add_parser("analyze", help="diagnostic reports")
    common(sp, True, True)
    sp.add_argument("--kind", required=True, help=f"one of {', '.join(ANALYSES)}")
    sp.add_argument("--points", type=int, default=0, help="thin CDF output to this many quantiles")
    sp = sub.add_parser("interpolate-bn", help="write BN banks for arbitrary resolutions")
    common(sp, True, True)
    sp.set_defaults(resolutions=None)
    common(sub.add_parser("count-madds", help="multiply-adds per resolution"), False, True)
    common(sub.add_parser("export", help="fixed-resolution checkpoints"), True, True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command in ("interpolate-bn", "export") and not args.resolutions:
            raise UsageError(f"{args.command} needs --resolutions")
        return HANDLERS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
