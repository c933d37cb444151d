"""Command-line front end.

Results go to stdout as TSV, progress to stderr. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error. ``--config FILE`` reads an
INI file whose ``[<command>]`` section overrides the matching flags.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .masks import Granularity, MaskTransformConfig, Surrogate, Variant
from .net import ArchError, DomainNet, build_backbone, load_arch
from .scoring import (
    ScoreSpec,
    analyze_delta,
    backbone_params,
    count_domain_bits,
    errors_tsv,
    overhead_for,
    score,
    score_per_param,
)
from .store import StoreError, domain_from_contents, load_backbone, read_delta, save_backbone, save_domain
from .store import save_training_state
from .train import SCHEDULES, Schedule, evaluate, new_domain_net, pretrain_backbone, train_domain

log = logging.getLogger("affinemask")


class UsageError(Exception):
    """Bad flags, bad configuration or missing input paths (exit 2)."""


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _out_dir_ok(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _emit(rows) -> None:
    for key, value in rows:
        print(f"{key}\t{value}")


def _schedule(args) -> Schedule:
    base = SCHEDULES[args.schedule]
    epochs = base.epochs if args.epochs is None else args.epochs
    decay = base.decay_epoch if args.decay_epoch is None else args.decay_epoch
    try:
        return Schedule(epochs, min(decay, epochs) if args.decay_epoch is None else decay)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dataset(args):
    if args.data:
        return data_mod.load_raw(_existing(args.data, "dataset"))
    if args.family:
        try:
            return data_mod.generate(args.family, args.classes, args.n_train, args.n_test, args.data_seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    raise UsageError("give --data FILE or --family NAME")


# commands


def cmd_gen_data(args) -> int:
    try:
        if args.suite:
            out = Path(args.out)
            if not out.is_dir():
                raise UsageError(f"--suite needs an existing output directory: {out}")
            sets = data_mod.generate_suite(args.suite, args.n_train, args.n_test)
            for ds in sets:
                data_mod.save_raw(ds, out / f"{ds.name}.mdld")
                _emit([(ds.name, out / f"{ds.name}.mdld")])
            return 0
        _out_dir_ok(args.out)
        if args.family == "source":
            ds = data_mod.generate_source(args.n_train, args.n_test)
        elif args.family:
            ds = data_mod.generate(args.family, args.classes, args.n_train, args.n_test, args.data_seed)
        else:
            raise UsageError("give --suite NAME or --family NAME")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data_mod.save_raw(ds, args.out)
    _emit([(ds.name, args.out)])
    return 0


def cmd_pretrain(args) -> int:
    _out_dir_ok(args.out)
    try:
        arch = load_arch(args.arch)
    except ArchError as exc:
        raise UsageError(str(exc)) from None
    ds = _dataset(args)
    arch = dataclasses.replace(arch, classes=ds.num_classes)
    sched = _schedule(args)
    bb = build_backbone(arch, args.seed)
    rep = pretrain_backbone(bb, ds, sched, args.seed, args.lr, args.batch_size)
    save_backbone(bb, args.out)
    _emit([
        ("train_accuracy", f"{rep.epoch_accuracy[-1]:.4f}" if rep.epoch_accuracy else "nan"),
        ("test_accuracy", f"{rep.final_accuracy:.4f}"),
        ("digest", f"{bb.digest():016x}"),
        ("params", backbone_params(bb)),
    ])
    return 0


def _cfg(args) -> MaskTransformConfig:
    custom = tuple(args.k.split(",")) if args.k else None
    try:
        return MaskTransformConfig(args.variant, args.surrogate, args.granularity, custom)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_add_domain(args) -> int:
    bb_path = _existing(args.backbone, "backbone")
    _out_dir_ok(args.out)
    cfg = _cfg(args)
    sched = _schedule(args)
    ds = _dataset(args)
    if args.domain_id:
        ds.name = args.domain_id
    bb = load_backbone(bb_path)
    before = bb.digest()
    try:
        net = new_domain_net(bb, ds, cfg, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep = train_domain(net, ds, sched, args.seed, args.batch_size, args.adam_lr, args.sgd_lr, args.augment)
    size = save_domain(net.domain, args.out)
    if args.state_out:
        save_training_state(net.domain, args.state_out)
    bits = count_domain_bits(net.domain)
    n_p = backbone_params(bb)
    _emit([
        ("domain", ds.name),
        ("variant", cfg.variant.value),
        ("final_train_loss", f"{rep.epoch_loss[-1]:.6f}" if rep.epoch_loss else "nan"),
        ("test_accuracy", f"{rep.final_accuracy:.4f}"),
        ("bits", bits),
        ("bits_per_param", f"{bits / n_p:.4f}"),
        ("params_ratio", f"{overhead_for(n_p, [bits]):.6f}"),
        ("file_bytes", size),
        ("backbone_unchanged", "yes" if bb.digest() == before else "NO"),
    ])
    return 0


def cmd_eval(args) -> int:
    bb = load_backbone(_existing(args.backbone, "backbone"))
    contents = read_delta(_existing(args.delta, "delta").read_bytes())
    ds = data_mod.load_raw(_existing(args.data, "dataset"))
    dom = domain_from_contents(contents, bb)
    if ds.num_classes != dom.num_classes:
        raise StoreError(f"dataset has {ds.num_classes} classes, delta has {dom.num_classes}")
    acc = evaluate(DomainNet(bb, dom), ds.test_x, ds.test_y, cache_weights=args.cache_weights)
    _emit([("domain", dom.domain_id), ("accuracy", f"{acc:.6f}"), ("error", f"{1 - acc:.6f}")])
    return 0


def read_baselines(path: Path) -> dict:
    """TSV with header ``domain<TAB>error_max`` or ``domain<TAB>finetune_error``."""
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise UsageError(f"empty baselines file {path}")
    head = lines[0].split("\t")
    if len(head) != 2 or head[0] != "domain" or head[1] not in ("error_max", "finetune_error"):
        raise UsageError("baselines header must be 'domain<TAB>error_max' or 'domain<TAB>finetune_error'")
    out = {}
    for ln in lines[1:]:
        name, value = ln.split("\t")
        e = float(value)
        out[name] = min(1.0, 2.0 * e) if head[1] == "finetune_error" else e
    return out


def cmd_score(args) -> int:
    bb_path = _existing(args.backbone, "backbone")
    baselines = read_baselines(_existing(args.baselines, "baselines file"))
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    deltas = [_existing(d, "delta") for d in args.deltas]
    bb = load_backbone(bb_path)
    names, errors, emax, bits = [], [], [], []
    for delta in deltas:
        contents = read_delta(delta.read_bytes())
        name = contents.domain_id
        if name not in baselines:
            raise UsageError(f"no baseline error for domain {name!r}")
        ds = data_mod.load_raw(_existing(str(data_dir / f"{name}.mdld"), f"dataset for {name}"))
        dom = domain_from_contents(contents, bb)
        log.info("evaluating %s", name)
        acc = evaluate(DomainNet(bb, dom), ds.test_x, ds.test_y, cache_weights=args.cache_weights)
        names.append(name)
        errors.append(1.0 - acc)
        emax.append(baselines[name])
        bits.append(count_domain_bits(dom))
    spec = ScoreSpec(tuple(emax))
    s = score(errors, spec)
    ratio = overhead_for(backbone_params(bb), bits)
    sys.stdout.write(errors_tsv(names, errors, spec))
    _emit([("S", f"{s:.4f}"), ("params_ratio", f"{ratio:.6f}"), ("S_p", f"{score_per_param(s, ratio):.4f}")])
    return 0


def cmd_inspect(args) -> int:
    contents = read_delta(_existing(args.delta, "delta").read_bytes())
    if not contents.cfg.uses_masks:
        log.warning("variant %s stores no masks", contents.cfg.variant.value)
    sys.stdout.write(analyze_delta(contents).to_tsv())
    return 0


# parser


def _data_flags(p) -> None:
    p.add_argument("--data", help="MDLD dataset file")
    p.add_argument("--family", help="generate the dataset instead (e.g. blobs, bars, digits-lite)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--n-train", type=int, default=1280)
    p.add_argument("--n-test", type=int, default=640)
    p.add_argument("--data-seed", type=int, default=0)


def _train_flags(p) -> None:
    p.add_argument("--schedule", choices=sorted(SCHEDULES), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-epoch", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="affinemask", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    ap.add_argument("--config", help="INI file; section [<command>] overrides flags")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic MDLD datasets")
    g.add_argument("--suite", help="write every domain of a suite into --out (a directory)")
    g.add_argument("--family", help="single family, or 'source' for the pretraining domain")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--n-train", type=int, default=1280)
    g.add_argument("--n-test", type=int, default=640)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and freeze a backbone (MDBB)")
    p.add_argument("--arch", default="smallnet", help="preset name or architecture file")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain, schedule="desk")

    a = sub.add_parser("add-domain", help="train one domain on a frozen backbone (MDMK)")
    a.add_argument("--backbone", required=True)
    _data_flags(a)
    _train_flags(a)
    a.add_argument("--variant", choices=[v.value for v in Variant], default="full")
    a.add_argument("--surrogate", choices=[s.value for s in Surrogate], default="identity")
    a.add_argument("--granularity", choices=[x.value for x in Granularity], default="layer")
    a.add_argument("--k", help="custom variant coefficients, e.g. F1,L0,F0,L1")
    a.add_argument("--adam-lr", type=float, default=1e-4)
    a.add_argument("--sgd-lr", type=float, default=1e-3)
    a.add_argument("--augment", action="store_true", help="random horizontal flips")
    a.add_argument("--domain-id")
    a.add_argument("--state-out", help="also write real-valued masks for resuming (npz)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_add_domain)

    e = sub.add_parser("eval", help="test accuracy of a stored domain")
    e.add_argument("--backbone", required=True)
    e.add_argument("--delta", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--cache-weights", action="store_true", help="transform weights once, not per batch")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="decathlon-style score of several domains")
    s.add_argument("--backbone", required=True)
    s.add_argument("--baselines", required=True)
    s.add_argument("--data-dir", required=True, help="directory holding <domain>.mdld files")
    s.add_argument("--cache-weights", action="store_true", help="transform weights once, not per batch")
    s.add_argument("deltas", nargs="+")
    s.set_defaults(func=cmd_score)

    i = sub.add_parser("inspect", help="per-layer mask density and coefficients")
    i.add_argument("delta")
    i.set_defaults(func=cmd_inspect)
    ap.commands = {"gen-data": g, "pretrain": p, "add-domain": a, "eval": e, "score": s, "inspect": i}
    return ap


def _config_argv(ap: argparse.ArgumentParser, argv: list, args) -> list:
    """Append the config file's flags so they win over the command line."""
    cp = configparser.ConfigParser()
    path = _existing(args.config, "config file")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"unreadable config {path}: {exc}") from None
    if not cp.has_section(args.command):
        return argv
    known = {act.dest: act for act in ap.commands[args.command]._actions if act.option_strings}
    extra = []
    for key, value in cp.items(args.command):
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown key {key!r} in [{args.command}]")
        act = known[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if cp.getboolean(args.command, key):
                extra.append(act.option_strings[-1])
        else:
            extra += [act.option_strings[-1], value]
    return argv + extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if args.config:
            args = ap.parse_args(_config_argv(ap, argv, args))
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"affinemask: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"affinemask: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"affinemask: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
