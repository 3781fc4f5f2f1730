"""Command-line entry point: ``spiderfl {run,baseline,inspect,partition}``.

Exit codes: 0 success, 1 other library error, 2 usage or manifest error,
3 dataset format error, 4 partition/split error, 5 non-finite values,
6 aggregation error, 7 internal invariant violation, 8 file I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import lda_partition, load_partition, save_partition
from .errors import SpiderError, UsageError
from .federation import DataConfig, load_dataset, run_federation
from .manifest import Manifest, override, parse_manifest, serialize_manifest
from .report import emit_reports
from .search_space import ArchMask, count_flops, count_params, export_dot

IO_EXIT = 8
BASELINES = ("fedavg", "ditto", "local-adapt")


def _dataset_arg(text: str) -> DataConfig:
    if text == "synthetic":
        return DataConfig()
    if text.startswith("cifar10:") and len(text) > len("cifar10:"):
        return DataConfig(source="cifar10", path=text[len("cifar10:"):])
    raise argparse.ArgumentTypeError("expected 'synthetic' or 'cifar10:<path>'")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment manifest (INI key = value sections)")
    p.add_argument("--seed", type=int, help="global seed; overrides [run] seed")
    p.add_argument("--out", help="output directory; overrides [run] out")
    p.add_argument("--dataset", type=_dataset_arg, help="synthetic | cifar10:<path>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spiderfl", description="Personalized federated architecture search simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run SPIDER (or any --mode) and write reports")
    _common(run)
    run.add_argument("--mode", choices=("spider", "ditto", "local-adapt", "fedavg"), default=None)

    base = sub.add_parser("baseline", help="run a baseline and write reports")
    _common(base)
    base.add_argument("--mode", choices=BASELINES, default="fedavg")

    ins = sub.add_parser("inspect", help="print a saved mask as DOT with its cost")
    ins.add_argument("path", type=Path, help="mask_client_<k>.json or a .dot file")
    ins.add_argument("--config", type=Path, help="manifest giving the supernet geometry for costs")

    part = sub.add_parser("partition", help="materialize an LDA partition to a JSON file")
    _common(part)
    part.add_argument("output", type=Path, help="partition file to write")
    return parser


def _load_manifest(args) -> Manifest:
    m = parse_manifest(args.config.read_text(encoding="utf-8")) if args.config else Manifest()
    mode = getattr(args, "mode", None)
    return override(m, seed=args.seed, mode=mode, dataset=args.dataset, out=args.out)


def _run(args) -> int:
    m = _load_manifest(args)
    if m.out is None:
        raise UsageError("no output directory: pass --out or set [run] out")
    cfg = m.config
    dataset = load_dataset(cfg)
    parts = load_partition(m.partition_file) if m.partition_file else None
    result = run_federation(cfg, dataset=dataset, partition=parts)
    out = Path(m.out)
    emit_reports(result, out)
    (out / "manifest.ini").write_text(serialize_manifest(m), encoding="utf-8")
    if result.reports:
        last = result.reports[-1]
        print(f"{cfg.trainer.mode}: round {last.round} accuracy {last.mean_accuracy:.4f} +/- {last.std_accuracy:.4f}")
    print(f"reports written to {out}")
    return 0


def _inspect(args) -> int:
    text = args.path.read_text(encoding="utf-8")
    if args.path.suffix == ".dot":
        sys.stdout.write(text)
        return 0
    mask = ArchMask.loads(text)
    sys.stdout.write(export_dot(mask))
    if args.config:
        spec = parse_manifest(args.config.read_text(encoding="utf-8")).config.supernet
        print(f"// params {count_params(mask, spec)} flops {count_flops(mask, spec)}")
    return 0


def _partition(args) -> int:
    m = _load_manifest(args)
    cfg = m.config
    dataset = load_dataset(cfg)
    parts = lda_partition(dataset.labels, cfg.partition)
    save_partition(parts, cfg.partition, args.output)
    print(f"{len(parts)} clients, sizes {[len(p) for p in parts]} -> {args.output}")
    return 0


COMMANDS = {"run": _run, "baseline": _run, "inspect": _inspect, "partition": _partition}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SpiderError as exc:
        where = f" (round {exc.round})" if hasattr(exc, "round") else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
