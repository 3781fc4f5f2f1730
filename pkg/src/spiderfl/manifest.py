"""Experiment manifests: INI-style ``key = value`` text with sections.

Schema (every key optional; unknown sections or keys are rejected)::

    [run]        seed, rounds, mode, eval_every, workers, out
    [supernet]   num_cells, init_channels, reduction_cells
    [trainer]    eta_w, eta_v, lambda, local_epochs, batch_size,
                 finetune_epochs, finetune_lr
    [search]     warmup_rounds, recovery
    [partition]  clients, alpha, seed, min_size, max_retries, file
    [data]       source, path, classes, per_class, image_size, noise, seed
    [split]      fractions

The supernet input shape and class count follow the dataset: 3x32x32 with 10
classes for cifar10, ``3 x image_size x image_size`` with ``classes`` classes
for synthetic data. Partition and data seeds default to the run seed.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace

from .data import PartitionSpec
from .errors import ManifestError, SpiderError
from .federation import DataConfig, RunConfig
from .search_space import SupernetSpec
from .searcher import SearchSchedule
from .trainer import MODE_ALIASES, MODES, TrainerConfig


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return s


def _opt_float(s):
    return None if s.lower() in ("", "none") else float(s)


def _opt_int(s):
    return None if s.lower() in ("", "none") else int(s)


def _floats(s):
    return tuple(float(p) for p in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(p) for p in s.replace(",", " ").split())


def _positive(v):
    return v > 0


def _at_least(n):
    return lambda v: v >= n


_ANY = None

# section -> key -> (parser, check, description of the constraint)
SCHEMA = {
    "run": {
        "seed": (_int, _at_least(0), ">= 0"),
        "rounds": (_int, _at_least(0), ">= 0"),
        "mode": (_str, lambda v: v in MODES or v in MODE_ALIASES, f"one of {sorted(MODES + tuple(MODE_ALIASES))}"),
        "eval_every": (_int, _at_least(1), ">= 1"),
        "workers": (_int, _at_least(1), ">= 1"),
        "out": (_str, _ANY, ""),
    },
    "supernet": {
        "num_cells": (_int, _at_least(1), ">= 1"),
        "init_channels": (_int, _at_least(1), ">= 1"),
        "reduction_cells": (_ints, _ANY, ""),
    },
    "trainer": {
        "eta_w": (_float, _positive, "> 0"),
        "eta_v": (_float, _positive, "> 0"),
        "lambda": (_float, _at_least(0), ">= 0"),
        "local_epochs": (_int, _at_least(1), ">= 1"),
        "batch_size": (_int, _at_least(1), ">= 1"),
        "finetune_epochs": (_int, _at_least(0), ">= 0"),
        "finetune_lr": (_opt_float, lambda v: v is None or v > 0, "> 0"),
    },
    "search": {
        "warmup_rounds": (_int, _at_least(0), ">= 0"),
        "recovery": (_int, _at_least(1), ">= 1"),
    },
    "partition": {
        "clients": (_int, _at_least(1), ">= 1"),
        "alpha": (_float, _positive, "> 0"),
        "seed": (_opt_int, _ANY, ""),
        "min_size": (_int, _at_least(1), ">= 1"),
        "max_retries": (_int, _at_least(1), ">= 1"),
        "file": (_str, _ANY, ""),
    },
    "data": {
        "source": (_str, lambda v: v in ("synthetic", "cifar10"), "synthetic or cifar10"),
        "path": (_str, _ANY, ""),
        "classes": (_int, _at_least(2), ">= 2"),
        "per_class": (_int, _at_least(1), ">= 1"),
        "image_size": (_int, _at_least(1), ">= 1"),
        "noise": (_float, _at_least(0), ">= 0"),
        "seed": (_opt_int, _ANY, ""),
    },
    "split": {
        "fractions": (_floats, lambda v: len(v) in (2, 3) and abs(sum(v) - 1) <= 1e-9, "2 or 3 values summing to 1"),
    },
}


@dataclass(frozen=True)
class Manifest:
    config: RunConfig = field(default_factory=RunConfig)
    out: str | None = None
    partition_file: str | None = None
    partition_seed: int | None = None  # None: follow the run seed


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number, for error messages."""
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            lines[(section, "")] = no
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_manifest(text: str) -> Manifest:
    """Validate manifest text and build the run configuration it describes."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ManifestError("duplicate key", exc.option, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ManifestError("duplicate section", exc.section, exc.lineno) from None
    except configparser.Error as exc:
        raise ManifestError(f"malformed manifest: {exc.message.splitlines()[0]}") from None
    lines = _line_index(text)

    values: dict[str, dict] = {s: {} for s in SCHEMA}
    for section in parser.sections():
        name = section.lower()
        if name not in SCHEMA:
            raise ManifestError("unknown section", section, lines.get((name, "")))
        for key, raw in parser.items(section):
            where = lines.get((name, key))
            if key not in SCHEMA[name]:
                raise ManifestError(f"unknown key in [{name}]", key, where)
            conv, check, rule = SCHEMA[name][key]
            try:
                value = conv(raw.strip())
            except ValueError:
                raise ManifestError(f"cannot parse {raw.strip()!r} as {conv.__name__.strip('_')}", key, where) from None
            if check is not None and not check(value):
                raise ManifestError(f"value {raw.strip()!r} violates constraint {rule}", key, where)
            values[name][key] = value

    try:
        return _build(values)
    except ManifestError:
        raise
    except SpiderError as exc:
        raise ManifestError(str(exc)) from None


def _build(v: dict[str, dict]) -> Manifest:
    run, sn, tr, se, pa, da, sp = (v[s] for s in ("run", "supernet", "trainer", "search", "partition", "data", "split"))
    seed = run.get("seed", 0)
    data = DataConfig(
        source=da.get("source", "synthetic"),
        path=da.get("path"),
        classes=da.get("classes", DataConfig.classes),
        per_class=da.get("per_class", DataConfig.per_class),
        image_size=da.get("image_size", DataConfig.image_size),
        noise=da.get("noise", DataConfig.noise),
        seed=da.get("seed"),
    )
    supernet = SupernetSpec(
        num_cells=sn.get("num_cells", SupernetSpec.num_cells),
        init_channels=sn.get("init_channels", SupernetSpec.init_channels),
        reduction_cells=sn.get("reduction_cells"),
        **_data_geometry(data),
    )
    trainer = TrainerConfig(
        eta_w=tr.get("eta_w", TrainerConfig.eta_w),
        eta_v=tr.get("eta_v", TrainerConfig.eta_v),
        lam=tr.get("lambda", TrainerConfig.lam),
        local_epochs=tr.get("local_epochs", TrainerConfig.local_epochs),
        batch_size=tr.get("batch_size", TrainerConfig.batch_size),
        rounds=run.get("rounds", TrainerConfig.rounds),
        mode=run.get("mode", "spider"),
        finetune_epochs=tr.get("finetune_epochs", TrainerConfig.finetune_epochs),
        finetune_lr=tr.get("finetune_lr"),
    )
    schedule = SearchSchedule(
        warmup_rounds=se.get("warmup_rounds", SearchSchedule.warmup_rounds),
        recovery=se.get("recovery", SearchSchedule.recovery),
    )
    pseed = pa.get("seed")
    partition = PartitionSpec(
        num_clients=pa.get("clients", PartitionSpec.num_clients),
        alpha=pa.get("alpha", PartitionSpec.alpha),
        seed=seed if pseed is None else pseed,
        min_size=pa.get("min_size", PartitionSpec.min_size),
        max_retries=pa.get("max_retries", PartitionSpec.max_retries),
    )
    cfg = RunConfig(
        supernet=supernet,
        trainer=trainer,
        schedule=schedule,
        partition=partition,
        data=data,
        fractions=sp.get("fractions"),
        seed=seed,
        eval_every=run.get("eval_every", RunConfig.eval_every),
        workers=run.get("workers", RunConfig.workers),
    )
    return Manifest(cfg, out=run.get("out"), partition_file=pa.get("file"), partition_seed=pseed)


def override(
    m: Manifest,
    seed: int | None = None,
    mode: str | None = None,
    dataset: DataConfig | None = None,
    out: str | None = None,
) -> Manifest:
    """Apply command-line overrides; seeds that were left to default follow the new run seed."""
    c = m.config
    if seed is not None:
        c = replace(c, seed=seed)
        if m.partition_seed is None:
            c = replace(c, partition=replace(c.partition, seed=seed))
    if mode is not None:
        c = replace(c, trainer=replace(c.trainer, mode=mode))
    if dataset is not None:
        dataset = replace(dataset, classes=c.data.classes, per_class=c.data.per_class,
                          image_size=c.data.image_size, noise=c.data.noise, seed=c.data.seed)
        c = replace(c, data=dataset, supernet=replace(c.supernet, **_data_geometry(dataset)))
    return replace(m, config=c, out=out if out is not None else m.out)


def _data_geometry(data: DataConfig) -> dict:
    if data.source == "cifar10":
        return {"num_classes": 10, "input_shape": (3, 32, 32)}
    return {"num_classes": data.classes, "input_shape": (3, data.image_size, data.image_size)}


def serialize_manifest(m: Manifest) -> str:
    """Manifest text that parses back to an equal :class:`Manifest`."""
    c = m.config
    sn, tr, se, pa, da = c.supernet, c.trainer, c.schedule, c.partition, c.data
    sections = {
        "run": {
            "seed": c.seed,
            "rounds": tr.rounds,
            "mode": tr.mode,
            "eval_every": c.eval_every,
            "workers": c.workers,
            "out": m.out,
        },
        "supernet": {
            "num_cells": sn.num_cells,
            "init_channels": sn.init_channels,
            "reduction_cells": None if sn.reduction_cells is None else ", ".join(map(str, sn.reduction_cells)),
        },
        "trainer": {
            "eta_w": tr.eta_w,
            "eta_v": tr.eta_v,
            "lambda": tr.lam,
            "local_epochs": tr.local_epochs,
            "batch_size": tr.batch_size,
            "finetune_epochs": tr.finetune_epochs,
            "finetune_lr": tr.finetune_lr,
        },
        "search": {"warmup_rounds": se.warmup_rounds, "recovery": se.recovery},
        "partition": {
            "clients": pa.num_clients,
            "alpha": pa.alpha,
            "seed": m.partition_seed,
            "min_size": pa.min_size,
            "max_retries": pa.max_retries,
            "file": m.partition_file,
        },
        "data": {
            "source": da.source,
            "path": da.path,
            "classes": da.classes,
            "per_class": da.per_class,
            "image_size": da.image_size,
            "noise": da.noise,
            "seed": da.seed,
        },
        "split": {"fractions": None if c.fractions is None else ", ".join(repr(float(f)) for f in c.fractions)},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items.items() if v is not None)
        out.append("")
    return "\n".join(out)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)
