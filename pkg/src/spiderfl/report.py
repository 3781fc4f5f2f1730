"""Report files written after a run.

All text is UTF-8 with LF line endings; floats are written with ``repr`` so
they round-trip exactly.

``metrics.csv`` columns: method, round, client, phase, accuracy, params,
flops, model_size_bytes (one row per reported round and client).

``search_log.csv`` columns: round, client, kind, edge, chosen, forced,
scores (``op=accuracy`` pairs joined by ``;``).

``summary.json``: ``{"methods": {method: {...}}}`` with the final-round mean
and population std of accuracy and the mean params, FLOPs and model size.

``cells_client_<k>.dot`` and ``mask_client_<k>.json`` hold each client's
final architecture.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .federation import RunResult, estimated_model_size
from .search_space import ArchMask, count_flops, count_params, export_dot

METRICS_COLUMNS = ("method", "round", "client", "phase", "accuracy", "params", "flops", "model_size_bytes")
SEARCH_COLUMNS = ("round", "client", "kind", "edge", "chosen", "forced", "scores")


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def metrics_rows(result: RunResult):
    method = result.config.trainer.mode
    for rep in result.reports:
        for k in range(len(rep.accuracy)):
            yield (method, rep.round, k, rep.phases[k], repr(float(rep.accuracy[k])),
                   rep.params[k], rep.flops[k], rep.model_size[k])


def search_rows(result: RunResult):
    for ev in result.search_log:
        scores = ";".join(f"{op}={acc!r}" for op, acc in ev.scores.items())
        yield (ev.round, ev.client, ev.kind, ev.edge, ev.chosen, int(ev.forced), scores)


def summarize(result: RunResult) -> dict:
    spec = result.config.supernet
    full = ArchMask.full()
    entry = {
        "seed": result.config.seed,
        "rounds": result.config.trainer.rounds,
        "num_clients": result.config.num_clients,
        "supernet_params": count_params(full, spec),
        "supernet_flops": count_flops(full, spec),
        "supernet_model_size_bytes": estimated_model_size(full, spec),
    }
    if result.reports:
        last = result.reports[-1]
        entry.update(
            final_round=last.round,
            average_accuracy=last.mean_accuracy,
            std_accuracy=last.std_accuracy,
            mean_params=float(np.mean(last.params)),
            mean_flops=float(np.mean(last.flops)),
            mean_model_size_bytes=float(np.mean(last.model_size)),
        )
    else:
        entry.update(final_round=None, average_accuracy=None, std_accuracy=None,
                     mean_params=None, mean_flops=None, mean_model_size_bytes=None)
    return {"methods": {result.config.trainer.mode: entry}}


def emit_reports(result: RunResult, outdir) -> list[Path]:
    """Write every report file for ``result`` into ``outdir``; returns the paths written."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": _csv_text(METRICS_COLUMNS, metrics_rows(result)),
        "search_log.csv": _csv_text(SEARCH_COLUMNS, search_rows(result)),
        "summary.json": json.dumps(summarize(result), indent=2, sort_keys=True) + "\n",
    }
    for k, mask in enumerate(result.masks):
        files[f"cells_client_{k}.dot"] = export_dot(mask)
        files[f"mask_client_{k}.json"] = mask.dumps() + "\n"
    written = []
    for name, text in files.items():
        _write(out / name, text)
        written.append(out / name)
    return written
