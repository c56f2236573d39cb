"""report.json / report.txt emission and report comparison."""

from __future__ import annotations

import json
from pathlib import Path

WALL_TIME_KEY = "wall_time_s"


def canonical_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def metric_columns(report: dict) -> list[str]:
    """Ordered metric names shown in the table for this protocol."""
    first = report["results"][report["modes"][0]]
    if report["protocol"] == "base_to_new":
        return ["base_acc", "new_acc", "harmonic_mean"]
    cols = list(first["accuracies"])
    if "target_average" in first:
        cols.append("target_average")
    return cols


def metric_value(result: dict, column: str) -> float:
    if column in result:
        return result[column]
    return result["accuracies"][column]


def render_table(report: dict) -> str:
    cols = metric_columns(report)
    modes = report["modes"]
    rows = [[m] + [f"{metric_value(report['results'][m], c):.2f}" for c in cols] for m in modes]
    if len(modes) > 1:
        ref = modes[0]
        for other in modes[1:]:
            deltas = []
            for c in cols:
                d = round(metric_value(report["results"][ref], c) - metric_value(report["results"][other], c), 2)
                deltas.append(f"{d:+.2f}")
            rows.append([f"{ref} vs. {other}"] + deltas)
    header = ["mode"] + cols
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]

    def fmt(r):
        return "  ".join(r[0].ljust(widths[0]) if i == 0 else r[i].rjust(widths[i]) for i in range(len(r)))

    lines = [f"protocol: {report['protocol']}   seed: {report['seed']}", fmt(header),
             "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(report: dict, out_dir) -> tuple[Path, Path]:
    """Write report.json (sorted keys) and report.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, txt_path = out / "report.json", out / "report.txt"
    json_path.write_text(canonical_json(report))
    txt_path.write_text(render_table(report))
    return json_path, txt_path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def _flatten(doc, prefix=""):
    if isinstance(doc, dict):
        for k in sorted(doc):
            yield from _flatten(doc[k], f"{prefix}{k}.")
    elif isinstance(doc, list):
        for i, v in enumerate(doc):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], doc


def report_diff(a: dict, b: dict, ignore=(WALL_TIME_KEY,)) -> list[str]:
    """One line per differing leaf; numeric leaves also show b - a. Empty list means identical."""
    fa = {k: v for k, v in _flatten(a) if k.split(".")[0] not in ignore}
    fb = {k: v for k, v in _flatten(b) if k.split(".")[0] not in ignore}
    lines = []
    for key in sorted(set(fa) | set(fb)):
        va, vb = fa.get(key, "<missing>"), fb.get(key, "<missing>")
        if va == vb:
            continue
        numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (va, vb))
        delta = f"  (delta {vb - va:+.4g})" if numeric else ""
        lines.append(f"{key}: {va!r} -> {vb!r}{delta}")
    return lines
