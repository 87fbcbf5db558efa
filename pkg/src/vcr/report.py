"""Report emission: canonical JSON, one-row-per-mode CSV, and figures.

JSON is written with sorted keys and no whitespace so identical runs give
identical bytes.  Wall-clock timing is never part of the default payload
(it can't be reproducible); pass include_timing=True to embed it.  Figures
are rendered next to the delimited output with metadata scrubbed, so they
are reproducible too.
"""

from __future__ import annotations

import csv
import io
import os
import sys

from .embeddings import canonical_json_bytes, write_bytes_atomic

CSV_FIELDS = [
    "mode",
    "criterion",
    "weighting",
    "n",
    "m",
    "shots",
    "alpha",
    "beta",
    "seed",
    "repeats",
    "top1",
    "top1_std",
    "test_count",
]


def report_document(reports, config: dict, include_timing: bool = False) -> dict:
    return {
        "config": config,
        "reports": [r.as_json(include_timing=include_timing) for r in reports],
    }


def write_report_json(path: str, document: dict) -> None:
    write_bytes_atomic(path, canonical_json_bytes(document))


def reports_to_csv_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        rows.append(
            {
                "mode": r.mode,
                "criterion": r.params.get("criterion", ""),
                "weighting": r.params.get("weighting", ""),
                "n": r.params.get("n", ""),
                "m": r.params.get("m", ""),
                "shots": r.params.get("shots", ""),
                "alpha": r.params.get("alpha", ""),
                "beta": r.params.get("beta", ""),
                "seed": r.params.get("seed", ""),
                "repeats": r.repeats,
                "top1": repr(r.top1),
                "top1_std": "",
                "test_count": r.counts.get("test", ""),
            }
        )
    return rows


def aggregate_to_csv_rows(aggregate: dict) -> list[dict]:
    cfg = aggregate["config"]
    rows = []
    for entry in aggregate["modes"]:
        rows.append(
            {
                "mode": entry["mode"],
                "criterion": "",
                "weighting": "",
                "n": cfg.get("n", ""),
                "m": cfg.get("m", ""),
                "shots": cfg.get("shots", ""),
                "alpha": cfg.get("alpha", ""),
                "beta": cfg.get("beta", ""),
                "seed": ";".join(str(s) for s in cfg.get("seeds", [])),
                "repeats": cfg.get("repeats", ""),
                "top1": repr(entry["mean"]),
                "top1_std": repr(entry["std"]),
                "test_count": "",
            }
        )
    return rows


def write_report_csv(path: str, rows: list[dict]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    write_bytes_atomic(path, buf.getvalue().encode("utf-8"))


def csv_sibling(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".csv"


def _mode_values(rows: list[dict]) -> tuple[list[str], list[float], list[float]]:
    names = [r["mode"] for r in rows]
    means = [float(r["top1"]) for r in rows]
    stds = [float(r["top1_std"]) if r["top1_std"] else 0.0 for r in rows]
    return names, means, stds


def _savefig_atomic(fig, path: str, **kwargs) -> None:
    import tempfile

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", **kwargs)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_report_figures(path_stem: str, rows: list[dict]) -> list[str]:
    """Accuracy bar chart (and a per-scale curve when present) as PNGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    names, means, stds = _mode_values(rows)
    fig, ax = plt.subplots(figsize=(8, 0.5 * len(names) + 1.5))
    ypos = range(len(names))
    ax.barh(ypos, means, xerr=stds if any(stds) else None, color="#4878a8")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("top-1 accuracy")
    ax.set_xlim(0.0, 1.0)
    ax.set_title("accuracy by mode")
    fig.tight_layout()
    out = path_stem + "_modes.png"
    _savefig_atomic(fig, out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    written.append(out)

    per_scale = [(float(r["mode"].split(":", 1)[1]), float(r["top1"])) for r in rows if r["mode"].startswith("per_scale:")]
    if len(per_scale) >= 2:
        per_scale.sort()
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([s for s, _ in per_scale], [a for _, a in per_scale], marker="o", color="#4878a8")
        ax.set_xlabel("scale")
        ax.set_ylabel("top-1 accuracy")
        ax.set_title("single-view accuracy by scale")
        fig.tight_layout()
        out = path_stem + "_scales.png"
        _savefig_atomic(fig, out, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(out)
    return written


def emit_report(
    out_path: str,
    document: dict,
    rows: list[dict],
    fmt: str = "json",
    plot: bool = True,
) -> list[str]:
    """Write the report in `fmt` plus the delimited/figure siblings.

    JSON format writes <out> and <stem>.csv; CSV format writes only <out>
    as CSV.  Figures land next to the delimited output when `plot`.
    Returns every path written.
    """
    written = []
    stem, _ = os.path.splitext(out_path)
    if fmt == "json":
        write_report_json(out_path, document)
        written.append(out_path)
        write_report_csv(stem + ".csv", rows)
        written.append(stem + ".csv")
    elif fmt == "csv":
        write_report_csv(out_path, rows)
        written.append(out_path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if plot:
        try:
            written.extend(render_report_figures(stem, rows))
        except Exception as exc:  # plotting must never corrupt the report path
            print(f"warning: figure rendering failed: {exc}", file=sys.stderr)
    return written
