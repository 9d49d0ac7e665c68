"""Markdown tables and figures from a sweep's result CSV."""

from __future__ import annotations

from pathlib import Path

from .harness import _eta_sort, aggregate, read_rows

_METRICS = [("UA", "Utility accuracy UA (%)"), ("EP_eia_nn", "Empirical privacy, EIA nearest neighbour (%)"),
            ("EP_eia_union", "Empirical privacy, EIA union over epochs (%)"),
            ("EP_eia_opt", "Empirical privacy, EIA optimisation (%)"),
            ("EP_aia", "Empirical privacy, attribute inference (%)")]


def _series_label(a: dict) -> str:
    bottom = "frozen" if a["frozen"] else "trainable"
    return f"s={a['s']}, {bottom}" + (", CTI" if a["cti"] else "")


def _cell(v) -> str:
    return "–" if v is None else f"{v:.2f}"


def markdown_tables(agg: list[dict]) -> str:
    """One table per (dataset, metric): rows are settings, columns eta ascending."""
    if not agg:
        return "# Results\n\n_No rows._\n"
    out = ["# Results", ""]
    for ds in sorted({a["dataset"] for a in agg}):
        rows = [a for a in agg if a["dataset"] == ds]
        etas = sorted({a["eta"] for a in rows}, key=_eta_sort)
        series: dict[tuple, dict] = {}
        for a in rows:
            series.setdefault((a["s"], not a["frozen"], a["cti"]), {})[a["eta"]] = a
        out.append(f"## Dataset `{ds}`")
        out.append("")
        for col, title in _METRICS:
            if all(a.get(col) is None for a in rows):
                continue
            out.append(f"### {title}")
            out.append("")
            out.append("| setting | " + " | ".join(f"η={e}" for e in etas) + " |")
            out.append("|---|" + "---|" * len(etas))
            for key in sorted(series):
                byeta = series[key]
                first = next(iter(byeta.values()))
                cells = [_cell(byeta[e].get(col)) if e in byeta else "" for e in etas]
                out.append(f"| {_series_label(first)} | " + " | ".join(cells) + " |")
            out.append("")
        n = sorted({a["n"] for a in rows})
        out.append(f"Values are means over {', '.join(map(str, n))} repetition(s).")
        out.append("")
    return "\n".join(out)


def render_figures(agg: list[dict], out_dir) -> list[Path]:
    """UA and EP against eta, one PNG per dataset and metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in sorted({a["dataset"] for a in agg}):
        rows = [a for a in agg if a["dataset"] == ds and a["eta"] != "none"]
        for col, title in _METRICS:
            pts = [a for a in rows if a.get(col) is not None]
            if not pts:
                continue
            series: dict[str, list] = {}
            for a in pts:
                series.setdefault(_series_label(a), []).append((float(a["eta"]), a[col]))
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for label, xy in sorted(series.items()):
                xy.sort()
                ax.plot([p[0] for p in xy], [p[1] for p in xy], marker="o", label=label)
            ax.set_xlabel("η")
            ax.set_ylabel(col.replace("_", " ") + " (%)")
            ax.set_title(f"{ds}: {title}", fontsize=9)
            ax.grid(alpha=0.3)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{ds}_{col}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written


def build_report(csv_path, out_dir) -> tuple[Path, list[Path]]:
    """Write ``report.md`` (with figure links) next to the figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(read_rows(csv_path))
    text = markdown_tables(agg)
    figs = render_figures(agg, out_dir) if agg else []
    if figs:
        text += "\n## Figures\n\n" + "".join(f"![{f.stem}]({f.name})\n" for f in figs)
    md = out_dir / "report.md"
    md.write_text(text)
    return md, figs
