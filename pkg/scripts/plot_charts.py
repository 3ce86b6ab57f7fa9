"""Render the report's chart CSVs as PNG bar charts.

    python scripts/plot_charts.py out/report

Needs matplotlib, which the package itself does not depend on.
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot(csv_path: Path, out_dir: Path) -> Path:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    label_key = next(k for k in rows[0] if k not in ("count", "percent"))
    labels = [r[label_key] for r in rows][::-1]
    values = [float(r["percent"]) for r in rows][::-1]
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(rows) + 1.2))
    ax.barh(labels, values, color="#4C72B0")
    ax.set_xlabel("percent of valid responses")
    ax.set_title(csv_path.stem)
    for y, v in enumerate(values):
        ax.text(v, y, f" {v:.1f}%", va="center", fontsize=8)
    fig.tight_layout()
    target = out_dir / f"{csv_path.stem}.png"
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target


def main(argv=None):
    parser = argparse.ArgumentParser(description="Plot report chart data.")
    parser.add_argument("report_dir", type=Path)
    parser.add_argument("--out", type=Path, help="image directory (default: <report_dir>/charts)")
    args = parser.parse_args(argv)
    charts = args.report_dir / "charts"
    out = args.out or charts
    out.mkdir(parents=True, exist_ok=True)
    for path in sorted(charts.glob("*.csv")):
        if path.stem == "net_support":
            continue
        print(plot(path, out))


if __name__ == "__main__":
    main()
