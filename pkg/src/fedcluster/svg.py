"""Minimal SVG line plots for metrics CSVs. No plotting dependency; the file
is built with ElementTree so the output is always well-formed XML."""

import csv
import math
import os
import xml.etree.ElementTree as ET

from .errors import ConfigurationError

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
)

WIDTH, HEIGHT = 880, 560
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 80, 24, 24, 56


def read_series(csv_path, x_field, y_field, log_y):
    xs, ys = [], []
    label = os.path.splitext(os.path.basename(csv_path))[0]
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or x_field not in reader.fieldnames \
                or y_field not in reader.fieldnames:
            raise ConfigurationError(
                f"{csv_path}: needs columns {x_field!r} and {y_field!r}, "
                f"has {reader.fieldnames}"
            )
        for i, row in enumerate(reader):
            x = float(row[x_field])
            y = float(row[y_field])
            if log_y and y <= 0:
                raise ConfigurationError(
                    f"{csv_path} row {i + 2}: {y_field}={y} not positive, "
                    "cannot plot on a log axis"
                )
            xs.append(x)
            ys.append(y)
        if reader.fieldnames and "run_id" in reader.fieldnames and xs:
            with open(csv_path, newline="") as fh2:
                first = next(csv.DictReader(fh2))
                label = first["run_id"] or label
    if not xs:
        raise ConfigurationError(f"{csv_path}: no data rows")
    return label, xs, ys


def _ticks(lo, hi, n=5):
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)], lo, hi


def _fmt(v):
    return f"{v:.4g}"


def render_plot(csv_paths, out_path, x_field="round", y_field="train_loss", log_y=False):
    """One polyline per CSV; returns the number of series drawn."""
    series = [read_series(p, x_field, y_field, log_y) for p in csv_paths]
    if not series:
        raise ConfigurationError("no input CSVs")

    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [math.log10(y) if log_y else y for _, _, ys in series for y in ys]
    xticks, xlo, xhi = _ticks(min(all_x), max(all_x))
    yticks, ylo, yhi = _ticks(min(all_y), max(all_y))

    iw = WIDTH - MARGIN_L - MARGIN_R
    ih = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - xlo) / (xhi - xlo) * iw

    def py(y):
        return MARGIN_T + ih - (y - ylo) / (yhi - ylo) * ih

    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                      width=str(WIDTH), height=str(HEIGHT),
                      viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(root, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT),
                  fill="white")

    axes = ET.SubElement(root, "g", attrib={"stroke": "#333", "stroke-width": "1"})
    ET.SubElement(axes, "line", x1=str(MARGIN_L), y1=str(MARGIN_T + ih),
                  x2=str(MARGIN_L + iw), y2=str(MARGIN_T + ih))
    ET.SubElement(axes, "line", x1=str(MARGIN_L), y1=str(MARGIN_T),
                  x2=str(MARGIN_L), y2=str(MARGIN_T + ih))

    labels = ET.SubElement(root, "g", attrib={
        "font-family": "sans-serif", "font-size": "12", "fill": "#333"})
    for tx in xticks:
        ET.SubElement(axes, "line", x1=f"{px(tx):.2f}", y1=str(MARGIN_T + ih),
                      x2=f"{px(tx):.2f}", y2=str(MARGIN_T + ih + 5))
        el = ET.SubElement(labels, "text", x=f"{px(tx):.2f}",
                           y=str(MARGIN_T + ih + 20), attrib={"text-anchor": "middle"})
        el.text = _fmt(tx)
    for ty in yticks:
        ET.SubElement(axes, "line", x1=str(MARGIN_L - 5), y1=f"{py(ty):.2f}",
                      x2=str(MARGIN_L), y2=f"{py(ty):.2f}")
        el = ET.SubElement(labels, "text", x=str(MARGIN_L - 9), y=f"{py(ty) + 4:.2f}",
                           attrib={"text-anchor": "end"})
        el.text = _fmt(10 ** ty if log_y else ty)

    xl = ET.SubElement(labels, "text", x=str(MARGIN_L + iw / 2), y=str(HEIGHT - 12),
                       attrib={"text-anchor": "middle"})
    xl.text = x_field
    yl = ET.SubElement(labels, "text", x="18", y=str(MARGIN_T + ih / 2), attrib={
        "text-anchor": "middle",
        "transform": f"rotate(-90 18 {MARGIN_T + ih / 2})"})
    yl.text = f"log10 {y_field}" if log_y else y_field

    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{px(x):.2f},{py(math.log10(y) if log_y else y):.2f}"
            for x, y in zip(xs, ys)
        )
        ET.SubElement(root, "polyline", points=pts, fill="none", stroke=color,
                      attrib={"stroke-width": "1.5"})
        ly = MARGIN_T + 16 + 18 * i
        ET.SubElement(root, "rect", x=str(MARGIN_L + iw - 150), y=str(ly - 9),
                      width="12", height="12", fill=color)
        el = ET.SubElement(labels, "text", x=str(MARGIN_L + iw - 132), y=str(ly + 2))
        el.text = label

    tree = ET.ElementTree(root)
    ET.indent(tree)
    tree.write(out_path, xml_declaration=True, encoding="unicode")
    return len(series)
