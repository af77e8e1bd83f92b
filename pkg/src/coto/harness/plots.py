"""Training-curve figures as small self-contained SVG files.

Every plotted series carries its exact values in ``data-x`` / ``data-y``
attributes and the root element records the axis mapping, so a figure can be
parsed back and checked against the CSV it was drawn from.
"""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .experiment import EvalReport, load_manifest

WIDTH, HEIGHT = 640, 400
BOX = (70.0, 20.0, 600.0, 350.0)  # left, top, right, bottom in px
COLORS = {
    "coto_ppo": "#1f77b4",
    "pure_ppo": "#d62728",
    "coto_policy_only": "#2ca02c",
    "coto_pure_ppo": "#9467bd",
}
GATED_TRAINING = ("coto_ppo", "coto_policy_only")


def read_log(run_dir) -> list[dict]:
    path = Path(run_dir) / "train_log.csv"
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def collect_runs(run_dirs):
    """Group run directories by arm; returns (arm -> [(seed, rows)], TO baseline or None)."""
    groups: dict[str, list] = {}
    baseline = None
    for d in run_dirs:
        m = load_manifest(d)
        if m["arm"] == "pure_to":
            baseline = EvalReport.load(Path(d) / "eval_report.json").mean
            continue
        rows = read_log(d)
        if rows:
            groups.setdefault(m["arm"], []).append((m["seed"], rows))
    return groups, baseline


def _series(rows, key):
    xs = [r["timestep"] for r in rows if math.isfinite(r[key])]
    ys = [r[key] for r in rows if math.isfinite(r[key])]
    return xs, ys


def _nums(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


class _Axes:
    def __init__(self, xmin, xmax, ymin, ymax):
        if xmax <= xmin:
            xmax = xmin + 1.0
        if ymax <= ymin:
            ymin, ymax = ymin - 0.5, ymax + 0.5
        pad = 0.05 * (ymax - ymin)
        self.xmin, self.xmax, self.ymin, self.ymax = xmin, xmax, ymin - pad, ymax + pad

    def px(self, x, y):
        l, t, r, b = BOX
        return (l + (x - self.xmin) / (self.xmax - self.xmin) * (r - l),
                b - (y - self.ymin) / (self.ymax - self.ymin) * (b - t))

    def points(self, xs, ys) -> str:
        return " ".join("%.3f,%.3f" % self.px(x, y) for x, y in zip(xs, ys))


def _figure(title, ylabel, curves, bands, baseline, axes: _Axes):
    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg", "width": str(WIDTH), "height": str(HEIGHT),
        "viewBox": f"0 0 {WIDTH} {HEIGHT}", "data-title": title,
        "data-xmin": repr(axes.xmin), "data-xmax": repr(axes.xmax),
        "data-ymin": repr(axes.ymin), "data-ymax": repr(axes.ymax),
        "data-box": _nums(BOX),
    })
    l, t, r, b = BOX
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(WIDTH), "height": str(HEIGHT), "fill": "white"})
    ET.SubElement(svg, "rect", {"class": "frame", "x": str(l), "y": str(t), "width": str(r - l), "height": str(b - t),
                                "fill": "none", "stroke": "#444"})
    for k in range(5):
        xv = axes.xmin + k * (axes.xmax - axes.xmin) / 4
        yv = axes.ymin + k * (axes.ymax - axes.ymin) / 4
        px, _ = axes.px(xv, axes.ymin)
        _, py = axes.px(axes.xmin, yv)
        ET.SubElement(svg, "text", {"class": "xtick", "x": "%.1f" % px, "y": str(b + 16), "font-size": "11",
                                    "text-anchor": "middle"}).text = f"{xv:.0f}"
        ET.SubElement(svg, "text", {"class": "ytick", "x": str(l - 6), "y": "%.1f" % (py + 4), "font-size": "11",
                                    "text-anchor": "end"}).text = f"{yv:.2f}"
    ET.SubElement(svg, "text", {"x": str((l + r) / 2), "y": str(HEIGHT - 8), "font-size": "12",
                                "text-anchor": "middle"}).text = "timesteps"
    ET.SubElement(svg, "text", {"x": "14", "y": str((t + b) / 2), "font-size": "12", "text-anchor": "middle",
                                "transform": f"rotate(-90 14 {(t + b) / 2})"}).text = ylabel
    for band in bands:
        xs, lo, hi = band["xs"], band["lo"], band["hi"]
        pts = axes.points(xs, hi) + " " + axes.points(xs[::-1], lo[::-1])
        ET.SubElement(svg, "polygon", {"class": "band", "data-arm": band["arm"], "points": pts,
                                       "fill": COLORS.get(band["arm"], "#777"), "fill-opacity": "0.2", "stroke": "none",
                                       "data-x": _nums(xs), "data-lo": _nums(lo), "data-hi": _nums(hi)})
    for c in curves:
        attrs = {"class": "curve", "data-arm": c["arm"], "data-label": c["label"], "fill": "none",
                 "stroke": COLORS.get(c["arm"], "#777"), "stroke-width": "1.5",
                 "points": axes.points(c["xs"], c["ys"]), "data-x": _nums(c["xs"]), "data-y": _nums(c["ys"])}
        ET.SubElement(svg, "polyline", attrs)
    if baseline is not None:
        _, py = axes.px(axes.xmin, baseline)
        ET.SubElement(svg, "line", {"class": "baseline", "data-label": "pure_to", "data-y": repr(float(baseline)),
                                    "x1": str(l), "x2": str(r), "y1": "%.3f" % py, "y2": "%.3f" % py,
                                    "stroke": "#000", "stroke-dasharray": "6,4"})
    for k, c in enumerate(curves + ([{"arm": "pure_to", "label": "pure_to (TO only)"}] if baseline is not None else [])):
        ET.SubElement(svg, "text", {"class": "legend", "x": str(l + 10), "y": str(t + 14 + 14 * k), "font-size": "11",
                                    "fill": COLORS.get(c["arm"], "#000")}).text = c["label"]
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def _build(groups, key, arms, baseline, title, ylabel):
    curves, bands, all_x, all_y = [], [], [], []
    for arm in arms:
        runs = sorted(groups[arm], key=lambda sr: sr[0])
        if len(runs) == 1:
            seed, rows = runs[0]
            xs, ys = _series(rows, key)
            curves.append({"arm": arm, "label": f"{arm} seed {seed}", "xs": xs, "ys": ys})
            all_x += xs
            all_y += ys
            continue
        per = [dict(zip(*_series(rows, key))) for _, rows in runs]
        xs = sorted(set.intersection(*(set(p) for p in per)))
        if not xs:
            continue
        Y = np.array([[p[x] for x in xs] for p in per])
        lo, hi, mean = Y.min(axis=0).tolist(), Y.max(axis=0).tolist(), Y.mean(axis=0).tolist()
        bands.append({"arm": arm, "xs": xs, "lo": lo, "hi": hi})
        curves.append({"arm": arm, "label": f"{arm} mean of {len(runs)} seeds", "xs": xs, "ys": mean})
        all_x += xs
        all_y += lo + hi
    if not all_x:
        return None
    ys_for_range = all_y + ([baseline] if baseline is not None else [])
    axes = _Axes(min(all_x), max(all_x), min(ys_for_range), max(ys_for_range))
    return _figure(title, ylabel, curves, bands, baseline, axes)


def emit_plots(run_dirs, out_dir, baseline: float | None = None) -> list[Path]:
    """Write reward.svg (with the TO baseline dashed) and rl_fraction.svg for gated runs.

    The baseline comes from ``baseline`` or from a pure_to run among ``run_dirs``.
    """
    groups, found = collect_runs(run_dirs)
    if not groups:
        raise ValueError("no training logs found in the given run directories")
    baseline = baseline if baseline is not None else found
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    arms = list(groups)
    svg = _build(groups, "ep_reward_mean", arms, baseline, "Episode reward mean", "episode reward mean")
    if svg is None:
        raise ValueError("training logs contain no finished episodes")
    (out / "reward.svg").write_text(svg)
    written.append(out / "reward.svg")
    gated = [a for a in arms if a in GATED_TRAINING]
    if gated:
        svg = _build(groups, "rl_fraction", gated, None, "Fraction of steps choosing the policy action", "RL fraction")
        (out / "rl_fraction.svg").write_text(svg)
        written.append(out / "rl_fraction.svg")
    return written


def parse_svg(path) -> dict:
    """Read back a figure: curves, bands and baseline with their data and pixel coordinates."""
    root = ET.parse(path).getroot()
    ns = "{http://www.w3.org/2000/svg}"

    def floats(s):
        return [float(v) for v in s.split()]

    axes = _Axes.__new__(_Axes)
    axes.xmin, axes.xmax = float(root.get("data-xmin")), float(root.get("data-xmax"))
    axes.ymin, axes.ymax = float(root.get("data-ymin")), float(root.get("data-ymax"))
    l, t, r, b = floats(root.get("data-box"))

    def to_data(px, py):
        return (axes.xmin + (px - l) / (r - l) * (axes.xmax - axes.xmin),
                axes.ymin + (b - py) / (b - t) * (axes.ymax - axes.ymin))

    def pixel_points(s):
        return [to_data(*map(float, p.split(","))) for p in s.split()]

    curves = [
        {"arm": e.get("data-arm"), "label": e.get("data-label"), "xs": floats(e.get("data-x")),
         "ys": floats(e.get("data-y")), "decoded": pixel_points(e.get("points"))}
        for e in root.iter(f"{ns}polyline")
    ]
    bands = [
        {"arm": e.get("data-arm"), "xs": floats(e.get("data-x")), "lo": floats(e.get("data-lo")),
         "hi": floats(e.get("data-hi"))}
        for e in root.iter(f"{ns}polygon")
    ]
    base = [e for e in root.iter(f"{ns}line") if e.get("class") == "baseline"]
    baseline = None
    if base:
        baseline = {"y": float(base[0].get("data-y")), "dash": base[0].get("stroke-dasharray"),
                    "decoded": to_data(l, float(base[0].get("y1")))[1]}
    return {"curves": curves, "bands": bands, "baseline": baseline, "scale": (axes.xmax - axes.xmin, axes.ymax - axes.ymin)}
