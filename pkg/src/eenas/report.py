"""Tables and plots regenerated from an archive.

Outputs are deterministic functions of the archive (plus cached validation
outputs for the per-entry threshold sweep and confidence histograms).
"""

import csv
import io
import json
import logging
import os
from xml.sax.saxutils import escape

import numpy as np

from . import search as srch
from . import trainer as trn
from .errors import ContractViolation

log = logging.getLogger(__name__)

RESULTS_COLUMNS = [
    "index",
    "key",
    "iteration",
    "B",
    "F_M",
    "F_M_backbone",
    "F_A",
    "F_A_backbone",
    "thresholds",
    "U",
    "gamma",
    "ece",
    "seed",
    "epochs",
    "pareto",
    "knee",
]
HIST_BINS = 20
SWEEP = [round(0.1 * i, 1) for i in range(10)]


def _num(x):
    return repr(float(x))


def _list(xs):
    return "[" + ", ".join(_num(x) for x in xs) + "]"


def front_flags(entries):
    """Pareto membership and the knee marker on measured (-accuracy, MACs)."""
    pts = srch.measured_objectives(entries)
    pareto = srch.pareto_mask(pts)
    knee = np.zeros(len(entries), dtype=bool)
    knee[srch.select_tradeoff(pts, 1)[0]] = True
    return pareto, knee


def results_csv(entries):
    """One row per entry; every number is copied verbatim from the entry."""
    if not entries:
        raise ContractViolation("archive contains no entries")
    pareto, knee = front_flags(entries)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_COLUMNS)
    for i, e in enumerate(entries):
        w.writerow(
            [
                i,
                e.key,
                e.iteration,
                e.num_exits,
                _num(e.macs),
                _num(e.gamma[-1]),
                _num(e.accuracy),
                _num(e.backbone_accuracy),
                _list(e.thresholds),
                _list(e.utilization),
                _list(e.gamma),
                _list(e.ece),
                e.seed,
                e.epochs,
                int(pareto[i]),
                int(knee[i]),
            ]
        )
    return buf.getvalue()


def parse_list(cell):
    return [float(v) for v in json.loads(cell)]


# --------------------------------------------------------------------------
# SVG scatter
# --------------------------------------------------------------------------

W, H, PAD = 640, 480, 60


class Axes:
    """Linear map between data space and SVG pixel space."""

    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range

    def px(self, x):
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y):
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)

    def data_x(self, px):
        return self.x0 + (px - PAD) / (W - 2 * PAD) * (self.x1 - self.x0)

    def data_y(self, py):
        return self.y0 + (H - PAD - py) / (H - 2 * PAD) * (self.y1 - self.y0)


def _range(values, lo_pad=0.05, hi_pad=0.05):
    lo, hi = min(values), max(values)
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - lo_pad * span, hi + hi_pad * span


def pareto_svg(entries, accuracy_constraint, macs_constraint):
    """Scatter of (MACs, accuracy) with the measured front and both constraint lines."""
    if not entries:
        raise ContractViolation("archive contains no entries")
    pareto, knee = front_flags(entries)
    xs = [e.macs for e in entries]
    ys = [e.accuracy for e in entries]
    ax = Axes(_range(xs + [macs_constraint]), _range(ys + [accuracy_constraint]))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        f'data-x-min="{_num(ax.x0)}" data-x-max="{_num(ax.x1)}" data-y-min="{_num(ax.y0)}" data-y-max="{_num(ax.y1)}" '
        f'data-plot-left="{PAD}" data-plot-right="{W - PAD}" data-plot-top="{PAD}" data-plot-bottom="{H - PAD}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="14">adaptive MACs</text>',
        f'<text x="18" y="{H / 2}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {H / 2})">top-1 accuracy</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = ax.x0 + frac * (ax.x1 - ax.x0)
        yv = ax.y0 + frac * (ax.y1 - ax.y0)
        out.append(f'<text x="{ax.px(xv):.3f}" y="{H - PAD + 18}" text-anchor="middle" font-size="11">{xv / 1e6:.3g}M</text>')
        out.append(f'<text x="{PAD - 6}" y="{ax.py(yv):.3f}" text-anchor="end" font-size="11">{yv:.3g}</text>')
    out.append(
        f'<line class="constraint macs" data-value="{_num(macs_constraint)}" x1="{_num(ax.px(macs_constraint))}" '
        f'y1="{PAD}" x2="{_num(ax.px(macs_constraint))}" y2="{H - PAD}" stroke="purple" stroke-dasharray="6 4"/>'
    )
    out.append(
        f'<line class="constraint accuracy" data-value="{_num(accuracy_constraint)}" x1="{PAD}" '
        f'y1="{_num(ax.py(accuracy_constraint))}" x2="{W - PAD}" y2="{_num(ax.py(accuracy_constraint))}" stroke="red" stroke-dasharray="6 4"/>'
    )
    front = sorted((i for i in range(len(entries)) if pareto[i]), key=lambda i: (xs[i], ys[i]))
    if len(front) > 1:
        pts = " ".join(f"{ax.px(xs[i]):.3f},{ax.py(ys[i]):.3f}" for i in front)
        out.append(f'<polyline class="front" points="{pts}" fill="none" stroke="steelblue"/>')
    for i, e in enumerate(entries):
        cls = "point front" if pareto[i] else "point"
        if knee[i]:
            cls += " knee"
        color = "orange" if knee[i] else ("steelblue" if pareto[i] else "gray")
        out.append(
            f'<circle class="{cls}" data-index="{i}" data-x="{_num(xs[i])}" data-y="{_num(ys[i])}" '
            f'cx="{ax.px(xs[i]):.3f}" cy="{ax.py(ys[i]):.3f}" r="{6 if knee[i] else 4}" fill="{color}">'
            f"<title>{escape(e.key)}</title></circle>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# per-entry threshold sweep and confidence histograms
# --------------------------------------------------------------------------


def utilization_heatmap(cache, thresholds, exit_index=1, grid=SWEEP):
    """Utilization of exit ``exit_index`` (0-based) over an (eps_1, eps_2) grid.

    Thresholds beyond the first two stay at the given values.  Returns an
    array of shape (len(grid), len(grid)).
    """
    B = cache.num_exits
    if B < 2:
        raise ContractViolation("threshold sweep needs at least one early exit")
    base = list(thresholds)
    out = np.zeros((len(grid), len(grid)))
    for a, e1 in enumerate(grid):
        for b, e2 in enumerate(grid):
            t = list(base)
            t[0] = e1
            if B > 2:
                t[1] = e2
            util = trn.utilization(trn.exit_indices(cache.confs, t), B)
            out[a, b] = util[exit_index]
    return out


def heatmap_csv(cache, thresholds, grid=SWEEP):
    table = utilization_heatmap(cache, thresholds, 1, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eps1\\eps2"] + [f"{g:.1f}" for g in grid])
    for g, row in zip(grid, table):
        w.writerow([f"{g:.1f}"] + [_num(v) for v in row])
    return buf.getvalue()


def confidence_histograms(cache, bins=HIST_BINS):
    """Per-exit counts over ``bins`` equal-width bins of [0, 1].

    Early exits use their confidence head; the final exit (whose confidence is
    fixed at 1) uses its maximum softmax probability.
    """
    edges = np.linspace(0.0, 1.0, bins + 1)
    cols = []
    for i in range(cache.num_exits):
        if i == cache.num_exits - 1:
            conf = trn.softmax_np(cache.logits[:, i]).max(axis=1)
        else:
            conf = cache.confs[:, i]
        idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
        cols.append(np.bincount(idx, minlength=bins))
    return edges, np.stack(cols, axis=1)


def histogram_csv(cache, bins=HIST_BINS):
    edges, counts = confidence_histograms(cache, bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi"] + [f"exit{i + 1}" for i in range(counts.shape[1])])
    for b in range(bins):
        w.writerow([_num(edges[b]), _num(edges[b + 1])] + [int(c) for c in counts[b]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


def chosen_entry(entries, index=None):
    if not entries:
        raise ContractViolation("archive contains no entries")
    if index is None:
        return int(np.nonzero(front_flags(entries)[1])[0][0])
    if not 0 <= index < len(entries):
        raise ContractViolation(f"entry index {index} out of range for {len(entries)} entries")
    return int(index)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit_report(entries, out_dir, accuracy_constraint, macs_constraint, entry_index=None, artifacts_dir=None):
    """Write results.csv and pareto.svg, plus the sweep/histograms of one entry when its cache exists.

    Returns the list of written paths.
    """
    idx = chosen_entry(entries, entry_index)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    p = os.path.join(out_dir, "results.csv")
    _write(p, results_csv(entries))
    written.append(p)
    p = os.path.join(out_dir, "pareto.svg")
    _write(p, pareto_svg(entries, accuracy_constraint, macs_constraint))
    written.append(p)
    entry = entries[idx]
    cache = None
    if artifacts_dir:
        try:
            cache = srch.load_candidate_cache(artifacts_dir, entry.genome_obj)
        except FileNotFoundError:
            log.warning("no cached outputs for entry %d (%s); skipping sweep and histograms", idx, entry.key)
    if cache is not None:
        if cache.num_exits >= 2:
            p = os.path.join(out_dir, f"heatmap_entry{idx}.csv")
            _write(p, heatmap_csv(cache, entry.thresholds))
            written.append(p)
        else:
            log.info("entry %d has a single exit; no threshold sweep", idx)
        p = os.path.join(out_dir, f"confidence_hist_entry{idx}.csv")
        _write(p, histogram_csv(cache))
        written.append(p)
    return written
