"""Markdown/CSV tables and SVG figures computed from a run ledger.

Every number is recomputed from ledger records through :mod:`selora.stats`;
nothing is cached. Output is a pure function of the ledger contents, so two
renders of the same ledger are byte-identical.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .campaign import DESK_MODELS, Ledger, RunRecord
from .evaluation import BENCHMARKS
from .stats import PairedSample, SummaryStat, mean_sd, paired_t_test

FIGURES = ("speedup_bars", "family_bars", "benchmark_deltas", "tradeoff_scatter")
STD, SEL, CM = "standard", "selective", "selective_cm"


@dataclass
class ReportSpec:
    ledger_path: str
    out_dir: str
    figures: tuple[str, ...] = FIGURES
    families: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.figures) - set(FIGURES)
        if bad:
            raise ValueError(f"unknown figure(s): {sorted(bad)}")

    def family_of(self, model: str) -> str:
        if model in self.families:
            return self.families[model]
        if model in DESK_MODELS:
            return DESK_MODELS[model].family
        return model


def summarize(values) -> SummaryStat:
    """mean_sd for n >= 2; a single value gets nan spread."""
    values = list(values)
    if not values:
        raise ValueError("no values to summarize")
    if len(values) == 1:
        return SummaryStat(float(values[0]), math.nan, math.nan, math.nan, 1)
    return mean_sd(values)


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------

@dataclass
class Pair:
    std: RunRecord
    sel: RunRecord

    @property
    def speedup_pct(self) -> float:
        return 100.0 * (self.std.train_time_s - self.sel.train_time_s) / self.std.train_time_s

    @property
    def ratio(self) -> float:
        return self.std.train_time_s / self.sel.train_time_s


@dataclass
class Pairing:
    pairs: dict[str, list[Pair]]
    warnings: list[str]
    bases: dict[str, RunRecord]
    cm: dict[tuple[str, int], RunRecord]
    n_failed: int
    n_total: int


def pair_records(ledger: Ledger) -> Pairing:
    """Match standard and selective records on (model, seed, steps).

    Failed records are counted but never paired; a record whose partner is
    missing or failed yields a warning line and is left out.
    """
    by_key = {r.key: r for r in ledger}
    pairs: dict[str, list[Pair]] = defaultdict(list)
    warnings = []
    for r in ledger:
        if r.recipe not in (STD, SEL):
            continue
        other_recipe = SEL if r.recipe == STD else STD
        other = by_key.get((r.model, other_recipe, r.seed, r.steps))
        if not r.ok:
            continue
        if other is None or not other.ok:
            why = "missing" if other is None else "failed"
            warnings.append(f"warning: unpaired {r.recipe} record {r.model} seed {r.seed} "
                            f"steps {r.steps} ({other_recipe} partner {why}); excluded")
            continue
        if r.recipe == STD:
            pairs[r.model].append(Pair(r, other))
    for model in pairs:
        pairs[model].sort(key=lambda p: p.std.seed)
    bases = {r.model: r for r in ledger if r.recipe == "base" and r.ok}
    cm = {(r.model, r.seed): r for r in ledger if r.recipe == CM and r.ok}
    n_failed = sum(1 for r in ledger if not r.ok)
    return Pairing(dict(sorted(pairs.items())), warnings, bases, cm, n_failed, len(ledger))


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def _pm(stat: SummaryStat, digits: int = 1) -> str:
    if math.isnan(stat.sd):
        return f"{stat.mean:.{digits}f}"
    return f"{stat.mean:.{digits}f} ± {stat.sd:.{digits}f}"


def _p_text(pairs: list[Pair]) -> tuple[str, object]:
    if len(pairs) < 2:
        return "n/a", None
    res = paired_t_test(PairedSample.of([p.std.train_time_s for p in pairs],
                                        [p.sel.train_time_s for p in pairs]))
    if res.degenerate:
        return "degenerate", res
    return f"{res.p_two_sided:.4f}", res


def speedup_rows(pairing: Pairing) -> list[dict]:
    rows = []
    everything = []
    for model, pairs in pairing.pairs.items():
        everything += pairs
        p_text, res = _p_text(pairs)
        rows.append({
            "model": model, "n": len(pairs),
            "std_time": summarize(p.std.train_time_s for p in pairs),
            "sel_time": summarize(p.sel.train_time_s for p in pairs),
            "speedup": summarize(p.speedup_pct for p in pairs),
            "ratio": sum(p.ratio for p in pairs) / len(pairs),
            "wins": sum(p.speedup_pct > 0 for p in pairs),
            "p": p_text, "ttest": res,
        })
    if everything:
        p_text, res = _p_text(everything)
        rows.append({
            "model": "Overall", "n": len(everything), "std_time": None, "sel_time": None,
            "speedup": summarize(p.speedup_pct for p in everything),
            "ratio": sum(p.ratio for p in everything) / len(everything),
            "wins": sum(p.speedup_pct > 0 for p in everything),
            "p": p_text, "ttest": res,
        })
    return rows


def render_speedup_table(ledger: Ledger) -> tuple[str, str]:
    """Markdown and CSV speedup tables (per model plus an overall row)."""
    pairing = pair_records(ledger)
    rows = speedup_rows(pairing)
    md = ["| Model | Std time (s) | Sel time (s) | Speedup (%) | Ratio | p-value | wins |",
          "|---|---|---|---|---|---|---|"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "n", "std_time_mean", "std_time_sd", "sel_time_mean", "sel_time_sd",
                "speedup_mean", "speedup_sd", "ratio", "p_value", "wins"])
    for r in rows:
        std = _pm(r["std_time"]) if r["std_time"] else "---"
        sel = _pm(r["sel_time"]) if r["sel_time"] else "---"
        md.append(f"| {r['model']} | {std} | {sel} | {_pm(r['speedup'])} | {r['ratio']:.3f}× | "
                  f"{r['p']} | {r['wins']}/{r['n']} |")
        w.writerow([r["model"], r["n"],
                    f"{r['std_time'].mean:.6g}" if r["std_time"] else "",
                    f"{r['std_time'].sd:.6g}" if r["std_time"] else "",
                    f"{r['sel_time'].mean:.6g}" if r["sel_time"] else "",
                    f"{r['sel_time'].sd:.6g}" if r["sel_time"] else "",
                    f"{r['speedup'].mean:.6g}", f"{r['speedup'].sd:.6g}", f"{r['ratio']:.6g}",
                    r["p"], r["wins"]])
    return "\n".join(pairing.warnings + ([""] if pairing.warnings else []) + md) + "\n", buf.getvalue()


def _mean(xs) -> float:
    xs = list(xs)
    return sum(xs) / len(xs)


def forgetting_rows(pairing: Pairing, benchmark: str = "mmlu") -> list[dict]:
    rows = []
    for model, pairs in pairing.pairs.items():
        base = pairing.bases.get(model)
        if base is None or base.bench(benchmark) is None:
            continue
        usable = [p for p in pairs if p.std.bench(benchmark) is not None and p.sel.bench(benchmark) is not None]
        if not usable:
            continue
        b = 100.0 * base.bench(benchmark)
        std_ft = _mean(100.0 * p.std.bench(benchmark) for p in usable)
        sel_ft = _mean(100.0 * p.sel.bench(benchmark) for p in usable)
        extras = [100.0 * (p.sel.bench(benchmark) - p.std.bench(benchmark)) for p in usable]
        rows.append({"model": model, "benchmark": benchmark, "base": b, "std_ft": std_ft,
                     "std_delta": std_ft - b, "sel_ft": sel_ft, "sel_delta": sel_ft - b,
                     "extra": summarize(extras), "n": len(usable)})
    return rows


def _signed(x: float, digits: int = 1) -> str:
    return f"{x:+.{digits}f}"


def render_forgetting_table(ledger: Ledger) -> str:
    pairing = pair_records(ledger)
    md = ["| Model | Benchmark | Base | Std FT | Std Δ | Sel FT | Sel Δ | Extra |",
          "|---|---|---|---|---|---|---|---|"]
    for bench in BENCHMARKS:
        for r in forgetting_rows(pairing, bench):
            md.append(f"| {r['model']} | {bench} | {r['base']:.1f}% | {r['std_ft']:.1f}% | "
                      f"{_signed(r['std_delta'])}pp | {r['sel_ft']:.1f}% | {_signed(r['sel_delta'])}pp | "
                      f"{_signed(r['extra'].mean)}pp |")
    return "\n".join(md) + "\n"


def delta_rows(pairing: Pairing) -> list[dict]:
    rows = []
    for model, pairs in pairing.pairs.items():
        row = {"model": model}
        for bench in BENCHMARKS:
            d = [100.0 * (p.sel.bench(bench) - p.std.bench(bench)) for p in pairs
                 if p.sel.bench(bench) is not None and p.std.bench(bench) is not None]
            row[bench] = summarize(d) if d else None
        rows.append(row)
    return rows


def render_delta_table(ledger: Ledger) -> str:
    pairing = pair_records(ledger)
    md = ["| Model | " + " | ".join(f"Δ{b} (pp)" for b in BENCHMARKS) + " |",
          "|---|" + "---|" * len(BENCHMARKS)]
    for r in delta_rows(pairing):
        cells = ["n/a" if r[b] is None else f"{r[b].mean:+.2f}" for b in BENCHMARKS]
        md.append(f"| {r['model']} | " + " | ".join(cells) + " |")
    return "\n".join(md) + "\n"


def render_compute_matched_table(ledger: Ledger) -> str:
    pairing = pair_records(ledger)
    md = ["| Model | Eval loss (Std / Sel / CM-Sel) | Train time (Std / CM-Sel, s) | n |",
          "|---|---|---|---|"]
    for model, pairs in pairing.pairs.items():
        trip = [(p, pairing.cm[(model, p.std.seed)]) for p in pairs if (model, p.std.seed) in pairing.cm]
        trip = [(p, c) for p, c in trip if None not in (p.std.eval_loss, p.sel.eval_loss, c.eval_loss)]
        if not trip:
            continue
        md.append(f"| {model} | {_mean(p.std.eval_loss for p, _ in trip):.3f} / "
                  f"{_mean(p.sel.eval_loss for p, _ in trip):.3f} / {_mean(c.eval_loss for _, c in trip):.3f} | "
                  f"{_mean(p.std.train_time_s for p, _ in trip):.1f} / "
                  f"{_mean(c.train_time_s for _, c in trip):.1f} | {len(trip)} |")
    return "\n".join(md) + "\n"


# --------------------------------------------------------------------------
# SVG figures
# --------------------------------------------------------------------------

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 70
SERIES_COLORS = ("#4477aa", "#ee6677", "#228833", "#ccbb44")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _svg_open(title: str, extra: str = "") -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}"{extra}>',
            f"<title>{escape(title)}</title>",
            f'<text x="{W / 2:.2f}" y="22.00" text-anchor="middle" font-family="sans-serif" '
            f'font-size="14">{escape(title)}</text>']


def ci_half_width(stat: SummaryStat) -> float | None:
    return None if math.isnan(stat.sd) else stat.half_width


def bar_chart_svg(title: str, unit: str, groups: list[tuple[str, list[tuple[str, float, float | None]]]]) -> str:
    """Grouped bars from zero with optional CI whiskers.

    ``groups`` is ``[(label, [(series, value, half_width), ...]), ...]``. The
    root element carries ``data-scale`` (pixels per unit) and ``data-zero-y``
    so bar heights can be read back.
    """
    extent = max((abs(v) + (hw or 0.0) for _, bars in groups for _, v, hw in bars), default=0.0)
    lo = min((v - (hw or 0.0) for _, bars in groups for _, v, hw in bars), default=0.0)
    extent = extent or 1.0
    plot_h = H - TOP - BOTTOM
    neg = lo < 0
    scale = plot_h / (2 * extent) if neg else plot_h / extent
    zero_y = TOP + plot_h / 2 if neg else TOP + plot_h
    out = _svg_open(title, f' data-scale="{scale:.6f}" data-zero-y="{zero_y:.2f}"')
    out.append(f'<line class="axis" x1="{LEFT}" y1="{_f(zero_y)}" x2="{W - RIGHT}" y2="{_f(zero_y)}" '
               f'stroke="#000"/>')
    out.append(f'<text x="16.00" y="{_f(TOP + plot_h / 2)}" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16.00 {_f(TOP + plot_h / 2)})" text-anchor="middle">{escape(unit)}</text>')
    n_groups = max(len(groups), 1)
    group_w = (W - LEFT - RIGHT) / n_groups
    series = []
    for _, bars in groups:
        for s, _, _ in bars:
            if s not in series:
                series.append(s)
    for gi, (label, bars) in enumerate(groups):
        bw = group_w * 0.8 / max(len(bars), 1)
        gx = LEFT + gi * group_w + group_w * 0.1
        for bi, (s, v, hw) in enumerate(bars):
            x = gx + bi * bw
            h = abs(v) * scale
            y = zero_y - h if v >= 0 else zero_y
            color = SERIES_COLORS[series.index(s) % len(SERIES_COLORS)]
            out.append(f'<rect class="bar" x="{_f(x)}" y="{_f(y)}" width="{_f(bw * 0.9)}" height="{_f(h)}" '
                       f'fill="{color}" data-group="{escape(label)}" data-series="{escape(s)}" '
                       f'data-value="{v:.6g}"/>')
            if hw is not None:
                cx = x + bw * 0.45
                vy = zero_y - v * scale
                out.append(f'<line class="whisker" x1="{_f(cx)}" y1="{_f(vy - hw * scale)}" x2="{_f(cx)}" '
                           f'y2="{_f(vy + hw * scale)}" stroke="#000" data-group="{escape(label)}" '
                           f'data-series="{escape(s)}" data-half-width="{hw:.6g}"/>')
        out.append(f'<text x="{_f(gx + group_w * 0.4)}" y="{_f(H - BOTTOM + 18)}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{escape(label)}</text>')
    if len(series) > 1:
        for si, s in enumerate(series):
            y = H - 22
            x = LEFT + si * 120
            out.append(f'<rect class="legend" x="{_f(x)}" y="{_f(y - 10)}" width="10.00" height="10.00" '
                       f'fill="{SERIES_COLORS[si % len(SERIES_COLORS)]}"/>')
            out.append(f'<text x="{_f(x + 14)}" y="{_f(y)}" font-family="sans-serif" font-size="11">'
                       f'{escape(s)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(title: str, xlabel: str, ylabel: str,
                points: list[tuple[str, float, float, float | None, float | None]]) -> str:
    """Points with x and y CI whiskers; ``points`` is ``[(label, x, y, hx, hy), ...]``."""
    xs_lo = min(x - (hx or 0) for _, x, _, hx, _ in points)
    xs_hi = max(x + (hx or 0) for _, x, _, hx, _ in points)
    ys_lo = min(min(y - (hy or 0) for _, _, y, _, hy in points), 0.0)
    ys_hi = max(max(y + (hy or 0) for _, _, y, _, hy in points), 0.0)
    xpad = (xs_hi - xs_lo) * 0.1 or 1.0
    ypad = (ys_hi - ys_lo) * 0.1 or 1.0
    x0, x1 = xs_lo - xpad, xs_hi + xpad
    y0, y1 = ys_lo - ypad, ys_hi + ypad
    sx = (W - LEFT - RIGHT) / (x1 - x0)
    sy = (H - TOP - BOTTOM) / (y1 - y0)

    def px(x):
        return LEFT + (x - x0) * sx

    def py(y):
        return H - BOTTOM - (y - y0) * sy

    out = _svg_open(title, f' data-x-min="{x0:.6g}" data-x-scale="{sx:.6f}" '
                           f'data-y-min="{y0:.6g}" data-y-scale="{sy:.6f}"')
    out.append(f'<line class="axis" x1="{LEFT}" y1="{_f(py(0.0))}" x2="{W - RIGHT}" y2="{_f(py(0.0))}" '
               f'stroke="#999" stroke-dasharray="4 3"/>')
    out.append(f'<text x="{W / 2:.2f}" y="{H - 20:.2f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16.00" y="{_f(TOP + (H - TOP - BOTTOM) / 2)}" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16.00 {_f(TOP + (H - TOP - BOTTOM) / 2)})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for label, x, y, hx, hy in points:
        cx, cy = px(x), py(y)
        if hx is not None:
            out.append(f'<line class="whisker-x" x1="{_f(px(x - hx))}" y1="{_f(cy)}" x2="{_f(px(x + hx))}" '
                       f'y2="{_f(cy)}" stroke="#000" data-label="{escape(label)}" data-half-width="{hx:.6g}"/>')
        if hy is not None:
            out.append(f'<line class="whisker-y" x1="{_f(cx)}" y1="{_f(py(y + hy))}" x2="{_f(cx)}" '
                       f'y2="{_f(py(y - hy))}" stroke="#000" data-label="{escape(label)}" '
                       f'data-half-width="{hy:.6g}"/>')
        out.append(f'<circle class="point" cx="{_f(cx)}" cy="{_f(cy)}" r="4.00" fill="{SERIES_COLORS[0]}" '
                   f'data-label="{escape(label)}" data-x="{x:.6g}" data-y="{y:.6g}"/>')
        out.append(f'<text x="{_f(cx + 6)}" y="{_f(cy - 6)}" font-family="sans-serif" font-size="10">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def figure_speedup_bars(pairing: Pairing) -> str | None:
    groups = []
    for model, pairs in pairing.pairs.items():
        s = summarize(p.speedup_pct for p in pairs)
        groups.append((model, [("speedup", s.mean, ci_half_width(s))]))
    if not groups:
        return None
    return bar_chart_svg("Training speedup per model (mean, 95% CI)", "speedup (%)", groups)


def figure_family_bars(pairing: Pairing, spec: ReportSpec) -> str | None:
    fam: dict[str, list[float]] = defaultdict(list)
    for model, pairs in pairing.pairs.items():
        fam[spec.family_of(model)] += [p.speedup_pct for p in pairs]
    if not fam:
        return None
    groups = []
    for name in sorted(fam):
        s = summarize(fam[name])
        groups.append((name, [("speedup", s.mean, ci_half_width(s))]))
    return bar_chart_svg("Speedup by family (mean, 95% CI)", "speedup (%)", groups)


def figure_benchmark_deltas(pairing: Pairing) -> str | None:
    groups = []
    for row in delta_rows(pairing):
        bars = [(b, row[b].mean, ci_half_width(row[b])) for b in BENCHMARKS if row[b] is not None]
        if bars:
            groups.append((row["model"], bars))
    if not groups:
        return None
    return bar_chart_svg("Benchmark deltas, selective minus standard (95% CI)", "delta (pp)", groups)


def figure_tradeoff(pairing: Pairing) -> str | None:
    rows = {r["model"]: r for r in forgetting_rows(pairing, "mmlu")}
    points = []
    for model, pairs in pairing.pairs.items():
        if model not in rows:
            continue
        s = summarize(p.speedup_pct for p in pairs)
        e = rows[model]["extra"]
        points.append((model, s.mean, e.mean, ci_half_width(s), ci_half_width(e)))
    if not points:
        return None
    return scatter_svg("Speed vs. extra forgetting (mmlu)", "mean speedup (%)", "extra forgetting (pp)", points)


def render_figures(spec: ReportSpec, ledger: Ledger | None = None) -> tuple[dict[str, Path], list[str]]:
    ledger = ledger if ledger is not None else Ledger.load(spec.ledger_path)
    pairing = pair_records(ledger)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    makers = {
        "speedup_bars": lambda: figure_speedup_bars(pairing),
        "family_bars": lambda: figure_family_bars(pairing, spec),
        "benchmark_deltas": lambda: figure_benchmark_deltas(pairing),
        "tradeoff_scatter": lambda: figure_tradeoff(pairing),
    }
    written, warnings = {}, []
    for name in spec.figures:
        svg = makers[name]()
        if svg is None:
            warnings.append(f"warning: figure {name} skipped (required statistics missing)")
            continue
        path = out / f"{name}.svg"
        path.write_text(svg, encoding="utf-8")
        written[name] = path
    return written, warnings


def write_report(spec: ReportSpec) -> Path:
    """summary.md, speedup.csv and the SVG figures under ``spec.out_dir``."""
    ledger = Ledger.load(spec.ledger_path)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairing = pair_records(ledger)
    speed_md, speed_csv = render_speedup_table(ledger)
    (out / "speedup.csv").write_text(speed_csv, encoding="utf-8")
    figures, fig_warnings = render_figures(spec, ledger)
    counts = defaultdict(lambda: [0, 0])
    for r in ledger:
        counts[r.recipe][0 if r.ok else 1] += 1
    lines = ["# Run report", "",
             f"Ledger records: {pairing.n_total} ({pairing.n_total - pairing.n_failed} ok, "
             f"{pairing.n_failed} failed; failed runs are excluded from statistics).", "",
             "| recipe | ok | failed |", "|---|---|---|"]
    lines += [f"| {k} | {v[0]} | {v[1]} |" for k, v in sorted(counts.items())]
    lines += ["", "## Speedup", "", speed_md,
              "## Forgetting", "", render_forgetting_table(ledger),
              "## Benchmark deltas", "", render_delta_table(ledger),
              "## Compute-matched", "", render_compute_matched_table(ledger),
              "## Figures", ""]
    lines += [f"- {name}.svg" for name in figures]
    if fig_warnings:
        lines += [""] + fig_warnings
    path = out / "summary.md"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
