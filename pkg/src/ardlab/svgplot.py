"""Tiny deterministic SVG charts.

Every byte of the output is a pure function of the data: fixed palette,
fixed geometry, no timestamps, floats printed with %.6g.  Enough for the
report commands to emit line and bar charts without a plotting stack.
"""

from __future__ import annotations

from .errors import ShapeError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 64, 16, 34, 48


def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def _span(values):
    lo, hi = min(values), max(values)
    if lo == hi:
        pad = abs(lo) if lo != 0 else 1.0
        lo, hi = lo - 0.5 * pad, hi + 0.5 * pad
    return float(lo), float(hi)


def _ticks(lo: float, hi: float, n: int = 5):
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="11">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:g}" y="20" text-anchor="middle" '
            f'font-size="13">{_esc(title)}</text>',
            f'<text x="{(_ML + _W - _MR) / 2:g}" y="{_H - 10}" '
            f'text-anchor="middle">{_esc(xlabel)}</text>',
            f'<text x="14" y="{(_MT + _H - _MB) / 2:g}" text-anchor="middle" '
            f'transform="rotate(-90 14 {(_MT + _H - _MB) / 2:g})">{_esc(ylabel)}</text>',
        ]

    def axes(self, xlo, xhi, ylo, yhi, xticks: bool = True):
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        x0, x1 = _ML, _W - _MR
        y0, y1 = _H - _MB, _MT
        if xticks:
            for tx in _ticks(xlo, xhi):
                px = self.px(tx)
                self.parts.append(f'<line x1="{px:g}" y1="{y0}" x2="{px:g}" '
                                  f'y2="{y1}" stroke="#dddddd"/>')
                self.parts.append(f'<text x="{px:g}" y="{y0 + 16}" '
                                  f'text-anchor="middle">{_fmt(tx)}</text>')
        for ty in _ticks(ylo, yhi):
            py = self.py(ty)
            self.parts.append(f'<line x1="{x0}" y1="{py:g}" x2="{x1}" y2="{py:g}" '
                              f'stroke="#dddddd"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{py + 4:g}" '
                              f'text-anchor="end">{_fmt(ty)}</text>')
        self.parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" '
                          f'height="{y0 - y1}" fill="none" stroke="#333333"/>')

    def px(self, x: float) -> float:
        return _ML + (x - self.xlo) / (self.xhi - self.xlo) * (_W - _ML - _MR)

    def py(self, y: float) -> float:
        return (_H - _MB) - (y - self.ylo) / (self.yhi - self.ylo) * (_H - _MT - _MB)

    def legend(self, names):
        for i, name in enumerate(names):
            y = _MT + 14 + 16 * i
            x = _W - _MR - 150
            self.parts.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" '
                              f'fill="{PALETTE[i % len(PALETTE)]}"/>')
            self.parts.append(f'<text x="{x + 18}" y="{y + 1}">{_esc(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def line_chart(series: dict[str, tuple[list, list]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    """series: name -> (xs, ys).  Returns the SVG document text."""
    if not series:
        raise ShapeError("line_chart needs at least one series")
    all_x = [float(x) for xs, _ in series.values() for x in xs]
    all_y = [float(y) for _, ys in series.values() for y in ys]
    if not all_x:
        raise ShapeError("line_chart needs non-empty series")
    cv = _Canvas(title, xlabel, ylabel)
    cv.axes(*_span(all_x), *_span(all_y))
    for i, (name, (xs, ys)) in enumerate(series.items()):
        if len(xs) != len(ys):
            raise ShapeError(f"series {name!r} has mismatched lengths")
        pts = " ".join(f"{cv.px(float(x)):g},{cv.py(float(y)):g}"
                       for x, y in zip(xs, ys))
        color = PALETTE[i % len(PALETTE)]
        cv.parts.append(f'<polyline points="{pts}" fill="none" '
                        f'stroke="{color}" stroke-width="1.5"/>')
    cv.legend(series.keys())
    return cv.render()


def bar_chart(labels: list, series: dict[str, list], title: str = "",
              xlabel: str = "", ylabel: str = "") -> str:
    """Grouped bars: one group per label, one bar per series."""
    if not series or not labels:
        raise ShapeError("bar_chart needs labels and at least one series")
    for name, vals in series.items():
        if len(vals) != len(labels):
            raise ShapeError(f"series {name!r} length != number of labels")
    all_y = [float(v) for vals in series.values() for v in vals] + [0.0]
    cv = _Canvas(title, xlabel, ylabel)
    cv.axes(-0.5, len(labels) - 0.5, *_span(all_y), xticks=False)
    group_w = (_W - _ML - _MR) / len(labels)
    bar_w = 0.8 * group_w / len(series)
    y_zero = cv.py(max(0.0, cv.ylo))
    for i, (name, vals) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        for j, v in enumerate(vals):
            x = _ML + j * group_w + 0.1 * group_w + i * bar_w
            py = cv.py(float(v))
            top, hgt = (py, y_zero - py) if py <= y_zero else (y_zero, py - y_zero)
            cv.parts.append(f'<rect x="{x:g}" y="{top:g}" width="{bar_w:g}" '
                            f'height="{hgt:g}" fill="{color}"/>')
    for j, lab in enumerate(labels):
        px = _ML + (j + 0.5) * group_w
        cv.parts.append(f'<text x="{px:g}" y="{_H - _MB + 16}" '
                        f'text-anchor="middle">{_esc(lab)}</text>')
    cv.legend(series.keys())
    return cv.render()


def write_svg(path, svg: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(svg)
