"""Sweep result tables (CSV + JSON mirror) and SVG characteristic plots."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["SweepRow", "SweepResult", "write_outputs", "read_sweep_csv"]

CSV_HEADER = "vg_V,vd_V,temp_K,current_A,conductance_S,converged,iterations"
CRLF = "\r\n"


@dataclass(frozen=True)
class SweepRow:
    vg: float
    vd: float
    temperature: float
    current: float
    conductance: float
    converged: bool
    iterations: int

    def key(self) -> tuple:
        return (f"{self.temperature:.12g}", f"{self.vg:.12g}", f"{self.vd:.12g}")


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def append(self, row: SweepRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def gate_values(self) -> list:
        seen = []
        for r in self.rows:
            if r.vg not in seen:
                seen.append(r.vg)
        return seen

    def drain_values(self) -> list:
        seen = []
        for r in self.rows:
            if r.vd not in seen:
                seen.append(r.vd)
        return seen

    def at_gate(self, vg: float) -> list:
        return [r for r in self.rows if r.vg == vg]

    def transfer(self, vd: float) -> list:
        """(V_G, I) pairs at fixed drain voltage."""
        return [(r.vg, r.current) for r in self.rows if r.vd == vd]

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.vg:.17g},{r.vd:.17g},{r.temperature:.17g},"
                f"{r.current:.17g},{r.conductance:.17g},"
                f"{'true' if r.converged else 'false'},{r.iterations}"
            )
        return CRLF.join(lines) + CRLF

    def to_json(self) -> str:
        doc = {
            "columns": CSV_HEADER.split(","),
            "rows": [
                {
                    "vg_V": r.vg,
                    "vd_V": r.vd,
                    "temp_K": r.temperature,
                    "current_A": r.current,
                    "conductance_S": r.conductance,
                    "converged": r.converged,
                    "iterations": r.iterations,
                }
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        doc = json.loads(text)
        out = cls()
        for r in doc["rows"]:
            out.append(
                SweepRow(
                    vg=r["vg_V"], vd=r["vd_V"], temperature=r["temp_K"],
                    current=r["current_A"], conductance=r["conductance_S"],
                    converged=r["converged"], iterations=r["iterations"],
                )
            )
        return out


def read_sweep_csv(path) -> SweepResult:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected sweep CSV header in {path}")
    out = SweepResult()
    for ln in lines[1:]:
        vg, vd, t, i, g, conv, it = ln.split(",")
        out.append(
            SweepRow(
                vg=float(vg), vd=float(vd), temperature=float(t),
                current=float(i), conductance=float(g),
                converged=conv.strip().lower() == "true", iterations=int(it),
            )
        )
    return out


# ---------------------------------------------------------------------------
# minimal SVG 1.1 line plots

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 20, 20, 50
_COLORS = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _svg_document(body: list, x_label: str, y_label: str) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">\n'
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>\n'
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
        f'height="{_H - _MT - _MB}" fill="none" stroke="black"/>\n'
        f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>\n'
        f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 16 {_H / 2:.1f})">{y_label}</text>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _scale(values, lo, hi, pix_lo, pix_hi):
    span = hi - lo if hi > lo else 1.0
    return [
        pix_lo + (v - lo) / span * (pix_hi - pix_lo) for v in values
    ]


def _polyline(xs, ys, color: str, label: str) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
        f'points="{pts}"><title>{label}</title></polyline>'
    )


def iv_plot_svg(result: SweepResult) -> str:
    """Drain characteristics: one polyline per gate value."""
    gates = result.gate_values()
    all_i = [r.current for r in result.rows] or [0.0]
    all_vd = [r.vd for r in result.rows] or [0.0]
    ilo, ihi = min(all_i), max(all_i)
    if ilo == ihi:
        ilo, ihi = ilo - 1e-15, ihi + 1e-15
    vlo, vhi = min(all_vd), max(all_vd)
    body = []
    for idx, vg in enumerate(gates):
        rows = sorted(result.at_gate(vg), key=lambda r: r.vd)
        xs = _scale([r.vd for r in rows], vlo, vhi, _ML, _W - _MR)
        ys = _scale([r.current for r in rows], ilo, ihi, _H - _MB, _MT)
        body.append(_polyline(xs, ys, _COLORS[idx % len(_COLORS)],
                              f"VG={vg:g} V"))
    for frac, val in ((0.0, vlo), (1.0, vhi)):
        x = _ML + frac * (_W - _ML - _MR)
        body.append(
            f'<text x="{x:.1f}" y="{_H - _MB + 18}" text-anchor="middle" '
            f'font-size="12">{val:g}</text>'
        )
    return _svg_document(body, "drain voltage (V)", "current (A)")


def conductance_gate_svg(result: SweepResult) -> str:
    """Semilog-y conductance versus gate voltage, one polyline per drain."""
    drains = result.drain_values()
    gs = [abs(r.conductance) for r in result.rows if r.conductance != 0.0]
    floor = min(gs) if gs else 1e-30
    top = max(gs) if gs else 1.0
    # decade padding around the data range
    lo_dec = math.floor(math.log10(floor)) - 1
    hi_dec = math.ceil(math.log10(top)) + 1
    vgs = sorted({r.vg for r in result.rows})
    vlo, vhi = (min(vgs), max(vgs)) if vgs else (0.0, 1.0)
    body = [f'<!-- log10 y-axis range {lo_dec} to {hi_dec} -->']
    for idx, vd in enumerate(drains):
        rows = sorted(
            (r for r in result.rows if r.vd == vd), key=lambda r: r.vg
        )
        xs = _scale([r.vg for r in rows], vlo, vhi, _ML, _W - _MR)
        logs = [
            math.log10(max(abs(r.conductance), 10.0**lo_dec)) for r in rows
        ]
        ys = _scale(logs, lo_dec, hi_dec, _H - _MB, _MT)
        body.append(_polyline(xs, ys, _COLORS[idx % len(_COLORS)],
                              f"VD={vd:g} V"))
    for dec in range(lo_dec, hi_dec + 1):
        y = _scale([dec], lo_dec, hi_dec, _H - _MB, _MT)[0]
        body.append(
            f'<text x="{_ML - 8}" y="{y:.1f}" text-anchor="end" '
            f'font-size="11">1e{dec}</text>'
        )
    return _svg_document(body, "gate voltage (V)", "conductance (S)")


def write_outputs(result: SweepResult, out_dir, formats=("csv", "json", "svg"),
                  stem: str = "sweep") -> dict:
    """Emit the result table in the requested formats; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not result.rows:
        raise ValueError("refusing to emit an empty sweep result")
    written = {}
    if "csv" in formats:
        p = out_dir / f"{stem}.csv"
        p.write_text(result.to_csv(), newline="")
        written["csv"] = p
    if "json" in formats:
        p = out_dir / f"{stem}.json"
        p.write_text(result.to_json())
        written["json"] = p
    if "svg" in formats:
        p_iv = out_dir / f"{stem}_iv.svg"
        p_iv.write_text(iv_plot_svg(result))
        written["svg_iv"] = p_iv
        p_g = out_dir / f"{stem}_conductance.svg"
        p_g.write_text(conductance_gate_svg(result))
        written["svg_conductance"] = p_g
    return written
