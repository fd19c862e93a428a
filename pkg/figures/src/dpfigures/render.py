"""Render dpfilter outputs into deterministic PNG + SVG figures.

A figure spec is a small JSON object::

    {"kind": "decay",
     "inputs": {"trajectory_csv": "...", "decay_json": "..."},
     "output": "figs/decay"}

``output`` may carry a .png/.svg suffix or none; both formats are always
written.  Overlay quantities (decay slope, Born expectations and error bars)
come from the diagnostics JSON files as-is.  Figures carry no timestamps and
use a pinned style, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

FIGURE_KINDS = ("decay", "collapse", "born", "fidelity", "qq")

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "dpfigures",
    "path.simplify": False,
}


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: dict
    output: str

    @classmethod
    def from_file(cls, path) -> "FigureSpec":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        for key in ("kind", "inputs", "output"):
            if key not in obj:
                raise RenderError(f"figure spec {path} is missing {key!r}")
        if obj["kind"] not in FIGURE_KINDS:
            raise RenderError(
                f"unknown figure kind {obj['kind']!r}; choose from {FIGURE_KINDS}")
        return cls(kind=obj["kind"], inputs=dict(obj["inputs"]), output=obj["output"])


@dataclass(frozen=True)
class RenderResult:
    png: Path
    svg: Path
    overlay: dict


def _input_path(spec: FigureSpec, key: str) -> Path:
    if key not in spec.inputs:
        raise RenderError(f"figure spec needs inputs.{key}")
    path = Path(spec.inputs[key])
    if not path.exists():
        raise RenderError(f"input file not found: {path}")
    return path


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.asarray(rows, dtype=float)


def _column(header, data, name, path) -> np.ndarray:
    if name not in header:
        raise RenderError(f"column {name!r} missing from {path}")
    return data[:, header.index(name)]


def _read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# figure builders (each returns the overlay metadata it used)
# ---------------------------------------------------------------------------

def _draw_decay(spec: FigureSpec, ax) -> dict:
    csv_path = _input_path(spec, "trajectory_csv")
    fit = _read_json(_input_path(spec, "decay_json"))
    b1, b2 = fit["pair"]
    header, data = _read_csv(csv_path)
    t = _column(header, data, "time", csv_path)
    coh = _column(header, data, f"coh:{b1}:{b2}", csv_path)
    slope = fit["analytic_rate"]
    ax.semilogy(t, coh, "o", ms=3.5, label=f"master coherence ({b1},{b2})")
    ax.semilogy(t, coh[0] * np.exp(-slope * (t - t[0])), "-",
                label=f"analytic rate {slope:.4g}")
    ax.set_xlabel("time")
    ax.set_ylabel("|coherence|")
    ax.set_title("position-basis coherence decay")
    ax.legend()
    return {"slope": slope, "fitted_rate": fit.get("fitted_rate")}


def _draw_collapse(spec: FigureSpec, ax) -> dict:
    csv_path = _input_path(spec, "variance_csv")
    header, data = _read_csv(csv_path)
    t = _column(header, data, "time", csv_path)
    names = [h for h in header if h.startswith("var_")]
    if not names:
        raise RenderError(f"no var_* columns in {csv_path}")
    for name in names:
        ax.plot(t, _column(header, data, name, csv_path), lw=0.9, alpha=0.8)
    ax.set_xlabel("time")
    ax.set_ylabel("position variance")
    ax.set_title(f"per-trajectory collapse of position variance ({len(names)} shown)")
    return {"n_trajectories": len(names)}


def _draw_born(spec: FigureSpec, ax) -> dict:
    report = _read_json(_input_path(spec, "report_json"))
    born = report.get("born") or report
    for key in ("bins", "observed", "expected", "sigma"):
        if key not in born:
            raise RenderError(
                f"born section missing {key!r} in {spec.inputs['report_json']}")
    bins = np.asarray(born["bins"])
    x = np.arange(len(bins))
    ax.bar(x, born["observed"], width=0.6, label="collapsed counts")
    ax.errorbar(x, born["expected"], yerr=3.0 * np.asarray(born["sigma"]),
                fmt="k_", capsize=6, lw=1.5, label="expected (3-sigma)")
    ax.set_xticks(x, [f"site {b}" for b in bins])
    ax.set_ylabel("trajectories")
    ax.set_title("collapse statistics vs initial weights")
    ax.legend()
    return {"expected": list(born["expected"]), "n_counted": born.get("n_counted")}


def _draw_fidelity(spec: FigureSpec, ax) -> dict:
    csv_path = _input_path(spec, "filter_csv")
    header, data = _read_csv(csv_path)
    t = _column(header, data, "time", csv_path)
    fid = _column(header, data, "fidelity", csv_path)
    ax.plot(t, fid, "-o", ms=3.5)
    ax.set_xlabel("time")
    ax.set_ylabel("fidelity to collapsed state")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("filter convergence under record replay")
    return {"final_fidelity": float(fid[-1])}


def _draw_qq(spec: FigureSpec, ax) -> dict:
    csv_path = _input_path(spec, "innovations_csv")
    header, data = _read_csv(csv_path)
    names = [h for h in header if h.startswith("z_")]
    if not names:
        raise RenderError(f"no z_* innovation columns in {csv_path}")
    samples = np.sort(np.concatenate([_column(header, data, n, csv_path)
                                      for n in names]))
    n = len(samples)
    theory = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    ax.plot(theory, samples, ".", ms=2)
    lim = float(max(abs(theory[0]), abs(theory[-1])))
    ax.plot([-lim, lim], [-lim, lim], "k-", lw=1)
    ax.set_xlabel("standard normal quantiles")
    ax.set_ylabel("innovation quantiles")
    ax.set_title(f"innovation Q-Q ({len(names)} channels, {n} increments)")
    return {"n_samples": n}


_BUILDERS = {
    "decay": _draw_decay,
    "collapse": _draw_collapse,
    "born": _draw_born,
    "fidelity": _draw_fidelity,
    "qq": _draw_qq,
}


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure spec; writes PNG and SVG, returns their paths and
    the overlay metadata actually drawn."""
    stem = Path(spec.output)
    if stem.suffix in (".png", ".svg"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        try:
            overlay = _BUILDERS[spec.kind](spec, ax)
            fig.tight_layout()
            png = stem.with_suffix(".png")
            svg = stem.with_suffix(".svg")
            fig.savefig(png, metadata={"Software": None})
            fig.savefig(svg, metadata={"Date": None})
        finally:
            plt.close(fig)
    return RenderResult(png=png, svg=svg, overlay=overlay)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if len(argv) != 1:
        print("usage: dpfigures <figure-spec.json>", file=sys.stderr)
        return 2
    try:
        result = render(FigureSpec.from_file(argv[0]))
    except (RenderError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.png} and {result.svg}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
