"""Figure rendering for dpfilter outputs.

Five figure kinds (decay, collapse, born, fidelity, qq), each driven by a
figure-spec JSON naming its input files.  Quantitative overlays are read from
the diagnostics JSON files, never recomputed here, so a figure can never
silently disagree with the analysis that produced its inputs.
"""

__version__ = "0.1.0"

from .render import FigureSpec, RenderResult, render

__all__ = ["FigureSpec", "RenderResult", "render"]
