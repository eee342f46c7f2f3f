"""Averaged attention maps over a set of samples, as text tables and SVG scalp plots."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union
from xml.sax.saxutils import escape

import numpy as np

from .attention import distribution_view
from .graph import ElectrodeLayout
from .model import STPAM, slice_offsets


def parieto_occipital(names) -> list[str]:
    """Electrodes named P*, PO*, O* or Iz (Pz included)."""
    return [n for n in names if n == "Iz" or n.startswith(("P", "O"))]


@dataclass
class AveragedMaps:
    spatial: dict[int, np.ndarray]        # expert -> (C,)
    temporal: dict[int, np.ndarray]       # expert -> (M,)
    n_samples: int
    channel_names: tuple[str, ...]
    windows_ms: list[tuple[float, float]]

    def spatial_peak(self, expert: int = 0) -> str:
        return self.channel_names[int(np.argmax(self.spatial[expert]))]

    def temporal_peak(self, expert: int = 0) -> tuple[float, float]:
        return self.windows_ms[int(np.argmax(self.temporal[expert]))]


def slice_windows_ms(n_times: int, window: int, n_slices: int, fs: float) -> list[tuple[float, float]]:
    starts = slice_offsets(n_times, window, n_slices)
    return [(1000.0 * s / fs, 1000.0 * (s + window) / fs) for s in starts]


def averaged_maps(model: STPAM, X: np.ndarray, fs: float = 256.0, batch_size: int = 64) -> AveragedMaps:
    """Mean distribution-view heat per expert over samples (and slices, for spatial maps).

    Maps are produced in inference mode, i.e. for each expert's predicted class.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no samples to average")
    cfg = model.config
    s_sum: dict[int, np.ndarray] = {}
    t_sum: dict[int, np.ndarray] = {}
    for lo in range(0, len(X), batch_size):
        trace = model.forward(X[lo:lo + batch_size], training=False, export_maps=True)
        for e, h in trace.spatial_heat.items():
            s_sum[e] = s_sum.get(e, 0.0) + distribution_view(h.data).sum(axis=(0, 1))
        for e, h in trace.temporal_heat.items():
            t_sum[e] = t_sum.get(e, 0.0) + distribution_view(h.data).sum(axis=0)
    n = len(X)
    return AveragedMaps({e: v / (n * cfg.n_slices) for e, v in sorted(s_sum.items())},
                        {e: v / n for e, v in sorted(t_sum.items())}, n, model.layout.names,
                        slice_windows_ms(cfg.n_times, cfg.window, cfg.n_slices, fs))


def write_maps_text(maps: AveragedMaps, path: Union[str, Path]) -> None:
    lines = [f"# averaged attention over {maps.n_samples} samples"]
    for e, v in maps.spatial.items():
        lines.append(f"[spatial expert {e}]")
        lines.append("electrode\tweight")
        lines += [f"{n}\t{w:.8f}" for n, w in zip(maps.channel_names, v)]
        lines.append(f"# peak: {maps.spatial_peak(e)}")
    for e, v in maps.temporal.items():
        lines.append(f"[temporal expert {e}]")
        lines.append("slice\tstart_ms\tend_ms\tweight")
        lines += [f"{i}\t{a:.2f}\t{b:.2f}\t{w:.8f}" for i, ((a, b), w) in enumerate(zip(maps.windows_ms, v))]
        a, b = maps.temporal_peak(e)
        lines.append(f"# peak window: {a:.2f}-{b:.2f} ms")
    Path(path).write_text("\n".join(lines) + "\n")


def _color(v: float) -> str:
    # white -> dark red
    v = float(np.clip(v, 0.0, 1.0))
    r = 255
    g = b = int(round(255 * (1 - v)))
    if v > 0.5:
        r = int(round(255 - 110 * (v - 0.5) * 2))
    return f"#{r:02x}{g:02x}{b:02x}"


def topomap_svg(layout: ElectrodeLayout, weights: np.ndarray, title: str = "", size: int = 320) -> str:
    """Flat-shaded disc per electrode on the projected scalp, color scaled min-max."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    scaled = (w - lo) / (hi - lo) if hi > lo else np.ones_like(w)
    xy = layout.projected()
    reach = max(1.0, float(np.abs(xy).max())) * 1.08
    c = size / 2
    s = (size / 2 - 12) / reach
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" '
           f'viewBox="0 0 {size} {size + 24}">',
           f'<circle cx="{c}" cy="{c}" r="{s * 1.0:.1f}" fill="none" stroke="#444"/>',
           f'<polygon points="{c - 10},{c - s + 2} {c},{c - s - 10} {c + 10},{c - s + 2}" '
           f'fill="none" stroke="#444"/>']
    for name, (x, y), v in zip(layout.names, xy, scaled):
        px, py = c + s * x, c - s * y
        out.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="9" fill="{_color(v)}" stroke="#888">'
                   f'<title>{escape(name)}</title></circle>')
    if title:
        out.append(f'<text x="{c}" y="{size + 16}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_topomaps(maps: AveragedMaps, layout: ElectrodeLayout, directory: Union[str, Path]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for e, v in maps.spatial.items():
        p = directory / f"spatial_expert{e}.svg"
        p.write_text(topomap_svg(layout, v, f"spatial expert {e}"))
        written.append(p)
    return written
