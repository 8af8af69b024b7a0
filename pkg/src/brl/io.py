"""CSV and SVG artifacts: lattice fields, ray tables and overlay plots."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import Domain, ScalarField
from .raytrace import BrokenRay

HEADER_KEYS = ("nx", "ny", "hx", "hy", "ox", "oy")


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ----------------------------------------------------------------------------
# lattice fields
# ----------------------------------------------------------------------------
def grid_csv_text(field: ScalarField) -> str:
    v = np.asarray(field.values)
    if not np.all(np.isfinite(v)):
        raise ValidationError("field contains non-finite values")
    cplx = np.iscomplexobj(v)
    head = "# " + " ".join([f"nx={field.nx}", f"ny={field.ny}"]
                           + [f"{k}={_g17(getattr(field, k))}" for k in ("hx", "hy", "ox", "oy")])
    lines = [head, "i,j,re,im" if cplx else "i,j,value"]
    for i in range(field.nx):
        for j in range(field.ny):
            z = v[i, j]
            if cplx:
                lines.append(f"{i},{j},{_g17(z.real)},{_g17(z.imag)}")
            else:
                lines.append(f"{i},{j},{_g17(z)}")
    return "\n".join(lines) + "\n"


def write_grid_csv(field: ScalarField, path) -> Path:
    """Write ``field`` as ``i,j,value`` rows (``i,j,re,im`` if complex) below a lattice header."""
    return atomic_write(path, grid_csv_text(field))


def _parse_header(line: str) -> dict:
    if not line.startswith("#"):
        raise FormatError("missing '# nx= ny= hx= hy= ox= oy=' header line")
    items = {}
    for tok in line[1:].split():
        if "=" not in tok:
            raise FormatError(f"malformed header token {tok!r}")
        k, v = tok.split("=", 1)
        items[k] = v
    if set(items) != set(HEADER_KEYS):
        raise FormatError(f"header keys {sorted(items)} do not match {list(HEADER_KEYS)}")
    try:
        nx, ny = int(items["nx"]), int(items["ny"])
        geo = {k: float(items[k]) for k in ("hx", "hy", "ox", "oy")}
    except ValueError as exc:
        raise FormatError(f"bad header value: {exc}") from None
    if nx < 1 or ny < 1:
        raise FormatError("lattice dimensions must be positive")
    return {"nx": nx, "ny": ny, **geo}


def read_grid_csv(path) -> ScalarField:
    """Inverse of :func:`write_grid_csv`; raises :class:`FormatError` on any mismatch."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise FormatError("empty grid file")
    hdr = _parse_header(lines[0])
    rows = [ln for ln in lines[1:] if ln.strip()]
    cplx = False
    if rows and not rows[0][:1].isdigit():
        cols = [c.strip() for c in rows[0].split(",")]
        if cols == ["i", "j", "re", "im"]:
            cplx = True
        elif cols != ["i", "j", "value"]:
            raise FormatError(f"unexpected column header {rows[0]!r}")
        rows = rows[1:]
    nx, ny = hdr["nx"], hdr["ny"]
    if len(rows) != nx * ny:
        raise FormatError(f"expected {nx * ny} rows, found {len(rows)}")
    vals = np.zeros((nx, ny), dtype=complex if cplx else float)
    seen = np.zeros((nx, ny), dtype=bool)
    width = 4 if cplx else 3
    for ln in rows:
        parts = ln.split(",")
        if len(parts) != width:
            raise FormatError(f"row {ln!r} has {len(parts)} columns, expected {width}")
        try:
            i, j = int(parts[0]), int(parts[1])
            val = complex(float(parts[2]), float(parts[3])) if cplx else float(parts[2])
        except ValueError:
            raise FormatError(f"unparsable row {ln!r}") from None
        if not (0 <= i < nx and 0 <= j < ny) or seen[i, j]:
            raise FormatError(f"index ({i}, {j}) out of range or repeated")
        vals[i, j] = val
        seen[i, j] = True
    return ScalarField(vals, hdr["hx"], hdr["hy"], hdr["ox"], hdr["oy"])


# ----------------------------------------------------------------------------
# rays
# ----------------------------------------------------------------------------
def rays_csv_text(rays: Sequence[BrokenRay]) -> str:
    """Samples as ``ray,segment_index,t,x1,x2,xi1,xi2`` plus a commented reflection block."""
    lines = ["ray,segment_index,t,x1,x2,xi1,xi2"]
    events = []
    for r, ray in enumerate(rays):
        for k, seg in enumerate(ray.segments):
            for t, x, xi in zip(seg.t, seg.x, seg.xi):
                lines.append(",".join([str(r), str(k), _g17(t), _g17(x[0]), _g17(x[1]), _g17(xi[0]), _g17(xi[1])]))
        for k, ev in enumerate(ray.reflections):
            events.append("# " + ",".join([str(r), str(k), _g17(ev.t), _g17(ev.point[0]), _g17(ev.point[1]),
                                           _g17(ev.u), _g17(ev.margin)]))
    lines.append("# reflections: ray,index,t,x1,x2,u,margin")
    lines.extend(events)
    return "\n".join(lines) + "\n"


def write_rays_csv(rays: Sequence[BrokenRay], path) -> Path:
    return atomic_write(path, rays_csv_text(rays))


# ----------------------------------------------------------------------------
# SVG
# ----------------------------------------------------------------------------
PALETTES = {
    "viridis": ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)),
    "gray": ((0, 0, 0), (255, 255, 255)),
    "mask": ((224, 224, 224), (31, 119, 180)),
}


def palette_colors(values: np.ndarray, palette: str = "viridis", vmin=None, vmax=None) -> np.ndarray:
    """Hex colours (``#rrggbb``) for ``values`` by piecewise-linear interpolation of the palette anchors."""
    try:
        anchors = np.asarray(PALETTES[palette], dtype=float)
    except KeyError:
        raise ValidationError(f"unknown palette {palette!r}") from None
    v = np.asarray(values, dtype=float)
    lo = float(np.min(v)) if vmin is None else float(vmin)
    hi = float(np.max(v)) if vmax is None else float(vmax)
    z = np.zeros_like(v) if hi <= lo else np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    pos = z * (len(anchors) - 1)
    k = np.minimum(pos.astype(int), len(anchors) - 2)
    f = (pos - k)[..., None]
    rgb = np.rint(anchors[k] * (1 - f) + anchors[k + 1] * f).astype(int)
    out = np.empty(v.shape, dtype=object)
    for idx in np.ndindex(v.shape):
        r, g, b = rgb[idx]
        out[idx] = f"#{r:02x}{g:02x}{b:02x}"
    return out


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def emit_svg(path=None, field: Optional[ScalarField] = None, domain: Optional[Domain] = None,
             rays: Iterable[BrokenRay] = (), mask: Optional[np.ndarray] = None, palette: str = "viridis",
             size: int = 480, title: Optional[str] = None) -> str:
    """Standalone SVG of a heat-mapped lattice, the domain boundary, E and ray overlays.

    ``field`` may be complex (its modulus is drawn). ``mask`` is a boolean
    array on the field's lattice drawn in the two-tone ``mask`` palette and
    takes precedence over ``field`` values. Pixels are clipped to the domain.
    The text is returned and, when ``path`` is given, written atomically.
    """
    rays = list(rays)
    if field is not None:
        X = field.axes()
        bbox = (X[0][0] - field.hx / 2, X[0][-1] + field.hx / 2, X[1][0] - field.hy / 2, X[1][-1] + field.hy / 2)
    elif domain is not None:
        bbox = domain.bbox
    else:
        raise ValidationError("emit_svg needs a field or a domain")
    x0, x1, y0, y1 = (float(b) for b in bbox)
    scale = size / max(x1 - x0, y1 - y0)
    W, H = (x1 - x0) * scale, (y1 - y0) * scale

    def px(a):
        return (np.asarray(a) - x0) * scale

    def py(b):
        return (y1 - np.asarray(b)) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(W)}" height="{_fmt(H)}" '
           f'viewBox="0 0 {_fmt(W)} {_fmt(H)}">']
    if title:
        out.append(f"<title>{title}</title>")
    boundary = None
    if domain is not None:
        u, (b1, b2) = domain.boundary_samples(720)
        boundary = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(b1), py(b2)))
        out.append(f'<defs><clipPath id="domain"><polygon points="{boundary}"/></clipPath></defs>')
    if field is not None:
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            if m.shape != field.shape:
                raise ValidationError("mask shape does not match the field lattice")
            colors = palette_colors(m.astype(float), "mask", 0.0, 1.0)
        else:
            vals = np.asarray(field.values)
            if not np.all(np.isfinite(vals)):
                raise ValidationError("field contains non-finite values")
            colors = palette_colors(np.abs(vals) if np.iscomplexobj(vals) else vals, palette)
        clip = ' clip-path="url(#domain)"' if domain is not None else ""
        out.append(f'<g id="field"{clip} shape-rendering="crispEdges">')
        uniq = set(colors.ravel())
        if len(uniq) == 1:
            out.append(f'<rect x="0.000" y="0.000" width="{_fmt(W)}" height="{_fmt(H)}" fill="{colors.flat[0]}"/>')
        else:
            ax, ay = field.axes()
            w, h = field.hx * scale, field.hy * scale
            for i in range(field.nx):
                for j in range(field.ny):
                    out.append(f'<rect x="{_fmt(px(ax[i] - field.hx / 2))}" y="{_fmt(py(ay[j] + field.hy / 2))}" '
                               f'width="{_fmt(w)}" height="{_fmt(h)}" fill="{colors[i, j]}"/>')
        out.append("</g>")
    if domain is not None:
        out.append(f'<polygon id="boundary" points="{boundary}" fill="none" stroke="#000000" stroke-width="1.5"/>')
        if domain.E and not domain.E_full:
            for k, (a, b) in enumerate(domain.E):
                uu = np.linspace(a, b, max(2, int(180 * (b - a) / domain.boundary_length) + 2))
                e1, e2 = domain.boundary_point(np.mod(uu, domain.boundary_length))
                pts = " ".join(f"{_fmt(p)},{_fmt(q)}" for p, q in zip(px(e1), py(e2)))
                out.append(f'<polyline class="E" points="{pts}" fill="none" stroke="#d62728" stroke-width="4"/>')
    for k, ray in enumerate(rays):
        P = ray.points()
        step = max(1, len(P) // 400)
        idx = np.unique(np.concatenate([np.arange(0, len(P), step), [len(P) - 1]]))
        pts = " ".join(f"{_fmt(p)},{_fmt(q)}" for p, q in zip(px(P[idx, 0]), py(P[idx, 1])))
        out.append(f'<polyline class="ray" points="{pts}" fill="none" stroke="#ff7f0e" stroke-width="1.5"/>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        atomic_write(path, text)
    return text
