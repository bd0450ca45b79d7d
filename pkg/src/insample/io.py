"""File formats: region specs, samples, configs and CSV exports.

CSV dialect everywhere: comma separated, ``.`` decimal point, one header
row, LF line endings.  Floats are written with ``repr`` so that a file
round-trips to the same doubles.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .geometry import SHAPES, SupportRegion, shape

__all__ = [
    "RegionSpecError",
    "parse_region",
    "read_region_file",
    "read_sample_csv",
    "write_sample_csv",
    "write_rows",
    "write_surface_csv",
    "write_marginals_csv",
    "write_component_csv",
    "write_summary_csv",
    "read_component_csv",
    "read_config",
]


class RegionSpecError(ValueError):
    """A region spec or region file could not be parsed."""


_SHAPE_RE = re.compile(r"^\s*([A-Za-z_]+)\s*(?:\((.*)\))?\s*$")


def parse_region(spec: str) -> SupportRegion:
    """Region from a shape expression or a region file.

    ``triangle``, ``triangle(c=1.05)``, ``missing_delay_band(lo=0.2, hi=0.8)``
    name a built-in shape; ``@path`` or an existing file path loads a
    region file (see ``docs/regions.md``).
    """
    spec = str(spec).strip()
    if spec.startswith("@"):
        return read_region_file(spec[1:])
    if Path(spec).is_file():
        return read_region_file(spec)
    m = _SHAPE_RE.match(spec)
    if not m:
        raise RegionSpecError(f"cannot parse region spec {spec!r}")
    name, args = m.group(1), m.group(2)
    if name not in SHAPES:
        raise RegionSpecError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    params = {}
    if args and args.strip():
        for item in args.split(","):
            if "=" not in item:
                raise RegionSpecError(f"shape parameter {item.strip()!r} is not key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            try:
                params[k] = float(v)
            except ValueError:
                raise RegionSpecError(f"shape parameter {k}={v!r} is not a number") from None
    try:
        return shape(name, **params)
    except TypeError as exc:
        raise RegionSpecError(f"bad parameters for {name}: {exc}") from None


def _shape_line(line: str, where: str) -> SupportRegion:
    name, *rest = line.split()
    name = name.split("=", 1)[1].strip()
    for item in rest:
        if "=" not in item:
            raise RegionSpecError(f"{where}: shape parameter {item!r} is not key=value")
    args = ", ".join(rest)
    try:
        return parse_region(f"{name}({args})")
    except RegionSpecError as exc:
        raise RegionSpecError(f"{where}: {exc}") from None


def read_region_file(path) -> SupportRegion:
    """Region from a text file.

    Either a single line ``shape=NAME key=value ...`` naming a built-in
    shape, or polygons as blocks of half-planes ``a b c`` meaning
    ``a x + b y <= c``, each block opened by a line ``polygon``.
    ``#`` starts a comment.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise RegionSpecError(f"cannot read region file {path}: {exc}") from None
    polys: list[list] = []
    named = None
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("shape="):
            if named is not None or polys:
                raise RegionSpecError(f"{path}:{no}: a shape line must be the only content")
            named = _shape_line(line, f"{path}:{no}")
            continue
        if named is not None:
            raise RegionSpecError(f"{path}:{no}: a shape line must be the only content")
        if line.lower() == "polygon":
            polys.append([])
            continue
        if not polys:
            raise RegionSpecError(f"{path}:{no}: half-plane before the first 'polygon'")
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise RegionSpecError(f"{path}:{no}: expected 'a b c', got {line!r}")
        try:
            a, b, c = (float(p) for p in parts)
        except ValueError:
            raise RegionSpecError(f"{path}:{no}: coefficients must be numbers") from None
        if a == 0 and b == 0:
            raise RegionSpecError(f"{path}:{no}: half-plane with a = b = 0")
        polys[-1].append([a, b, c])
    if named is not None:
        return named
    if not polys:
        raise RegionSpecError(f"{path}: no polygons")
    region = SupportRegion.from_halfplanes(polys, path.stem)
    if not region.polygons:
        raise RegionSpecError(f"{path}: region is empty")
    return region


# ---------------------------------------------------------------------------
# samples


def read_sample_csv(path) -> np.ndarray:
    """Points from a CSV with header ``x,y``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip().lower() for h in rows[0]][:2] != ["x", "y"]:
        raise ValueError(f"{path}: sample CSV must start with the header x,y")
    try:
        pts = np.array([[float(r[0]), float(r[1])] for r in rows[1:] if r], dtype=float)
    except (ValueError, IndexError):
        raise ValueError(f"{path}: malformed sample row") from None
    return pts.reshape(-1, 2)


def write_sample_csv(points, path) -> None:
    write_rows(path, ["x", "y"], ((repr(float(x)), repr(float(y))) for x, y in points))


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow(r)


def _f(v) -> str:
    return repr(float(v))


def write_surface_csv(surface, path) -> None:
    """``x,y,value,flag``; flag is ``ok``, ``outside`` or ``singular``."""
    X, Y = np.meshgrid(surface.xs, surface.ys, indexing="ij")

    def rows():
        for x, y, v, ins, sing in zip(X.ravel(), Y.ravel(), surface.values.ravel(),
                                      surface.inside.ravel(), surface.singular.ravel()):
            flag = "singular" if sing else ("ok" if ins else "outside")
            yield _f(x), _f(y), _f(v), flag

    write_rows(path, ["x", "y", "value", "flag"], rows())


def write_marginals_csv(marginals, path) -> None:
    """``component,coordinate,value,flag`` with flag ``ok``/``floored``/``outside``."""
    disc = marginals.disc

    def rows():
        for j, (g, v) in enumerate(zip(disc.grids, marginals.fw), start=1):
            raw = marginals.raw[j - 1] if marginals.raw is not None else v
            for u, val, r, ins in zip(g.nodes, v, raw, g.mask):
                flag = "outside" if not ins else ("floored" if r < marginals.floor_eps else "ok")
                yield f"fw{j}", _f(u), _f(val), flag

    write_rows(path, ["component", "coordinate", "value", "flag"], rows())


def write_component_csv(path, component, sd=None, valid=None) -> None:
    """``coordinate,value,sd,flag`` for one fitted component.

    Flags: ``ok``, ``outside`` (node not in S_j, value continued), and
    ``discontinuity`` (plug-in band not valid there).
    """
    g = component.grid
    n = g.size
    sd = np.full(n, np.nan) if sd is None else np.asarray(sd, dtype=float)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)

    def rows():
        for u, v, s, ins, ok in zip(g.nodes, component.values, sd, g.mask, valid):
            flag = "outside" if not ins else ("ok" if ok else "discontinuity")
            yield _f(u), _f(v), ("" if np.isnan(s) else _f(s)), flag

    write_rows(path, ["coordinate", "value", "sd", "flag"], rows())


def read_component_csv(path):
    """Nodes and values of a component CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "coordinate" not in rows[0] or "value" not in rows[0]:
        raise ValueError(f"{path}: not a component CSV")
    u = np.array([float(r["coordinate"]) for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    return u, v


def write_summary_csv(path, record: dict) -> None:
    def rows():
        for k, v in record.items():
            yield k, (_f(v) if isinstance(v, float) else v)

    write_rows(path, ["key", "value"], rows())


# ---------------------------------------------------------------------------
# configuration


def read_config(path) -> dict:
    """Settings from a ``key = value`` text file or a JSON run manifest.

    Keys may be written with dashes or underscores.  A manifest contributes
    its ``config`` block, so a finished run can be repeated from it.
    """
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        cfg = data.get("config", data)
        return {str(k).replace("-", "_"): v for k, v in cfg.items()}
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out
