"""Command line entry point.

Subcommands: simulate, fit, study, claims, forecast, asymptotics.  Every
option can also come from ``--config FILE`` (``key = value`` lines, or the
JSON manifest of an earlier run); flags given on the command line win.
Outputs go to ``--out``, else ``$INSAMPLE_OUTPUT_DIR/<subcommand>``, else
``insample-out/<subcommand>``; a ``manifest.json`` is always written next
to them.

Exit codes: 0 success, 2 invalid arguments or config, 3 failure during the
computation or while reading inputs.  Errors are reported on stderr as one
JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .backfit import BackfitError, asymptotic_sd, solve_backfit
from .claims import (
    SYNTHETIC_FIXTURE,
    RunOffTriangle,
    TabulatedProduct,
    augment,
    claims_window,
    forecast,
    jitter,
    two_stage_fit,
)
from .geometry import WindowError, build_window
from .io import (
    RegionSpecError,
    parse_region,
    read_component_csv,
    read_config,
    read_sample_csv,
    write_component_csv,
    write_marginals_csv,
    write_rows,
    write_sample_csv,
    write_summary_csv,
    write_surface_csv,
)
from .kernels import KERNELS, selfconv_product_integral
from .models import normalize_model
from .smoother import Sample, direct_marginals, marginals_from_surface, render_surface
from .study import DEFAULT_LL_BANDWIDTH, DEFAULT_GRIDS, run_study, sample_model

ENV_OUTPUT = "INSAMPLE_OUTPUT_DIR"


class CLIError(Exception):
    def __init__(self, message: str, flag: str | None = None, code: int = 2):
        super().__init__(message)
        self.flag = flag
        self.code = code


# ---------------------------------------------------------------------------
# option tables


@dataclass(frozen=True)
class Opt:
    name: str
    kind: str              # float | int | str | flag | floats | pair | choice
    default: object = None
    check: str | None = None
    help: str = ""
    choices: tuple = ()

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


_CHECKS = {
    "pos": (lambda v: v > 0, "must be positive"),
    "nonneg": (lambda v: v >= 0, "must be nonnegative"),
    "unit": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "ge2": (lambda v: v >= 2, "must be at least 2"),
    "ge3": (lambda v: v >= 3, "must be at least 3"),
    "ge51": (lambda v: v >= 51, "must be at least 51"),
}

KERNEL_OPT = Opt("kernel", "choice", "epanechnikov", help="kernel name",
                 choices=tuple(sorted(KERNELS)))
SEED_OPT = Opt("seed", "int", 0, "nonneg", "random seed")
OUT_OPTS = [
    Opt("out", "str", None, help="output directory"),
    Opt("config", "str", None, help="key = value file or JSON manifest"),
]
GRID_OPTS = [
    Opt("m1", "int", 201, "ge3", "grid size on S1"),
    Opt("m2", "int", 201, "ge3", "grid size on S2"),
    Opt("m3", "int", 201, "ge3", "grid size on S3"),
    Opt("tol", "float", 1e-7, "pos", "backfitting tolerance"),
    Opt("max_iters", "int", 200, "pos", "backfitting cycle limit"),
    Opt("floor_eps", "float", 1e-4, "pos", "floor for marginal values"),
]
MODEL_OPT = Opt("model", "choice", "1", help="simulation model", choices=("1", "2"))

COMMANDS: dict[str, list[Opt]] = {
    "simulate": [
        MODEL_OPT,
        Opt("n", "int", 400, "pos", "sample size"),
        SEED_OPT,
        *OUT_OPTS,
    ],
    "fit": [
        Opt("data", "str", None, help="sample CSV with header x,y"),
        Opt("region", "str", "triangle", help="region spec or region file"),
        Opt("delta", "float", 0.02, "unit", "window thickness"),
        Opt("J", "float", 2.0, "pos", "number of seasonal periods"),
        Opt("h1", "float", 0.089, "pos", "bandwidth in x"),
        Opt("h2", "float", 0.089, "pos", "bandwidth in y"),
        Opt("h3", "float", None, "pos", "phase bandwidth for direct marginals"),
        Opt("marginals", "choice", "surface", help="marginal estimator",
            choices=("surface", "direct")),
        KERNEL_OPT,
        Opt("M", "int", 201, "ge51", "surface grid size"),
        *GRID_OPTS,
        *OUT_OPTS,
    ],
    "study": [
        MODEL_OPT,
        Opt("n", "int", 400, "pos", "sample size"),
        Opt("reps", "int", 100, "ge2", "replications"),
        Opt("h", "floats", None, "pos", "bandwidths (default: the model's grid)"),
        Opt("ll_h", "floats", None, "pos", "local linear comparison bandwidths"),
        SEED_OPT,
        Opt("delta", "float", 0.02, "unit", "window thickness"),
        KERNEL_OPT,
        Opt("threads", "int", None, "pos", "worker threads (default: all cores)"),
        Opt("M", "int", 201, "ge51", "surface grid size"),
        *GRID_OPTS,
        *OUT_OPTS,
    ],
    "claims": [
        Opt("data", "str", None, help="triangle CSV k,l,count (default: bundled fixture)"),
        SEED_OPT,
        Opt("J", "float", None, "pos", "seasonal periods (default m/12)"),
        Opt("h1", "float", None, "pos", "single-stage bandwidth in x"),
        Opt("h2", "float", None, "pos", "single-stage bandwidth in y"),
        Opt("two_stage", "pair", None, "pos", "stage bandwidths H1 H2"),
        Opt("delta", "float", 0.02, "unit", "window thickness"),
        Opt("no_augment", "flag", False, help="skip the count augmentation"),
        Opt("clip", "flag", False, help="keep jittered points below x + y = 1"),
        KERNEL_OPT,
        Opt("M", "int", 401, "ge51", "surface grid size"),
        *GRID_OPTS,
        *OUT_OPTS,
    ],
    "forecast": [
        Opt("components", "str", None, help="directory with f1.csv, f2.csv, f3.csv"),
        Opt("data", "str", None, help="triangle CSV (default: bundled fixture)"),
        Opt("J", "float", None, "pos", "seasonal periods (default from summary.csv)"),
        Opt("augment", "flag", False, help="augment the triangle before forecasting"),
        *OUT_OPTS,
    ],
    "asymptotics": [
        Opt("data", "str", None, help="sample CSV (default: simulate --model)"),
        MODEL_OPT,
        Opt("n", "int", 400, "pos", "sample size when simulating"),
        SEED_OPT,
        Opt("region", "str", "triangle", help="region spec or region file"),
        Opt("delta", "float", 0.02, "unit", "window thickness"),
        Opt("J", "float", 2.0, "pos", "number of seasonal periods"),
        Opt("h1", "float", 0.089, "pos", "bandwidth in x"),
        Opt("h2", "float", 0.089, "pos", "bandwidth in y"),
        KERNEL_OPT,
        Opt("M", "int", 201, "ge51", "surface grid size"),
        *GRID_OPTS,
        *OUT_OPTS,
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        m = re.search(r"argument (--?[\w-]+)", message)
        raise CLIError(message, m.group(1) if m else None)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="insample", description="Seasonal multiplicative density estimation")
    p.add_argument("--version", action="version", version=f"insample {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        for o in opts:
            if o.kind == "flag":
                sp.add_argument(o.flag, dest=o.name, action="store_true", default=None,
                                help=o.help)
            elif o.kind == "floats":
                sp.add_argument(o.flag, dest=o.name, nargs="+", default=None, help=o.help)
            elif o.kind == "pair":
                sp.add_argument(o.flag, dest=o.name, nargs=2, default=None, help=o.help,
                                metavar=("H1", "H2"))
            else:
                sp.add_argument(o.flag, dest=o.name, default=None, help=o.help)
    return p


def _as_bool(v, flag):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise CLIError(f"{flag}: expected a boolean, got {v!r}", flag)


def _as_list(v):
    if isinstance(v, (list, tuple)):
        return list(v)
    return [s for s in re.split(r"[,\s]+", str(v).strip()) if s]


def _convert(o: Opt, v):
    if v is None:
        return None
    flag = o.flag
    try:
        if o.kind == "float":
            out = float(v)
        elif o.kind == "int":
            f = float(v)
            if f != int(f):
                raise ValueError
            out = int(f)
        elif o.kind == "str":
            out = str(v)
        elif o.kind == "flag":
            return _as_bool(v, flag)
        elif o.kind in ("floats", "pair"):
            out = [float(x) for x in _as_list(v)]
            if o.kind == "pair" and len(out) != 2:
                raise CLIError(f"{flag}: expected two values, got {len(out)}", flag)
            if not out:
                raise CLIError(f"{flag}: expected at least one value", flag)
        elif o.kind == "choice":
            out = str(v)
            if out.startswith("model"):
                out = out[len("model"):]
            if out not in o.choices:
                raise CLIError(f"{flag}: {v!r} is not one of {list(o.choices)}", flag)
            return out
        else:  # pragma: no cover
            raise AssertionError(o.kind)
    except (TypeError, ValueError):
        raise CLIError(f"{flag}: invalid {o.kind} value {v!r}", flag) from None
    if o.check:
        test, msg = _CHECKS[o.check]
        vals = out if isinstance(out, list) else [out]
        if not all(np.isfinite(x) and test(x) for x in vals):
            raise CLIError(f"{flag}: {msg} (got {v!r})", flag)
    return out


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags, converting and validating."""
    opts = COMMANDS[command]
    file_cfg = {}
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            file_cfg = read_config(cfg_path)
        except (OSError, ValueError) as exc:
            raise CLIError(f"--config: {exc}", "--config") from None
    known = {o.name for o in opts}
    unknown = sorted(set(file_cfg) - known - {"command"})
    if unknown:
        raise CLIError(f"--config: unknown keys {unknown}", "--config")
    cfg = {}
    for o in opts:
        if o.name == "config":
            cfg[o.name] = cfg_path
            continue
        v = getattr(ns, o.name, None)
        if v is None:
            v = file_cfg.get(o.name)
        v = _convert(o, v)
        cfg[o.name] = o.default if v is None else v
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _out_dir(command: str, cfg: dict) -> Path:
    if cfg.get("out"):
        out = Path(cfg["out"])
    elif os.environ.get(ENV_OUTPUT):
        out = Path(os.environ[ENV_OUTPUT]) / command
    else:
        out = Path("insample-out") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _versions() -> dict:
    return {
        "insample": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list, t0: float,
                    extra: dict | None = None) -> None:
    record = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if k != "config"},
        "versions": _versions(),
        "outputs": sorted(outputs),
        "wall_time_seconds": time.perf_counter() - t0,
    }
    if extra:
        record.update(extra)
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _require(cfg, key):
    if cfg.get(key) is None:
        raise CLIError(f"--{key.replace('_', '-')} is required", f"--{key.replace('_', '-')}")


def _window(cfg):
    try:
        region = parse_region(cfg["region"])
    except RegionSpecError as exc:
        raise CLIError(f"--region: {exc}", "--region") from None
    try:
        return build_window(region, cfg["delta"], cfg["J"])
    except WindowError as exc:
        raise CLIError(f"--delta: {exc}", "--delta") from None


def _load_sample(cfg, window):
    try:
        pts = read_sample_csv(cfg["data"])
    except OSError as exc:
        raise CLIError(f"--data: cannot read {cfg['data']}: {exc}", "--data", 3) from None
    except ValueError as exc:
        raise CLIError(f"--data: {exc}", "--data", 3) from None
    try:
        return Sample.from_points(pts, window)
    except ValueError as exc:
        raise CLIError(f"--data: {exc}", "--data", 3) from None


def _load_triangle(cfg):
    path = cfg.get("data") or SYNTHETIC_FIXTURE
    try:
        return RunOffTriangle.read_csv(path), str(path)
    except OSError as exc:
        raise CLIError(f"--data: cannot read {path}: {exc}", "--data", 3) from None
    except ValueError as exc:
        raise CLIError(f"--data: {exc}", "--data", 3) from None


def _grid(cfg):
    return (cfg["m1"], cfg["m2"], cfg["m3"])


def _write_components(out: Path, res, marg, n, h1, h2, kernel, prefix="") -> list:
    names = []
    for j, comp in enumerate(res.components, start=1):
        sds, valid = [], []
        for u, ins in zip(comp.grid.nodes, comp.grid.mask):
            if not ins or comp.grid(marg.fw[j - 1], u) < marg.floor_eps:
                sds.append(np.nan)
                valid.append(True)
                continue
            a = asymptotic_sd(res, marg, j, float(u), n, h1, h2, kernel)
            sds.append(a.sd)
            valid.append(a.valid)
        name = f"{prefix}f{j}.csv"
        write_component_csv(out / name, comp, sds, valid)
        names.append(name)
    return names


def _fit_sample(sample, window, cfg, h1, h2):
    surf = render_surface(sample, window, h1, h2, cfg["kernel"], cfg["M"])
    if cfg.get("marginals", "surface") == "direct":
        marg = direct_marginals(sample, window, h1, h2, cfg.get("h3"), cfg["kernel"],
                                cfg["floor_eps"], _grid(cfg))
    else:
        marg = marginals_from_surface(surf, window, cfg["floor_eps"], _grid(cfg))
    res = solve_backfit(marg, window, sample.theta_hat, tol=cfg["tol"],
                        max_iters=cfg["max_iters"])
    return surf, marg, res


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg, out: Path) -> tuple[list, dict]:
    model = normalize_model(cfg["model"])
    sample = sample_model(model, cfg["n"], cfg["seed"])
    write_sample_csv(sample.points, out / "sample.csv")
    return ["sample.csv"], {"seeds": [cfg["seed"]], "normalizing_constant": model.c}


def cmd_fit(cfg, out: Path) -> tuple[list, dict]:
    _require(cfg, "data")
    window = _window(cfg)
    sample = _load_sample(cfg, window)
    surf, marg, res = _fit_sample(sample, window, cfg, cfg["h1"], cfg["h2"])
    write_surface_csv(surf, out / "surface.csv")
    write_marginals_csv(marg, out / "marginals.csv")
    names = _write_components(out, res, marg, sample.n, cfg["h1"], cfg["h2"], cfg["kernel"])
    summary = {"n": sample.n, "J": window.J, "delta": window.delta, **res.summary(),
               "surface_singular_nodes": surf.n_singular}
    write_summary_csv(out / "summary.csv", summary)
    if not res.converged:
        raise CLIError(f"backfitting did not converge in {res.iterations} cycles",
                       None, 3)
    return ["surface.csv", "marginals.csv", *names, "summary.csv"], {}


def cmd_study(cfg, out: Path) -> tuple[list, dict]:
    model = normalize_model(cfg["model"])
    grid = cfg["h"] if cfg["h"] is not None else DEFAULT_GRIDS[model.id]
    ll = cfg["ll_h"] if cfg["ll_h"] is not None else [DEFAULT_LL_BANDWIDTH[model.id]]
    rep = run_study(model, cfg["n"], grid, cfg["reps"], cfg["seed"], cfg["delta"],
                    ll_bandwidths=ll, kernel=cfg["kernel"], threads=cfg["threads"],
                    M=cfg["M"], m=_grid(cfg), tol=cfg["tol"], max_iters=cfg["max_iters"],
                    floor_eps=cfg["floor_eps"])
    rep.write_table_csv(out / "table.csv")
    rep.write_boxplot_csv(out / "boxplot.csv")
    return ["table.csv", "boxplot.csv"], {"study": rep.manifest(), "seeds": rep.seeds}


def cmd_claims(cfg, out: Path) -> tuple[list, dict]:
    tri, src = _load_triangle(cfg)
    if not cfg["no_augment"]:
        tri = augment(tri)
    window = claims_window(tri, cfg["delta"], cfg["J"], cfg["clip"])
    sample = jitter(tri, cfg["seed"], window, cfg["clip"])
    two = cfg["two_stage"]
    single = cfg["h1"] is not None or cfg["h2"] is not None
    if two is None and not single:
        two = [0.01, 0.05]
    outputs = []
    if two is not None:
        h_a, h_b = two
        if not h_a < h_b:
            raise CLIError("--two-stage: the first bandwidth must be the smaller one",
                           "--two-stage")
        res = two_stage_fit(sample, window, h_a, h_b, cfg["kernel"], cfg["M"], _grid(cfg),
                            cfg["floor_eps"], cfg["tol"], cfg["max_iters"])
        h1 = h2 = h_b
        stage1 = res.previous
        write_component_csv(out / "stage1_f3.csv", stage1.f3)
        outputs.append("stage1_f3.csv")
        marg = marginals_from_surface(
            render_surface(sample, window, h1, h2, cfg["kernel"], cfg["M"]),
            window, cfg["floor_eps"], _grid(cfg))
    else:
        h1 = cfg["h1"] if cfg["h1"] is not None else cfg["h2"]
        h2 = cfg["h2"] if cfg["h2"] is not None else cfg["h1"]
        fit_cfg = dict(cfg, marginals="surface")
        _, marg, res = _fit_sample(sample, window, fit_cfg, h1, h2)
        if not res.converged:
            raise CLIError(f"backfitting did not converge in {res.iterations} cycles",
                           None, 3)
    outputs += _write_components(out, res, marg, sample.n, h1, h2, cfg["kernel"])
    table = forecast(res, tri)
    table.write_cells_csv(out / "forecast_cells.csv")
    table.write_periods_csv(out / "forecast_periods.csv")
    tri.to_csv(out / "triangle_used.csv")
    summary = {"source": src, "m": tri.m, "n": tri.total, "J": window.J,
               "delta": window.delta, **res.summary(),
               "forecast_total": table.total}
    write_summary_csv(out / "summary.csv", summary)
    outputs += ["forecast_cells.csv", "forecast_periods.csv", "triangle_used.csv",
                "summary.csv"]
    return outputs, {"seeds": [cfg["seed"]]}


def cmd_forecast(cfg, out: Path) -> tuple[list, dict]:
    _require(cfg, "components")
    comp_dir = Path(cfg["components"])
    try:
        tabs = [read_component_csv(comp_dir / f"f{j}.csv") for j in (1, 2, 3)]
    except (OSError, ValueError) as exc:
        raise CLIError(f"--components: {exc}", "--components", 3) from None
    J = cfg["J"]
    if J is None:
        J = _summary_value(comp_dir / "summary.csv", "J")
        if J is None:
            raise CLIError("--J is required when summary.csv carries no J", "--J")
    tri, _ = _load_triangle(cfg)
    if cfg["augment"]:
        tri = augment(tri)
    prod = TabulatedProduct(*tabs[0], *tabs[1], *tabs[2], float(J))
    table = forecast(prod, tri)
    table.write_cells_csv(out / "forecast_cells.csv")
    table.write_periods_csv(out / "forecast_periods.csv")
    return ["forecast_cells.csv", "forecast_periods.csv"], {}


def _summary_value(path: Path, key: str):
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row.get("key") == key:
                    return float(row["value"])
    except OSError:
        return None
    return None


def cmd_asymptotics(cfg, out: Path) -> tuple[list, dict]:
    window = _window(cfg)
    if cfg["data"] is not None:
        sample = _load_sample(cfg, window)
    else:
        model = normalize_model(cfg["model"])
        sample = sample_model(model, cfg["n"], cfg["seed"]).with_window(window)
    fit_cfg = dict(cfg, marginals="surface")
    _, marg, res = _fit_sample(sample, window, fit_cfg, cfg["h1"], cfg["h2"])
    names = _write_components(out, res, marg, sample.n, cfg["h1"], cfg["h2"], cfg["kernel"],
                               prefix="bands_")

    def rows():
        for kname in sorted(KERNELS):
            for ratio in (0.5, 1.0, 2.0):
                c1, c2 = ratio, 1.0
                a = selfconv_product_integral(kname, c1 / c2) / c2
                b = selfconv_product_integral(kname, c2 / c1) / c1
                yield kname, repr(ratio), repr(a), repr(b), repr(abs(a - b) / abs(b))

    write_rows(out / "sigma3_identity.csv",
               ["kernel", "c1_over_c2", "sigma3_form_a", "sigma3_form_b", "rel_diff"], rows())
    summary = {"n": sample.n, "h1": cfg["h1"], "h2": cfg["h2"], **res.summary()}
    write_summary_csv(out / "summary.csv", summary)
    return [*names, "sigma3_identity.csv", "summary.csv"], {"seeds": [cfg["seed"]]}


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "study": cmd_study,
    "claims": cmd_claims,
    "forecast": cmd_forecast,
    "asymptotics": cmd_asymptotics,
}


def _report(exc: Exception, flag=None) -> None:
    payload = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if flag:
        payload["flag"] = flag
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    t0 = time.perf_counter()
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        cfg = resolve_config(ns.command, ns)
    except CLIError as exc:
        _report(exc, exc.flag)
        return exc.code
    command = ns.command
    try:
        out = _out_dir(command, cfg)
        outputs, extra = HANDLERS[command](cfg, out)
    except CLIError as exc:
        _report(exc, exc.flag)
        return exc.code
    except (BackfitError, WindowError, ValueError, OSError) as exc:
        _report(exc)
        return 3
    _write_manifest(out, command, cfg, outputs, t0, extra)
    print(json.dumps({"status": "ok", "command": command, "out": str(out),
                      "outputs": sorted(outputs)}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
