"""Command line entry point: ``brl <subcommand> [--config FILE] [--out DIR] ...``.

Exit status 0 on success, 2 on invalid input or configuration, 3 when a
numerical procedure breaks down.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, number_list
from .errors import ConfigError, NumericalError, ValidationError
from .experiments import (beam_experiment, cosine_bump, cylinder_experiment, make_geometry, raised_cosine,
                          spectrum_study, transversal_profile)
from .geometry import ScalarField
from .inversion import assemble_operator, cgls_solve, masked_error, visible_set
from .io import atomic_write, emit_svg, read_grid_csv, write_grid_csv, write_rays_csv
from .raytrace import trace_broken_ray
from .transform import CylinderPotential, forward_transform, ray_family_from_E

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class Run:
    """Collects metrics and artifacts of one invocation and writes ``report.txt``."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path, overrides: str):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.digest = cfg.digest(command + "|" + overrides)
        self.metrics: List[tuple] = []
        self.checks: List[tuple] = []
        self.artifacts: List[Path] = []
        self.t0 = time.perf_counter()

    def metric(self, key: str, value) -> None:
        if isinstance(value, float):
            value = format(value, ".10g")
        self.metrics.append((key, value))

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, p: Path) -> None:
        self.artifacts.append(Path(p))

    def report_text(self, extra: str = "") -> str:
        lines = [f"command={self.command}", f"config_digest={self.digest}"]
        lines += [f"{k}={v}" for k, v in self.metrics]
        for name, ok, detail in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        if extra:
            lines.append(extra.rstrip("\n"))
        lines.append(f"wall_time_s={time.perf_counter() - self.t0:.3f}")
        return "\n".join(lines) + "\n"

    def write_report(self, path: Optional[Path] = None, extra: str = "") -> Path:
        p = path or self.path("report.txt")
        atomic_write(p, self.report_text(extra))
        self.add(p)
        return p


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------
def _geometry(cfg: ExperimentConfig):
    g = lambda k: cfg.get("geometry", k)  # noqa: E731
    return make_geometry(g("kind"), radius=g("radius"), theta_max=g("theta_max"), center=g("center"),
                         r=g("r"), E=g("E"), E_fraction=g("E_fraction"))


def _family(cfg: ExperimentConfig, metric, domain):
    return ray_family_from_E(metric, domain, cfg.get("rays", "n_u"), cfg.get("rays", "n_a"),
                             cfg.get("rays", "max_reflections"), step=cfg.get("rays", "family_step"))


def _phantom(cfg: ExperimentConfig):
    kind = cfg.get("transform", "phantom")
    if kind == "bump":
        return cosine_bump(cfg.get("transform", "phantom_center"), cfg.get("transform", "phantom_radius"))
    if kind == "profile":
        return transversal_profile
    raise ConfigError(f"[transform] phantom: unknown phantom {kind!r} (use bump, profile, separable)")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("BRL_THREADS", "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"BRL_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _svg_enabled(cfg: ExperimentConfig) -> bool:
    return bool(cfg.get("output", "svg"))


def _field_input(cfg: ExperimentConfig, path: str) -> ScalarField:
    p = cfg.resolve(path) if not Path(path).is_absolute() and not Path(path).exists() else Path(path)
    return read_grid_csv(p)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------
def cmd_trace(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    entries = args.entry if args.entry is not None else cfg.get("rays", "entry")
    angles = args.angle if args.angle is not None else cfg.get("rays", "angle")
    kmax = args.max_reflections if args.max_reflections is not None else cfg.get("rays", "max_reflections")
    if not entries or not angles:
        raise ConfigError("[rays] entry and angle are required for trace")
    if len(entries) == 1 and len(angles) > 1:
        entries = entries * len(angles)
    if len(angles) == 1 and len(entries) > 1:
        angles = angles * len(entries)
    if len(entries) != len(angles):
        raise ConfigError("[rays] entry and angle lists must have equal length")
    rays = [trace_broken_ray(metric, domain, u, a, kmax, step=cfg.get("rays", "step"))
            for u, a in zip(entries, angles)]
    run.add(write_rays_csv(rays, run.path("rays.csv")))
    for k, ray in enumerate(rays):
        run.metric(f"ray{k}_length", ray.total_length)
        run.metric(f"ray{k}_reflections", len(ray.reflections))
        run.metric(f"ray{k}_tangency_margin", ray.tangency_margin)
        run.metric(f"ray{k}_max_hamiltonian_drift",
                   max(float(np.max(np.abs(s.hamiltonian(metric) - 0.5))) for s in ray.segments))
    if _svg_enabled(cfg):
        emit_svg(run.path("rays.svg"), domain=domain, rays=rays)
        run.add(run.path("rays.svg"))
    run.write_report()


def _transform_field(cfg: ExperimentConfig, args):
    """Either a transversal field read from CSV (times c) or a built-in phantom."""
    pot_path = args.potential or cfg.get("transform", "potential")
    c_path = args.conformal or cfg.get("transform", "conformal")
    if pot_path:
        q = _field_input(cfg, pot_path)
        if c_path:
            c = _field_input(cfg, c_path)
            if c.shape != q.shape or (c.hx, c.hy, c.ox, c.oy) != (q.hx, q.hy, q.ox, q.oy):
                raise ValidationError("conformal factor lattice must match the potential lattice")
            if np.any(c.values <= 0):
                raise ValidationError("conformal factor must be positive")
            q = q.with_values(q.values * c.values)
        return q
    if cfg.get("transform", "phantom") == "separable":
        metric, domain = _geometry(cfg)
        fine = ScalarField.covering(domain, cfg.get("transform", "fine_n"), transversal_profile, margin=0.05)
        c = fine.with_values(np.full(fine.shape, float(cfg.get("transform", "c")[0])))
        return CylinderPotential.separable(raised_cosine, fine, np.linspace(0, 1, cfg.get("transform", "x1_nodes")),
                                           c=c)
    return _phantom(cfg)


def cmd_transform(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    fam = _family(cfg, metric, domain)
    lams = args.lam if args.lam is not None else cfg.get("transform", "lambda")
    src = _transform_field(cfg, args)
    rows = ["u,a,lambda,re,im"]
    for lam in lams:
        d = np.asarray(forward_transform(src, fam, float(lam), threads=_threads(args)), dtype=complex)
        for u, a, z in zip(fam.entries, fam.angles, d):
            rows.append(",".join(format(float(v), ".17g") for v in (u, a, lam, z.real, z.imag)))
        run.metric(f"max_abs_lambda_{lam:g}", float(np.max(np.abs(d))))
    run.add(atomic_write(run.path("data.csv"), "\n".join(rows) + "\n"))
    run.metric("n_rays", len(fam))
    for k, v in fam.dropped.items():
        run.metric(f"dropped_{k}", v)
    run.write_report()


def _read_data_csv(path: Path, fam, lam: float) -> np.ndarray:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise ValidationError(f"cannot read data file {path}: {exc.strerror}") from None
    if not lines or lines[0].split(",") != ["u", "a", "lambda", "re", "im"]:
        raise ValidationError("data file must start with the header u,a,lambda,re,im")
    arr = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]]).reshape(-1, 5)
    sel = arr[np.abs(arr[:, 2] - lam) <= 1e-12 * max(1.0, abs(lam))]
    if len(sel) != len(fam):
        raise ValidationError(f"data file has {len(sel)} rows for lambda={lam:g}, family has {len(fam)} rays")
    if np.max(np.abs(sel[:, 0] - fam.entries)) > 1e-9 or np.max(np.abs(sel[:, 1] - fam.angles)) > 1e-9:
        raise ValidationError("data rows do not match the configured ray family ordering")
    return sel[:, 3] + 1j * sel[:, 4]


def cmd_invert(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    fam = _family(cfg, metric, domain)
    grid = ScalarField.covering(domain, cfg.get("grid", "n"), margin=cfg.get("grid", "margin"))
    lam = float((args.lam if args.lam is not None else cfg.get("transform", "lambda"))[0])
    A = assemble_operator(grid, fam, lam, basis=cfg.get("inversion", "basis"))
    data_path = args.data or cfg.get("inversion", "data")
    truth = None
    if data_path:
        data = _read_data_csv(cfg.resolve(data_path) if not Path(data_path).exists() else Path(data_path), fam, lam)
        if np.max(np.abs(data.imag)) == 0.0:
            data = data.real
    else:
        ph = _phantom(cfg)
        data = forward_transform(ph, fam, lam, threads=_threads(args))
        truth = grid.with_values(ph(*grid.mesh()))
    recon, rep = cgls_solve(A, data, cfg.get("inversion", "alpha"), cfg.get("inversion", "iters"),
                            cfg.get("inversion", "tol"))
    run.add(write_grid_csv(recon, run.path("recon.csv")))
    run.metric("n_rays", len(fam))
    run.metric("iterations", rep.iterations)
    run.metric("final_relative_residual", rep.final_relative_residual)
    inside = domain.rho(*grid.mesh()) > 0
    mask = None
    if truth is not None:
        diff = (recon.values - truth.values)[inside]
        run.metric("rel_l2", float(np.linalg.norm(diff) / np.linalg.norm(truth.values[inside])))
    if not domain.E_full:
        vs = visible_set((metric, domain), domain.E, grid)
        mask = vs.mask
        run.add(write_grid_csv(grid.with_values(mask.astype(float)), run.path("visible.csv")))
        if truth is not None:
            me = masked_error(recon, truth, mask, inside)
            run.metric("rel_l2_inside", me["rel_L2_inside"])
            run.metric("rel_l2_outside", me["rel_L2_outside"])
    if _svg_enabled(cfg):
        emit_svg(run.path("recon.svg"), field=recon, domain=domain)
        run.add(run.path("recon.svg"))
        if mask is not None:
            emit_svg(run.path("visible.svg"), field=grid, domain=domain, mask=mask)
            run.add(run.path("visible.svg"))
    run.write_report()


def _E_list(text: str):
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"[inversion] E_list entry {item.strip()!r} must be name:a:b (boundary fractions)")
        out[parts[0].strip()] = [(float(parts[1]), float(parts[2]))]
    if not out:
        raise ConfigError("[inversion] E_list is empty")
    return out


def cmd_spectrum(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    Es = _E_list(cfg.get("inversion", "E_list") or "full:0:1")
    st = spectrum_study(metric, domain, Es, n_grid=cfg.get("grid", "n"), n_u=cfg.get("rays", "n_u"),
                        n_a=cfg.get("rays", "n_a"), max_reflections=cfg.get("rays", "max_reflections"),
                        seed=args.seed, k_smallest=cfg.get("inversion", "k_smallest"),
                        k_largest=cfg.get("inversion", "k_largest"))
    lines = []
    for name in st.names:
        r = st.reports[name]
        lines.append(f"[{name}] n_rays={st.n_rays[name]}")
        lines.append(r.as_text().rstrip("\n"))
    first = st.names[0]
    for name in st.names[1:]:
        run.check(f"sigma_min({name}) <= sigma_min({first})",
                  st.reports[name].sigma_min[0] <= st.reports[first].sigma_min[0])
    atomic_write(run.path("spectrum.txt"), "\n".join(lines) + "\n")
    run.add(run.path("spectrum.txt"))
    run.write_report(extra="\n".join(lines))


def cmd_beam(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    b = lambda k: cfg.get("beam", k)  # noqa: E731
    entry = args.entry if args.entry is not None else b("entry")
    angle = args.angle if args.angle is not None else b("angle")
    if entry is None or angle is None:
        raise ConfigError("[beam] entry and angle are required")
    refl = args.reflections if args.reflections is not None else b("reflections")
    taus = args.tau if args.tau is not None else b("tau")
    lams = args.lam if args.lam is not None else b("lambda")
    beam, rep = beam_experiment(metric, domain, entry, angle, refl, taus=taus, lams=lams, psis=b("psi"),
                                psi_sigma=b("psi_sigma"), delta_prime=b("delta_prime"),
                                residual_method=b("residual_method"), boundary=b("boundary"), h=b("h"))
    run.metric("segments", len(beam.segments))
    run.metric("delta_prime", beam.delta)
    run.metric("min_im_H", beam.min_im_H)
    run.metric("det_identity_deviation", beam.det_identity_deviation)
    run.metric("constancy_deviation", beam.constancy_deviation)
    run.metric("residual_slope", rep.residual_slope)
    if np.isfinite(rep.boundary_slope):
        run.metric("boundary_slope", rep.boundary_slope)
    run.metric("concentration_monotone_from_128", rep.monotone_from(128.0))
    report_path = Path(args.report) if args.report else run.path("report.txt")
    ftau = float(b("field_tau") or taus[0])
    need_field = args.field or args.svg or _svg_enabled(cfg)
    if need_field:
        grid = ScalarField.covering(domain, b("field_n"))
        X1, X2 = grid.mesh()
        v = beam.evaluate(X1.ravel(), X2.ravel(), s=ftau + 1j * float(lams[0])).reshape(X1.shape)
        v = np.where(domain.rho(X1, X2) > 0, v, 0.0)
        field = grid.with_values(v)
        if args.field:
            run.add(write_grid_csv(field, Path(args.field)))
        svg_path = Path(args.svg) if args.svg else (run.path("beam.svg") if _svg_enabled(cfg) else None)
        if svg_path is not None:
            emit_svg(svg_path, field=field, domain=domain, rays=[beam.ray])
            run.add(svg_path)
    run.write_report(report_path, extra=rep.as_text())


def cmd_pipeline(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    t = lambda k: cfg.get("transform", k)  # noqa: E731
    inv = lambda k: cfg.get("inversion", k)  # noqa: E731
    fam = _family(cfg, metric, domain)
    results = {}
    for c in t("c"):
        results[c] = cylinder_experiment(domain, metric, c_value=c, n_lambda=t("n_lambda"),
                                         lambda_max=t("lambda_max"), n_grid=cfg.get("grid", "n"),
                                         fine_n=t("fine_n"), x1_data_nodes=t("x1_nodes"),
                                         x1_nodes=inv("x1_nodes"), alpha=inv("alpha"), iters=inv("iters"),
                                         basis=inv("basis"), x1_method=inv("x1_method"),
                                         x1_smooth=inv("x1_smooth"), threads=_threads(args), family=fam)
        run.metric(f"rel_l2_c{c:g}", results[c].rel_l2)
    first = results[t("c")[0]]
    run.metric("rel_l2", first.rel_l2)
    run.metric("n_rays", len(fam))
    cs = list(results)
    for c in cs[1:]:
        dev = float(np.max(np.abs(results[c].recon - first.recon)))
        run.metric(f"c_division_max_diff_c{c:g}", dev)
    g = first.grid
    head = (f"# nx={g.nx} ny={g.ny} hx={g.hx:.17g} hy={g.hy:.17g} ox={g.ox:.17g} oy={g.oy:.17g} "
            f"nk={len(first.x1_grid)}")
    rows = [head, "k,x1,i,j,value"]
    for k, x in enumerate(first.x1_grid):
        for i in range(g.nx):
            for j in range(g.ny):
                rows.append(f"{k},{x:.17g},{i},{j},{first.recon[k, i, j]:.17g}")
    run.add(atomic_write(run.path("q_recon.csv"), "\n".join(rows) + "\n"))
    if _svg_enabled(cfg):
        mid = int(np.argmax(np.linalg.norm(first.truth.reshape(len(first.x1_grid), -1), axis=1)))
        emit_svg(run.path("q_recon.svg"), field=g.with_values(first.recon[mid]), domain=domain)
        run.add(run.path("q_recon.svg"))
    run.write_report()


def cmd_viz(args, cfg: ExperimentConfig, run: Run) -> None:
    metric, domain = _geometry(cfg)
    if args.input:
        field = read_grid_csv(args.input)
        emit_svg(run.path(Path(args.input).stem + ".svg"), field=field, domain=domain)
        run.add(run.path(Path(args.input).stem + ".svg"))
    else:
        grid = ScalarField.covering(domain, cfg.get("grid", "n"))
        vs = visible_set((metric, domain), domain.E, grid)
        emit_svg(run.path("visible.svg"), field=grid, domain=domain, mask=vs.mask)
        run.add(run.path("visible.svg"))
        run.metric("visible_pixels", int(vs.mask.sum()))
    run.write_report()


COMMANDS = {"trace": cmd_trace, "transform": cmd_transform, "invert": cmd_invert, "spectrum": cmd_spectrum,
            "beam": cmd_beam, "pipeline": cmd_pipeline, "viz": cmd_viz}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------
def _floats(text: str):
    try:
        return number_list(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="INI-style experiment configuration")
    g.add_argument("--out", default=d(None), help="output directory (default [output] dir)")
    g.add_argument("--seed", type=int, default=d(0), help="seed for randomized sampling")
    g.add_argument("--threads", type=int, default=d(None), help="worker threads (fallback: BRL_THREADS)")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="brl", description="Broken-ray transforms and Gaussian beam quasimodes.",
                                parents=[_global_flags(False)])
    p.add_argument("--version", action="version", version=f"brl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("trace", parents=[common], help="trace broken rays to rays.csv")
    s.add_argument("--entry", type=_floats)
    s.add_argument("--angle", type=_floats)
    s.add_argument("--max-reflections", type=int)
    s = sub.add_parser("transform", parents=[common], help="attenuated transform data to data.csv")
    s.add_argument("--potential")
    s.add_argument("--conformal")
    s.add_argument("--lambda", dest="lam", type=_floats)
    s = sub.add_parser("invert", parents=[common], help="CGLS reconstruction to recon.csv")
    s.add_argument("--data")
    s.add_argument("--lambda", dest="lam", type=_floats)
    sub.add_parser("spectrum", parents=[common], help="extreme singular values of the broken-ray operator")
    s = sub.add_parser("beam", parents=[common], help="build and verify a Gaussian beam quasimode")
    s.add_argument("--entry", type=lambda x: _floats(x)[0])
    s.add_argument("--angle", type=lambda x: _floats(x)[0])
    s.add_argument("--reflections", type=int)
    s.add_argument("--tau", type=_floats)
    s.add_argument("--lambda", dest="lam", type=_floats)
    s.add_argument("--report")
    s.add_argument("--field")
    s.add_argument("--svg")
    sub.add_parser("pipeline", parents=[common], help="cylinder reconstruction to q_recon.csv")
    s = sub.add_parser("viz", parents=[common], help="render a grid CSV or the visible set as SVG")
    s.add_argument("--input")
    return p


def _digest_args(argv: List[str]) -> List[str]:
    """Arguments that affect results: everything except the output location."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = Path(args.out) if args.out else (cfg.resolve(cfg.get("output", "dir")) if args.config
                                               else Path(cfg.get("output", "dir")))
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, out, " ".join(_digest_args(argv)))
        COMMANDS[args.command](args, cfg, run)
    except ValidationError as exc:
        print(f"brl: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"brl: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in run.artifacts:
        print(p)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
