"""Command-line entry points: inspect, run, compare."""
from __future__ import annotations

import os

_threads = os.environ.get("CODIM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import io
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .collision import broadphase, intersection_count
from .contact import InfeasibleError, active_set, eval_active, stencil_distances
from .mesh import MeshError, obj_text
from .scenario import SceneBundle, ScenarioConfig, ScenarioError, build_scene, load_config
from .solver import SolverError, StepInfo, advance

CSV_HEADER = ("frame,time,newton_iters,rest_contact_force_norm,expansion_ratio,"
              "min_pair_distance,intersection_count,wall_time_ms")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


@dataclass(frozen=True)
class MetricsRow:
    frame: int
    time: float
    newton_iters: int
    rest_contact_force_norm: float
    expansion_ratio: float
    min_pair_distance: float
    intersection_count: int
    wall_time_ms: int

    def csv(self) -> str:
        return ",".join([str(self.frame), repr(self.time), str(self.newton_iters),
                         repr(self.rest_contact_force_norm), repr(self.expansion_ratio),
                         repr(self.min_pair_distance), str(self.intersection_count),
                         str(self.wall_time_ms)])


def contact_force_norm(x, bundle: SceneBundle) -> float:
    """Max per-vertex norm of the contact-only energy gradient."""
    sc = bundle.scene
    grad = np.zeros_like(x)
    eval_active(x, active_set(x, sc.contact_set(x)), sc.barrier.stiffness, grad)
    return float(np.linalg.norm(grad, axis=1).max(initial=0.0))


def min_pair_distance(x, bundle: SceneBundle) -> float:
    """Smallest admissible stencil distance among pairs within h (inf if none)."""
    sc = bundle.scene
    st = broadphase(sc.mesh, x, None, sc.barrier.h)
    if sc.culler is not None and len(st):
        st = st.subset(sc.culler.admissible(st))
    if len(st) == 0:
        return float("inf")
    return float(stencil_distances(np.ascontiguousarray(x), st.kinds, st.verts).min())


def frame_metrics(frame: int, t: float, x, bundle: SceneBundle, iters: int, crossings: int,
                  ms: int) -> MetricsRow:
    mesh = bundle.mesh
    return MetricsRow(frame, float(t), iters, contact_force_norm(x, bundle),
                      mesh.measure(x) / mesh.measure(), min_pair_distance(x, bundle),
                      intersection_count(mesh, x) + crossings, ms)


def simulate(bundle: SceneBundle, frames: int | None = None, timing: bool = True, on_frame=None):
    """Step the scene, yielding ``(MetricsRow, x)`` for frame 0 and every step."""
    frames = bundle.config.frames if frames is None else frames
    state = bundle.state
    yield frame_metrics(0, state.t, state.x, bundle, 0, 0, 0), state.x
    for k in range(1, frames + 1):
        t0 = time.perf_counter()
        info = StepInfo()
        state = advance(state, bundle.scene, info)
        ms = int(round(1e3 * (time.perf_counter() - t0))) if timing else 0
        yield frame_metrics(k, state.t, state.x, bundle, info.newton_iters, info.crossings, ms), state.x


def run_config(config: ScenarioConfig, out: Path | None, metrics: Path | None,
               frames: int | None = None, timing: bool = True, log=None) -> tuple[int, list[MetricsRow]]:
    """Run one scenario; writes OBJ frames and the metrics CSV as it goes."""
    rows: list[MetricsRow] = []
    bundle = build_scene(config)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fh = None
    if metrics is not None:
        metrics.parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics, "w", newline="")
        fh.write(CSV_HEADER + "\n")
    code = EXIT_OK
    try:
        for row, x in simulate(bundle, frames, timing):
            rows.append(row)
            if out is not None:
                (out / ("frame_%05d.obj" % row.frame)).write_text(obj_text(bundle.mesh, x))
            if fh is not None:
                fh.write(row.csv() + "\n")
                fh.flush()
            if log is not None:
                log(row)
    except (SolverError, InfeasibleError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
    finally:
        if fh is not None:
            fh.close()
    return code, rows


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.scenario)
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(args.mode, args.cull_radius)
    elif getattr(args, "cull_radius", None) is not None:
        cfg = cfg.with_mode(cfg.contact.mode, args.cull_radius)
    if getattr(args, "frames", None) is not None:
        cfg = replace(cfg, frames=args.frames)
    if getattr(args, "dt", None) is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, dt=args.dt))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def inspect_report(config: ScenarioConfig) -> dict:
    b = build_scene(config)
    mesh, table = b.mesh, b.table
    comp = mesh.component_id
    filt_comp = table.component_of(_key_verts(b)) if len(table) else np.zeros(0, np.int64)
    rows = []
    for c in range(mesh.n_components):
        verts = int(np.sum(comp == c))
        edges = int(np.sum(comp[mesh.edges[:, 0]] == c))
        tris = int(np.sum(comp[mesh.triangles[:, 0]] == c)) if len(mesh.triangles) else 0
        dmin = float(table.d_min[c])
        rows.append({"component": c, "vertices": verts, "edges": edges, "triangles": tris,
                     "candidate_pairs": int(table.candidates_per_component[c]),
                     "filtered_pairs": int(np.sum(filt_comp == c)),
                     "d_min": None if np.isnan(dmin) else dmin, "eta": b.eta})
    return {"name": config.name, "h": config.thickness, "eta": b.eta,
            "mode": config.contact.mode, "filter_mode": table.mode, "components": rows}


def _key_verts(b: SceneBundle) -> np.ndarray:
    from .contact import StencilSet, decode_keys

    kinds, pa, pb = decode_keys(b.table.keys)
    st = StencilSet.from_primitive_pairs(b.mesh, kinds, pa, pb)
    return st.verts


def cmd_inspect(args) -> int:
    rep = inspect_report(_load(args))
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{rep['name']}: h = {rep['h']:g} m, eta = {rep['eta']:g} m ({rep['filter_mode']})")
    hdr = "comp  verts  edges   tris  candidates  filtered      d_min"
    print(hdr)
    for r in rep["components"]:
        dmin = "-" if r["d_min"] is None else "%.6g" % r["d_min"]
        print("%4d %6d %6d %6d %11d %9d %10s" % (r["component"], r["vertices"], r["edges"],
                                                r["triangles"], r["candidate_pairs"],
                                                r["filtered_pairs"], dmin))
    return EXIT_OK


def _progress(row: MetricsRow) -> None:
    print(f"frame {row.frame:5d}  t={row.time:.3f}  iters={row.newton_iters:3d}  "
          f"ratio={row.expansion_ratio:.8f}  dmin={row.min_pair_distance:.4g}  "
          f"x={row.intersection_count}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else None
    metrics = Path(args.metrics) if args.metrics else (out / "metrics.csv" if out else None)
    code, rows = run_config(cfg, out, metrics, timing=not args.no_timing,
                            log=None if args.quiet else _progress)
    if args.json:
        print(json.dumps([r.__dict__ for r in rows]))
    return code


def cmd_compare(args) -> int:
    base = _load(args)
    out = Path(args.out) if args.out else None
    buf = io.StringIO()
    buf.write("mode," + CSV_HEADER + "\n")
    ok = 0
    status = {}
    for spec in args.modes.split(","):
        name, _, radius = spec.partition(":")
        cfg = base.with_mode(name, int(radius) if radius else None)
        label = f"{name}:{cfg.contact.cull_radius}" if name == "culled" else name
        sub = out / label.replace(":", "_") if out else None
        try:
            code, rows = run_config(cfg, sub, None, timing=not args.no_timing,
                                    log=None if args.quiet else _progress)
        except (ScenarioError, MeshError, InfeasibleError) as exc:
            code, rows = EXIT_CONFIG, []
            print(f"{label}: {exc}", file=sys.stderr)
        status[label] = code
        ok += code == EXIT_OK
        for r in rows:
            buf.write(label + "," + r.csv() + "\n")
    text = buf.getvalue()
    if args.metrics:
        Path(args.metrics).write_text(text)
    else:
        sys.stdout.write(text)
    for label, code in status.items():
        print(f"{label}: {'ok' if code == EXIT_OK else 'failed (exit %d)' % code}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codimsim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("scenario")
        p.add_argument("--mode", choices=("barrier", "culled", "filtered"))
        p.add_argument("--cull-radius", type=int, default=None)
        p.add_argument("--json", action="store_true")
        p.add_argument("--seed", type=int)
        if run:
            p.add_argument("--frames", type=int)
            p.add_argument("--dt", type=float)
            p.add_argument("--out")
            p.add_argument("--metrics")
            p.add_argument("--no-timing", action="store_true",
                           help="write wall_time_ms = 0 so reruns are byte-identical")
            p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("inspect", help="report filter tables per component")
    common(p, run=False)
    p.set_defaults(fn=cmd_inspect)
    p = sub.add_parser("run", help="simulate a scenario")
    common(p)
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("compare", help="run several contact modes on one scenario")
    common(p)
    p.add_argument("--modes", default="barrier,filtered",
                   help="comma list, e.g. barrier,filtered,culled:5")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if _threads:
        try:
            import numba

            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            pass
    try:
        return args.fn(args)
    except (ScenarioError, MeshError, InfeasibleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
