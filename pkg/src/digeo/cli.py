"""``digeo`` command-line interface.

Every subcommand writes UTF-8 files (or stdout when ``--out`` is omitted).
CSV outputs start with a ``# <schema>`` line followed by a header row; JSON
outputs carry a ``schema`` field.  Failures exit nonzero with one JSON record
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, opt
from .diff import GfdConfig
from .errors import DigeoError, InvalidArgs
from .mesh import Mesh, load_mesh, mesh_to_obj
from .sampling import sample_tangents
from .shapes import (make_annulus, make_cone, make_cylinder, make_disk, make_icosphere, make_plane,
                     make_torus)
from .tracer import TraceConfig, TraceStatus, trace_batch

EXPMAP_SCHEMA = "digeo.expmap/1"
GCVT_SCHEMA = "digeo.gcvt/1"
INPUT_FIELDS = ("face", "b0", "b1", "b2", "vx", "vy", "vz")
POINT_FIELDS = INPUT_FIELDS[:4]
DIR_FIELDS = INPUT_FIELDS[4:]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgs(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _open_out(path):
    if path is None or path == "-":
        return _Stdout()
    return open(path, "w", encoding="utf-8", newline="")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


def _write_csv(path, schema, fields, rows):
    with _open_out(path) as fh:
        fh.write(f"# {schema}\n")
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_json(path, obj):
    with _open_out(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _round32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _load(args) -> Mesh:
    path = Path(args.mesh)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {args.mesh}")
    m = load_mesh(path)
    if args.precision == "f32":
        m = Mesh(_round32(m.vertices), m.faces)
    return m


def _read_table(path, fields: tuple) -> np.ndarray:
    """Rows of a CSV with exactly the header ``fields`` (``#`` lines skipped) as a float array."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    rd = csv.DictReader(lines)
    if rd.fieldnames is None or tuple(f.strip() for f in rd.fieldnames) != fields:
        raise InvalidArgs(f"{path}: CSV header must be {','.join(fields)}")
    return np.array([[float(r[k]) for k in fields] for r in rd]).reshape(-1, len(fields))


def _check_faces(faces: np.ndarray, m: Mesh):
    if len(faces) and (faces.min() < 0 or faces.max() >= m.n_faces):
        raise InvalidArgs("face index out of range")


def _read_requests(path, m: Mesh):
    t = _read_table(path, INPUT_FIELDS)
    faces = t[:, 0].astype(np.int64)
    _check_faces(faces, m)
    return faces, t[:, 1:4].copy(), t[:, 4:7].copy()


def _requests(args, m: Mesh):
    split = args.points is not None or args.dirs is not None
    if split and (args.points is None or args.dirs is None):
        raise InvalidArgs("--points and --dirs must be given together")
    if (args.input is not None) + (args.random is not None) + split != 1:
        raise InvalidArgs("give exactly one of --input, --points/--dirs or --random")
    if args.input is not None:
        f, b, v = _read_requests(args.input, m)
    elif split:
        P = _read_table(args.points, POINT_FIELDS)
        v = _read_table(args.dirs, DIR_FIELDS)
        if len(P) != len(v):
            raise InvalidArgs("--points and --dirs have different row counts")
        f = P[:, 0].astype(np.int64)
        _check_faces(f, m)
        b = P[:, 1:4].copy()
    else:
        if args.random < 0:
            raise InvalidArgs("--random must be >= 0")
        f, b, v = sample_tangents(m, args.random, np.random.default_rng(args.seed_rng),
                                  (args.min_length, args.max_length))
    if args.precision == "f32":
        b = _round32(b)
        b /= b.sum(axis=1, keepdims=True)
        v = _round32(v)
    return f, b, v


def _trace_cfg(args) -> TraceConfig:
    return TraceConfig(max_steps=args.max_steps, hole_avoidance=args.hole_avoidance)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_SHAPES = ("icosphere", "torus", "plane", "cylinder", "cone", "disk", "annulus")


def cmd_gen(args):
    s = args.shape
    if s == "icosphere":
        m = make_icosphere(args.subdiv, args.radius)
    elif s == "torus":
        m = make_torus(args.R, args.r, args.n_alpha, args.n_beta)
    elif s == "plane":
        m = make_plane(args.n, size=args.size)
    elif s == "cylinder":
        m = make_cylinder(args.radius, args.height, args.n_around, args.n)
    elif s == "cone":
        m = make_cone(args.radius, args.height, args.n_around, args.n)
    elif s == "disk":
        m = make_disk(args.radius, args.n, args.n_around)
    else:
        m = make_annulus(args.r_in, args.radius, args.n_around, args.n)
    with _open_out(args.out) as fh:
        fh.write(mesh_to_obj(m))


def _endpoint_rows(m, f, b, v, res):
    X = res.endpoints(m)
    for i in range(len(f)):
        yield {
            "index": i, "face": int(res.face[i]),
            "b0": repr(float(res.bary[i, 0])), "b1": repr(float(res.bary[i, 1])), "b2": repr(float(res.bary[i, 2])),
            "x": repr(float(X[i, 0])), "y": repr(float(X[i, 1])), "z": repr(float(X[i, 2])),
            "length": repr(float(res.length[i])), "status": TraceStatus(int(res.status[i])).name,
        }


EXPMAP_FIELDS = ("index", "face", "b0", "b1", "b2", "x", "y", "z", "length", "status")


def cmd_expmap(args):
    m = _load(args)
    f, b, v = _requests(args, m)
    res = trace_batch(m, f, b, v, _trace_cfg(args), workers=args.workers)
    _write_csv(args.out, EXPMAP_SCHEMA, EXPMAP_FIELDS, _endpoint_rows(m, f, b, v, res))


def cmd_trace(args):
    m = _load(args)
    f, b, v = _requests(args, m)
    res = trace_batch(m, f, b, v, _trace_cfg(args), workers=args.workers, record_path=True)
    traces = []
    for i in range(len(f)):
        t = res[i].to_json()
        t["start"] = {"face": int(f[i]), "bary": b[i].tolist()}
        t["vector"] = v[i].tolist()
        traces.append(t)
    _write_json(args.out, {"schema": "digeo.traces/1", "traces": traces})
    if args.obj:
        # one OBJ, one "l" element per trace, vertex indices offset across traces
        lines, base = [], 0
        for i in range(len(f)):
            X = res[i].polyline(m)
            lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in X.tolist()]
            if len(X) > 1:
                lines.append("l " + " ".join(str(base + k + 1) for k in range(len(X))))
            base += len(X)
        Path(args.obj).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_gradcheck(args):
    if args.scheme == "gfd" and not args.eps_rel > 0:
        raise InvalidArgs("--eps-rel must be positive")
    m = make_icosphere(args.subdiv) if args.mesh is None else _load(args)
    rng = np.random.default_rng(args.seed_rng)
    out = bench.gradcheck(m, args.n, rng, args.scheme, GfdConfig(rel=args.eps_rel), workers=args.workers)
    keep = {k: val for k, val in out.items() if not isinstance(val, np.ndarray)}
    _write_json(args.out, keep)


def cmd_benchmark(args):
    rng = np.random.default_rng(args.seed_rng)

    def on_error(rec):
        sys.stderr.write(json.dumps(rec) + "\n")

    recs = bench.benchmark(args.subdivs, args.batches, args.reps, rng, args.workers, args.pi_samples, on_error)
    rows = [{k: (repr(x) if isinstance(x, float) else x) for k, x in r.row().items()} for r in recs]
    _write_csv(args.out, bench.BENCH_SCHEMA, bench.BenchmarkRecord.FIELDS, rows)


def cmd_oracle_compare(args):
    rng = np.random.default_rng(args.seed_rng)
    torus = [tuple(int(x) for x in s.split("x")) for s in args.torus]
    rep = bench.oracle_compare(args.n, args.subdivs, torus, rng, args.workers, args.pi_samples)
    _write_json(args.out, rep)


GCVT_FIELDS = ("run", "method", "iteration", "energy", "calls")


def cmd_gcvt(args):
    m = _load(args)
    if args.n < 1 or args.iters < 0 or args.runs < 1:
        raise InvalidArgs("--n, --runs must be >= 1 and --iters >= 0")
    rows = []
    for run in range(args.runs):
        rng = np.random.default_rng([args.seed_rng, run])
        S0 = opt.clustered_seeds(m, args.n, rng) if args.seeds == "clustered" else opt.uniform_seeds(m, args.n, rng)
        if args.method == "lloyd":
            _, traj = opt.lloyd(m, S0, args.iters)
        else:
            _, traj = opt.mesh_lbfgs(m, S0, cfg=opt.LbfgsConfig(max_iter=args.iters), workers=args.workers)
        for it, e, c in traj:
            rows.append({"run": run, "method": args.method, "iteration": it, "energy": repr(float(e)), "calls": c})
    _write_csv(args.out, GCVT_SCHEMA, GCVT_FIELDS, rows)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_requests(p):
    p.add_argument("--mesh", required=True, help="input OBJ")
    p.add_argument("--input", help="CSV with header face,b0,b1,b2,vx,vy,vz")
    p.add_argument("--points", help="CSV with header face,b0,b1,b2 (use with --dirs)")
    p.add_argument("--dirs", help="CSV with header vx,vy,vz, one row per point")
    p.add_argument("--random", type=int, help="trace N random samples instead of reading files")
    p.add_argument("--min-length", type=float, default=0.1)
    p.add_argument("--max-length", type=float, default=math.pi / 2)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--hole-avoidance", action="store_true")
    p.add_argument("--out")


def _int_list(s):
    return tuple(int(x) for x in s.split(","))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="digeo", description="Straightest-geodesic tracing on triangle meshes.")
    ap.add_argument("--workers", type=int, default=None, help="threads for batch tracing (overrides DIGEO_WORKERS)")
    ap.add_argument("--seed-rng", type=int, default=42)
    ap.add_argument("--precision", choices=("f32", "f64"), default="f64",
                    help="f32 rounds the mesh and inputs to single precision before tracing")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a fixture mesh as OBJ")
    p.add_argument("--shape", choices=_SHAPES, required=True)
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--R", type=float, default=2.0)
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--r-in", type=float, default=0.3)
    p.add_argument("--n-alpha", type=int, default=128)
    p.add_argument("--n-beta", type=int, default=64)
    p.add_argument("--n-around", type=int, default=32)
    p.add_argument("--n", type=int, default=10, help="grid / ring resolution")
    p.add_argument("--size", type=float, default=1.0)
    p.add_argument("--height", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("trace", help="trace geodesics and write their polylines as JSON")
    p.add_argument("--obj", help="also write the polylines as OBJ line elements")
    _add_requests(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("expmap", help="write Exp endpoints as CSV")
    _add_requests(p)
    p.set_defaults(func=cmd_expmap)

    p = sub.add_parser("gradcheck", help="compare mesh gradients with sphere closed forms")
    p.add_argument("--scheme", choices=("ep", "gfd"), default="gfd")
    p.add_argument("--mesh", help="unit-sphere OBJ (default: generated icosphere)")
    p.add_argument("--subdiv", type=int, default=5)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--eps-rel", type=float, default=1.0, help="GFD step in mean edge lengths")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="batch-size and face-count timing sweep (CSV)")
    p.add_argument("--subdivs", type=_int_list, default=(3, 4, 5, 6, 7))
    p.add_argument("--batches", type=_int_list, default=(100, 1000, 10000, 100000))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--pi-samples", type=int, default=0, help="also time N projection-integration traces")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("oracle-compare", help="endpoint errors against sphere and torus ground truth (JSON)")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--subdivs", type=_int_list, default=(5, 6))
    p.add_argument("--torus", nargs="*", default=["128x64", "256x128"], help="torus resolutions as AxB")
    p.add_argument("--pi-samples", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_compare)

    p = sub.add_parser("gcvt", help="geodesic centroidal Voronoi runs (CSV of energy and calls)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--seeds", choices=("uniform", "clustered"), default="clustered")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--method", choices=("lloyd", "lbfgs"), default="lbfgs")
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gcvt)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers is not None and args.workers < 1:
            raise InvalidArgs("--workers must be >= 1")
        args.func(args)
    except InvalidArgs as e:
        return _fail("InvalidArgs", str(e), 2)
    except (OSError, IOError) as e:
        return _fail("IOError", str(e), 3)
    except (DigeoError, ValueError) as e:
        return _fail(type(e).__name__, str(e), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
