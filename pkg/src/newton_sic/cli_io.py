"""Scene configuration, command dispatch and exporters (CSV tables, OBJ meshes).

A run is driven by one JSON document::

    {"mode": "Composite", "domain": {"disc": {"center": [0, 0], "radius": 1}},
     "M": 1.0, "epsilon": 0.3, "m": 4, "n": 2, "seed": 7}

Unknown fields raise ParseError; out-of-range values raise ValidationError naming the field.
Exit codes: 0 ok, 1 construction, 2 verification failure, 3 resource, 4 I/O, 5 usage/config.
The only environment input is NEWTON_SIC_OUT, which overrides the output directory.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import pickle
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .assembly import CompositeSurface, build_composite_surface, composite_from_pairs, verify_composite
from .billiard import (CAP, GraphPatch, HollowSet, PlanePatch, Scene, WallPatch, batch_trace, graph_scene)
from .dic_body import DicBody, InnerParams, build_dic_body, dic_verify
from .domain import ConvexDomain, make_domain
from .elementary import (ElementaryFunction, PairArrays, focal_parameters, make_elementary_pair,
                         sic_sample_check)
from .errors import (ConstructionError, NewtonSicError, ParseError, ResourceError, ValidationError,
                     VerificationError)
from .hierarchy import (M_MAX, Tri, build_first_order_family, build_second_order_family, family_report,
                        predicted_pairs, run_doubling)
from .resistance import (asymptotics, format_table, phi_lower_bound, reference_table, resistance_analytic,
                         resistance_billiard)

MODES = ("Elementary", "FirstOrder", "SecondOrder", "Composite", "DicBody", "Flat")
EXIT_OK, EXIT_CONSTRUCTION, EXIT_VERIFY, EXIT_RESOURCE, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3, 4, 5
ENV_OUT = "NEWTON_SIC_OUT"
DEFAULT_OUT = "newton_sic_out"


def fmt(x) -> str:
    """17 significant digits: round-trip safe."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


@dataclass(frozen=True)
class SceneConfig:
    mode: str = "Composite"
    domain: dict = field(default_factory=lambda: {"disc": {"center": [0.0, 0.0], "radius": 1.0}})
    M: float = 1.0
    epsilon: float = 0.3
    m: int = 4
    n: int = 2
    c: float | None = None
    delta: float | None = None
    samples: int = 4
    max_pairs: int = 2_000_000
    cap: int = CAP
    seed: int | None = None
    n_rays: int = 100_000
    n_samples: int = 100_000
    n_t: int = 32
    pair: dict | None = None
    tri: dict | None = None
    inner: dict = field(default_factory=dict)
    out_dir: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


_FIELDS = {f.name for f in dataclasses.fields(SceneConfig)}
_INNER_FIELDS = {f.name for f in dataclasses.fields(InnerParams)}


def parse_scene_config(text: str, *, stochastic: bool = False) -> SceneConfig:
    """Parse and validate a JSON scene document; defaults are filled in.

    ``stochastic`` marks a Monte Carlo run, for which the seed is mandatory.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ParseError("the configuration must be a JSON object")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ParseError(f"unknown field(s): {', '.join(unknown)}")
    try:
        cfg = SceneConfig(**raw)
    except TypeError as e:
        raise ParseError(str(e)) from e
    validate(cfg, stochastic=stochastic)
    if cfg.delta is None:
        cfg = dataclasses.replace(cfg, delta=cfg.epsilon / 10)
    return cfg


def _num(cfg, name, lo=None, hi=None, integer=False, lo_open=False):
    v = getattr(cfg, name)
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type or not math.isfinite(v):
        raise ValidationError(f"{name} must be a finite {'integer' if integer else 'number'}", field=name)
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ValidationError(f"{name}={v} is below the allowed range ({'>' if lo_open else '>='} {lo})", field=name)
    if hi is not None and v > hi:
        raise ValidationError(f"{name}={v} exceeds the allowed maximum {hi}", field=name)


def validate(cfg: SceneConfig, *, stochastic: bool = False) -> None:
    if cfg.mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}", field="mode")
    _num(cfg, "M", 0, lo_open=True)
    _num(cfg, "epsilon", 0, lo_open=True)
    _num(cfg, "m", 1, integer=True)
    _num(cfg, "n", 1, 64, integer=True)
    _num(cfg, "samples", 1, 32, integer=True)
    _num(cfg, "max_pairs", 1, integer=True)
    _num(cfg, "cap", 1, 10_000, integer=True)
    _num(cfg, "n_rays", 1, integer=True)
    _num(cfg, "n_samples", 1, integer=True)
    _num(cfg, "n_t", 1, 64, integer=True)
    if cfg.c is not None:
        _num(cfg, "c", 0, lo_open=True)
    if cfg.delta is not None:
        _num(cfg, "delta", 0, lo_open=True)
    if cfg.mode in ("SecondOrder", "Composite", "DicBody"):
        m = cfg.inner.get("m", cfg.m) if cfg.mode == "DicBody" else cfg.m
        need = predicted_pairs(int(m))
        if need > cfg.max_pairs:
            raise ValidationError(f"m={m} needs {need} pairs > budget max_pairs={cfg.max_pairs}", field="m")
    if cfg.m > M_MAX:
        raise ValidationError(f"m={cfg.m} exceeds the doubling budget m <= {M_MAX}", field="m")
    if cfg.seed is not None:
        _num(cfg, "seed", 0, integer=True)
    elif stochastic:
        raise ValidationError("a Monte Carlo run needs an explicit seed", field="seed")
    try:
        make_domain(cfg.domain)
    except (ConstructionError, KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"bad domain: {e}", field="domain") from e
    if cfg.mode == "Elementary":
        p = cfg.pair or {}
        missing = {"O", "A", "B", "inner_fraction"} - set(p)
        if missing:
            raise ValidationError(f"pair needs {sorted(missing)}", field="pair")
        if not 0 < float(p["inner_fraction"]) < 1:
            raise ValidationError("pair.inner_fraction must lie in (0, 1)", field="pair")
    if cfg.tri is not None and set(cfg.tri) - {"M", "N", "apex"}:
        raise ParseError("tri accepts only M, N, apex")
    bad = set(cfg.inner) - _INNER_FIELDS
    if bad:
        raise ParseError(f"unknown inner field(s): {', '.join(sorted(bad))}")


@dataclass
class RunRecord:
    config_hash: str
    version: str
    command: str
    reports: dict
    wall_time: float


# ---------------------------------------------------------------- scene building

@dataclass(frozen=True, eq=False)
class DomainFootprint:
    """Picklable footprint predicate: the closed domain."""

    domain: ConvexDomain

    def __call__(self, xy):
        return self.domain.contains_many(xy, closed=True)


def flat_scene(domain: ConvexDomain, M: float = 1.0) -> Scene:
    return Scene([PlanePatch(0.0, True, DomainFootprint(domain), 1, "plateau")], domain, M, M, name="flat")


def elementary_surface(pair_spec: dict, M: float) -> CompositeSurface:
    pr = make_elementary_pair(pair_spec["O"], pair_spec["A"], pair_spec["B"], float(pair_spec["inner_fraction"]))
    f = ElementaryFunction(pr, M)
    if not f.nonnegative:
        raise ConstructionError(f"pair is not nonnegative at h={M}: d0={pr.d0:.6g} < p={f.p:.6g}")
    D = make_domain({"polygon": [pr.O.tolist(), pr.A.tolist(), pr.B.tolist()]})
    return composite_from_pairs(D, M, PairArrays.from_pairs([pr]), flat_fill=False)


def _tri(cfg: SceneConfig) -> Tri:
    t = cfg.tri or {"M": [-0.5, 0.0], "N": [0.5, 0.0], "apex": [0.0, 1.0]}
    return Tri(np.asarray(t["M"], float), np.asarray(t["N"], float), np.asarray(t["apex"], float))


def build_object(cfg: SceneConfig, log=None):
    """The built object of a config: a family, a composite surface, a DIC body or a flat scene."""
    D = make_domain(cfg.domain)
    if cfg.mode == "Flat":
        return flat_scene(D, cfg.M)
    if cfg.mode == "Elementary":
        return elementary_surface(cfg.pair, cfg.M)
    if cfg.mode == "FirstOrder":
        return build_first_order_family(_tri(cfg), cfg.m)
    if cfg.mode == "SecondOrder":
        return build_second_order_family(_tri(cfg), cfg.m, max_pairs=cfg.max_pairs)
    if cfg.mode == "Composite":
        return build_composite_surface(D, cfg.M, cfg.epsilon, cfg.m, cfg.n, cfg.max_pairs, samples=cfg.samples,
                                       delta=cfg.delta, verify=False, log=log)
    inner = InnerParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.inner.items()})
    return build_dic_body(D, cfg.M, cfg.epsilon, inner, log=log)


def scene_of(obj) -> Scene:
    if isinstance(obj, Scene):
        return obj
    if isinstance(obj, DicBody):
        return obj.scene
    if isinstance(obj, CompositeSurface):
        return graph_scene(obj)
    raise ValidationError(f"{type(obj).__name__} has no billiard scene", field="mode")


# ---------------------------------------------------------------- exporters

def write_csv(path, header, rows) -> str:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])
    except OSError as e:
        raise IOError(f"cannot write {path}: {e}") from e
    return path


def _oriented(V, T, want):
    """Flip triangles so that their normals agree with ``want`` (per triangle, (K,3))."""
    if len(T) == 0:
        return T
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    nrm = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", nrm, want) < 0
    T = T.copy()
    T[flip] = T[flip][:, [0, 2, 1]]
    return T


def _grid_tris(rows: int, cols: int, off: int = 0):
    i, j = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (i * cols + j).ravel() + off
    b, c, d = a + 1, a + cols, a + cols + 1
    return np.concatenate([np.column_stack([a, c, b]), np.column_stack([b, c, d])])


def _pair_mesh(O, A, B, Mp, Np, p, z0, res):
    """Mirror (polar grid about O between MN and AB), MN wall and valley fan; all edge-connected."""
    th0 = math.atan2(*(A - O)[::-1])
    span = (math.atan2(*(B - O)[::-1]) - th0 + math.pi) % (2 * math.pi) - math.pi
    th = th0 + span * np.linspace(0, 1, res + 1)
    e = np.column_stack([np.cos(th), np.sin(th)])

    def hit(P, Q):
        nrm = np.array([-(Q - P)[1], (Q - P)[0]])
        return ((P - O) @ nrm) / (e @ nrm)

    r_in, r_out = hit(Mp, Np), hit(A, B)
    s = np.linspace(0, 1, res + 1)
    r = r_in[:, None] + s[None, :] * (r_out - r_in)[:, None]
    xy = O + r[..., None] * e[:, None, :]
    z = z0 + (r * r - p * p) / (2 * p)
    mirror = np.concatenate([xy.reshape(-1, 2), z.reshape(-1, 1)], axis=1)
    T = [_grid_tris(res + 1, res + 1)]
    n0 = len(mirror)
    inner = xy[:, 0]
    wall = np.concatenate([np.column_stack([inner, np.full(res + 1, z0)]), mirror[:: res + 1]])
    # wall strip: bottom row n0.., top row is the mirror's inner edge (indices k*(res+1))
    k = np.arange(res)
    top = k * (res + 1)
    bot = n0 + k
    T.append(np.column_stack([bot, bot + 1, top]))
    T.append(np.column_stack([bot + 1, top + res + 1, top]))
    apex = n0 + res + 1
    V = np.concatenate([mirror, wall[: res + 1], [[O[0], O[1], z0]]])
    T.append(np.column_stack([np.full(res, apex), bot, bot + 1]))
    T = np.concatenate(T)
    # mirror faces up, wall faces the valley (towards O), valley faces up
    want = np.zeros((len(T), 3))
    nm = 2 * res * res
    want[:nm, 2] = 1.0
    cen = V[T[nm:nm + 2 * res]].mean(axis=1)
    want[nm:nm + 2 * res, :2] = O - cen[:, :2]
    want[nm + 2 * res:, 2] = 1.0
    return V, _oriented(V, T, want)


def _ring_mesh(domain: ConvexDomain, lo: float, hi: float, z: float, up: bool, k: int):
    """Strip between the level sets d = lo and d = hi of a convex domain, sampled by rays from its centroid."""
    c = np.asarray(domain.shape.centroid.coords[0])
    ang = 2 * np.pi * np.arange(k) / k
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    rows = []
    for level in (lo, hi):
        inner = domain if level <= 0 else domain.inner_parallel(level)
        t = inner.clip_rays(np.tile(c, (k, 1)), dirs)
        rows.append(c + t[:, None] * dirs)
    V = np.concatenate([np.column_stack([r, np.full(k, z)]) for r in rows])
    i = np.arange(k)
    j = (i + 1) % k
    T = np.concatenate([np.column_stack([i, j, k + i]), np.column_stack([j, k + j, k + i])])
    want = np.tile([0.0, 0.0, 1.0 if up else -1.0], (len(T), 1))
    return V, _oriented(V, T, want)


def _fan_mesh(domain: ConvexDomain, z: float, up: bool, k: int):
    b = domain.boundary_points(k) if domain.kind == "disc" else domain.vertices
    V = np.column_stack([b, np.full(len(b), z)])
    T = np.column_stack([np.zeros(len(b) - 2, int), np.arange(1, len(b) - 1), np.arange(2, len(b))])
    return V, _oriented(V, T, np.tile([0.0, 0.0, 1.0 if up else -1.0], (len(T), 1)))


def _wall_mesh(inner: ConvexDomain, z_lo: float, z_hi: float, k: int):
    b = inner.boundary_points(k) if inner.kind == "disc" else inner.vertices
    n = len(b)
    V = np.concatenate([np.column_stack([b, np.full(n, z_lo)]), np.column_stack([b, np.full(n, z_hi)])])
    i = np.arange(n)
    j = (i + 1) % n
    T = np.concatenate([np.column_stack([i, j, n + i]), np.column_stack([j, n + j, n + i])])
    mid = (b + b[j]) / 2
    want = np.zeros((len(T), 3))
    want[:, :2] = -np.tile(inner.outward_normals(mid), (2, 1))
    return V, _oriented(V, T, want)


def _hollow_mesh(F, a, f, z_hi, res):
    """Tilted paraboloid rho^2 = 4 f (s + f) about the axis a, from its vertex down to z = 0."""
    e1 = np.cross(a, [0.0, 0.0, 1.0])
    if np.linalg.norm(e1) < 1e-12:
        e1 = np.array([1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    s_end = F[2] / max(-a[2], 1e-12)
    s = -f + (s_end + f) * np.linspace(0, 1, res + 1) ** 2
    phi = 2 * np.pi * np.arange(res) / res
    rho = np.sqrt(np.maximum(4 * f * (s + f), 0))
    X = (F + s[:, None, None] * a + rho[:, None, None] * (np.cos(phi)[None, :, None] * e1 + np.sin(phi)[None, :, None] * e2))
    V = X.reshape(-1, 3)
    i, j = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    a0 = (i * res + j).ravel()
    b0 = (i * res + (j + 1) % res).ravel()
    T = np.concatenate([np.column_stack([a0, a0 + res, b0]), np.column_stack([b0, a0 + res, b0 + res])])
    cen = V[T].mean(axis=1)
    w = cen - F
    axis_pt = F + np.einsum("ij,j->i", w, a)[:, None] * a
    T = _oriented(V, T, axis_pt - cen)  # the normal points into the hollow
    W = V[T]
    area = np.linalg.norm(np.cross(W[:, 1] - W[:, 0], W[:, 2] - W[:, 0]), axis=1)
    keep = (W[:, :, 2] <= z_hi + 1e-12).all(axis=1) & (area > 1e-15 * max(f, 1e-300) ** 2)
    return V, T[keep]


def scene_meshes(obj, resolution: int = 16, max_objects: int = 20_000, h: float = 1.0):
    """(name, V, T) per patch; the graph of a composite yields one object per elementary pair."""
    if isinstance(obj, (CompositeSurface, DicBody, Scene)):
        scene = scene_of(obj)
        items = scene.items
    else:
        P = obj.pairs if hasattr(obj, "pairs") and not callable(obj.pairs) else obj.pairs()
        items = [("pairs", P, focal_parameters(P.d, h), 0.0)]
    count = sum(len(it.patches()) if hasattr(it, "patches") else len(it[1]) for it in items)
    if count > max_objects:
        raise ResourceError(f"{count} mesh objects exceed max_objects={max_objects}", predicted=count)
    out = []
    k = max(8 * resolution, 32)
    for it in items:
        if isinstance(it, tuple) or isinstance(it, GraphPatch):
            if isinstance(it, GraphPatch):
                P, p, z0 = it.surface.pairs, it.surface.p, it.z0
            else:
                _, P, p, z0 = it
            for i in range(len(P)):
                V, T = _pair_mesh(P.O[i], P.A[i], P.B[i], P.M[i], P.N[i], p[i], z0, resolution)
                out.append((f"pair_{i}", V, T))
        elif isinstance(it, PlanePatch):
            fp = it.footprint
            if isinstance(fp, DomainFootprint):
                V, T = _fan_mesh(fp.domain, it.level, it.up, k)
            else:
                V, T = _ring_mesh(fp.domain, fp.lo, fp.hi, it.level, it.up, k)
            out.append((it.name.replace(" ", "_") or f"plane_{it.pid}", V, T))
        elif isinstance(it, WallPatch):
            V, T = _wall_mesh(it.inner, it.z_lo, it.z_hi, k)
            out.append((it.name.replace(" ", "_") or f"wall_{it.pid}", V, T))
        elif isinstance(it, HollowSet):
            for i in range(len(it)):
                V, T = _hollow_mesh(it.F[i], it.a[i], it.f[i], it.z_hi, resolution)
                out.append((f"hollow_{i}", V, T))
    return out


def export_mesh_obj(obj, path: str, resolution: int = 16, max_objects: int = 20_000, h: float = 1.0) -> int:
    """Write an OBJ with one object per patch (1-based indices, counterclockwise outward faces).

    Patches are tessellated over their own footprints; overlaps resolved by the min are not cut
    away, so the file is for viewing only and never a tracer input. Returns the object count.
    """
    meshes = scene_meshes(obj, resolution, max_objects, h)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(f"# newton_sic {__version__}\n")
            base = 1
            for name, V, T in meshes:
                fh.write(f"o {name}\n")
                fh.writelines(f"v {fmt(x)} {fmt(y)} {fmt(z)}\n" for x, y, z in V)
                fh.writelines(f"f {a + base} {b + base} {c + base}\n" for a, b, c in T)
                base += len(V)
    except OSError as e:
        raise IOError(f"cannot write {path}: {e}") from e
    return len(meshes)


def read_obj(path: str):
    """Minimal OBJ reader for round-trip checks: {name: (V, T)} with 0-based local indices."""
    objs, verts, cur = {}, [], None
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "o":
                cur = tok[1]
                objs[cur] = []
            elif tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                objs[cur].append([int(t) - 1 for t in tok[1:4]])
    V = np.array(verts)
    out = {}
    for name, F in objs.items():
        F = np.array(F, dtype=np.int64).reshape(-1, 3)
        used = np.unique(F)
        remap = {g: i for i, g in enumerate(used)}
        out[name] = (V[used], np.vectorize(remap.get)(F) if len(F) else F)
    return out


# ---------------------------------------------------------------- commands

def out_dir(cfg: SceneConfig | None, flag: str | None) -> str:
    return flag or os.environ.get(ENV_OUT) or (cfg.out_dir if cfg and cfg.out_dir else DEFAULT_OUT)


def _load_config(path: str, stochastic: bool) -> SceneConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise IOError(f"cannot read config {path}: {e}") from e
    return parse_scene_config(text, stochastic=stochastic)


def _obtain(args, cfg):
    if getattr(args, "scene", None):
        try:
            with open(args.scene, "rb") as fh:
                return pickle.load(fh)
        except OSError as e:
            raise IOError(f"cannot read scene {args.scene}: {e}") from e
    return build_object(cfg)


def _summary(name, value, err=None, extra="") -> str:
    s = f"{name} = {value:.6g}" + (f" ± {err:.2g}" if err is not None else "")
    return s + (f"  {extra}" if extra else "")


def cmd_phi(args, cfg):
    if cfg is not None:
        D, M = make_domain(cfg.domain), cfg.M
    else:
        D = make_domain({"polygon": json.loads(args.polygon)} if args.polygon else {"disc": {"radius": args.disc}})
        M = args.M
    r = phi_lower_bound(D, M)
    print(_summary("phi", r.value, r.error_estimate, f"(M={M:g}, |Omega|={D.area:.6g})"))
    return EXIT_OK, {"phi": r.value, "error": r.error_estimate}


def cmd_table(args, cfg):
    rows = reference_table()
    asy = asymptotics()
    od = out_dir(cfg, args.out)
    path = write_csv(os.path.join(od, "table.csv"), ["M", "P_SC", "P_C", "phi"],
                     [[r["M"], r["P_SC"], r["P_C"], r["phi"]] for r in rows])
    print(format_table(rows))
    print(f"large-M Newton/phi ratio = {asy['newton_ratio']:.2f}; phi(1e-3)/(pi/2) = {asy['small_M']:.5f}")
    print(f"table written to {path}")
    return EXIT_OK, {"rows": rows, "newton_ratio": asy["newton_ratio"]}


def cmd_build(args, cfg):
    t0 = time.perf_counter()
    obj = build_object(cfg, log=(lambda s: print(s, file=sys.stderr)) if args.verbose else None)
    dt = time.perf_counter() - t0
    od = out_dir(cfg, args.out)
    info = {"mode": cfg.mode, "seconds": dt}
    if isinstance(obj, CompositeSurface):
        info.update(pairs=len(obj), **{k: v for k, v in obj.build_info.items() if np.isscalar(v)})
        if cfg.seed is not None and cfg.mode == "Composite":
            info.update({k: v for k, v in verify_composite(obj, cfg.n_samples, cfg.seed).items() if np.isscalar(v)})
    elif isinstance(obj, DicBody):
        info.update(foci=len(obj.foci), eps_prime=obj.eps_prime, bound=obj.resistance_bound,
                    **{k: v for k, v in obj.info.items() if np.isscalar(v)})
    elif hasattr(obj, "pairs") or hasattr(obj, "root"):
        rep = family_report(obj, seed=cfg.seed or 0)
        info.update(pairs=rep.pair_count, valley_area=rep.valley_area, kappa_max=rep.kappa_max, ok=rep.ok)
    path = os.path.join(od, "scene.pkl")
    try:
        os.makedirs(od, exist_ok=True)
        with open(path, "wb") as fh:
            pickle.dump(obj, fh, protocol=pickle.HIGHEST_PROTOCOL)
    except OSError as e:
        raise IOError(f"cannot write {path}: {e}") from e
    write_csv(os.path.join(od, "build.csv"), ["key", "value"], sorted(info.items()))
    print(f"built {cfg.mode} in {dt:.1f}s: " + ", ".join(f"{k}={fmt(v)}" for k, v in sorted(info.items())
                                                          if k not in ("mode", "seconds")))
    return EXIT_OK, info


def cmd_resist(args, cfg):
    obj = _obtain(args, cfg)
    n = args.n or cfg.n_rays
    rows, rep = [], {}
    if isinstance(obj, CompositeSurface):
        F = resistance_analytic(obj, n=n, seed=cfg.seed)
        rows.append(["F", F.method, F.value, F.error_estimate, F.n_samples, cfg.seed])
        rep["F"] = (F.value, F.error_estimate)
    R = resistance_billiard(scene_of(obj), n=n, seed=cfg.seed + 1)
    rows.append(["R", R.method, R.value, R.error_estimate, R.n_samples, cfg.seed + 1])
    rep["R"] = (R.value, R.error_estimate)
    phi = phi_lower_bound(scene_of(obj).domain, cfg.M if not isinstance(obj, DicBody) else obj.M).value
    rep["phi"] = phi
    write_csv(os.path.join(out_dir(cfg, args.out), "resist.csv"),
              ["quantity", "method", "value", "error", "n", "seed"], rows + [["phi", "quadrature", phi, 0.0, 0, ""]])
    parts = [_summary(k, *rep[k]) for k in ("F", "R") if k in rep]
    print("; ".join(parts) + f"; phi = {phi:.6g}")
    return EXIT_OK, rep


def cmd_trace(args, cfg):
    obj = _obtain(args, cfg)
    scene = scene_of(obj)
    n = args.n or cfg.n_rays
    b = batch_trace(scene, n, cfg.seed, checks=True, cap=cfg.cap)
    if args.dump:
        d = scene.domain.distance_many(b.x0)
        marg = b.v_plus[:, 2] + scene.M / np.sqrt(scene.M ** 2 + d * d)
        write_csv(os.path.join(out_dir(cfg, args.out), "rays.csv"),
                  ["x", "y", "impacts", "v1", "v2", "v3", "ineq2_margin", "nonregular"],
                  [[*x, k, *v, mg, nr] for x, k, v, mg, nr in zip(b.x0, b.impacts, b.v_plus, marg, b.nonregular)])
    print(f"histogram = {b.histogram()}  (n={n}, seed={cfg.seed})")
    return EXIT_OK, {"histogram": b.histogram(), "checks": b.checks}


def cmd_verify_sic(args, cfg):
    obj = _obtain(args, cfg)
    if not isinstance(obj, CompositeSurface):
        raise ValidationError("verify-sic needs an Elementary or Composite scene", field="mode")
    n = args.n or cfg.n_rays
    sic = sic_sample_check(obj, obj.domain, min(cfg.n_samples, 10_000), cfg.n_t, cfg.seed)
    b = batch_trace(graph_scene(obj), n, cfg.seed + 1, checks=True, cap=cfg.cap)
    ch = b.checks
    hist = b.histogram()
    ok = sic.ok and hist == {1: n} and ch["ineq2_violations"] == 0 and ch["v3_monotone_violations"] == 0 \
        and ch["z_convex_violations"] == 0
    print(f"{'PASS' if ok else 'FAIL'} sic_violations = {sic.violations} (worst margin {sic.worst_margin:.3g}); "
          f"histogram = {hist}; ineq2 violations = {ch['ineq2_violations']}")
    return (EXIT_OK if ok else EXIT_VERIFY), {"sic_violations": sic.violations, "histogram": hist, **ch}


def cmd_verify_dic(args, cfg):
    obj = _obtain(args, cfg)
    if not isinstance(obj, DicBody):
        raise ValidationError("verify-dic needs a DicBody scene", field="mode")
    n = args.n or cfg.n_rays
    r = dic_verify(obj, n, cfg.seed, raise_on_violation=False, cap=cfg.cap)
    bound_ok = r.resistance < r.bound + r.error
    ok = r.ok and (bound_ok or args.no_bound)
    print(f"{'PASS' if ok else 'FAIL'} histogram = {r.histogram}; violations = {r.violations}; "
          + _summary("R", r.resistance, r.error, f"bound = {r.bound:.6g} ({'ok' if bound_ok else 'exceeded'})"))
    rep = {k: v for k, v in dataclasses.asdict(r).items() if k != "details"}
    write_csv(os.path.join(out_dir(cfg, args.out), "dic.csv"), ["key", "value"],
              sorted((k, v) for k, v in rep.items() if np.isscalar(v)))
    return (EXIT_OK if ok else EXIT_VERIFY), rep


def cmd_export_mesh(args, cfg):
    obj = _obtain(args, cfg)
    path = args.path or os.path.join(out_dir(cfg, args.out), "scene.obj")
    k = export_mesh_obj(obj, path, args.res, args.max_objects, cfg.M)
    print(f"wrote {k} objects to {path}")
    return EXIT_OK, {"objects": k, "path": path}


def cmd_doubling(args, cfg):
    d = args.d
    res = run_doubling(Tri(np.array([-d / 2, 0.0]), np.array([d / 2, 0.0]), np.array([0.0, 1.0])), args.m)
    rows = []
    for k, S in enumerate(res.S):
        bound = d * (math.log(k) + 1.5) if k else d / 2
        inc = S - res.S[k - 1] if k else 0.0
        rows.append([k, S, bound, inc, d / k if k else 0.0])
    ok = all(r[1] < r[2] for r in rows[1:]) and all(r[3] < r[4] for r in rows[1:])
    write_csv(os.path.join(out_dir(cfg, args.out), "doubling.csv"), ["k", "S", "bound", "increment", "d_over_k"], rows)
    for r in rows:
        print(f"k={r[0]:2d}  S={r[1]:.6f}  d(ln k+3/2)={r[2]:.6f}  dS={r[3]:.6f}  d/k={r[4]:.6f}")
    print(f"{'PASS' if ok else 'FAIL'} {len(res.triangles)} triangles")
    return (EXIT_OK if ok else EXIT_VERIFY), {"S": res.S}


COMMANDS = {"phi": (cmd_phi, False), "table": (cmd_table, False), "build": (cmd_build, False),
            "resist": (cmd_resist, True), "trace": (cmd_trace, True), "verify-sic": (cmd_verify_sic, True),
            "verify-dic": (cmd_verify_dic, True), "export-mesh": (cmd_export_mesh, False),
            "doubling-demo": (cmd_doubling, False)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message, field="argv")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="newton-sic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON scene configuration")
        sp.add_argument("--out", help=f"output directory (overrides {ENV_OUT})")
        sp.add_argument("--record", action="store_true", help="write a run record JSON")

    sp = sub.add_parser("phi", help="lower bound phi(Omega, M)")
    common(sp, False)
    sp.add_argument("--disc", type=float, default=1.0, help="disc radius")
    sp.add_argument("--polygon", help="JSON vertex list [[x, y], ...]")
    sp.add_argument("--M", type=float, default=1.0)
    sp = sub.add_parser("table", help="unit-disc reference table as CSV")
    common(sp, False)
    sp = sub.add_parser("build", help="build the configured object and save scene.pkl")
    common(sp)
    sp.add_argument("--verbose", action="store_true")
    for name, hlp in (("resist", "analytic F and billiard R"), ("trace", "batch trace with checks"),
                      ("verify-sic", "single impact checks"), ("verify-dic", "double impact checks"),
                      ("export-mesh", "OBJ export")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--scene", help="pickled object from build (skips the rebuild)")
        sp.add_argument("--n", type=int, help="number of rays (default: config n_rays)")
        if name == "trace":
            sp.add_argument("--dump", action="store_true", help="per-ray CSV")
        if name == "verify-dic":
            sp.add_argument("--no-bound", action="store_true", help="check impacts only, not the resistance bound")
        if name == "export-mesh":
            sp.add_argument("--res", type=int, default=16)
            sp.add_argument("--max-objects", type=int, default=20_000)
            sp.add_argument("--path")
    sp = sub.add_parser("doubling-demo", help="iterated doubling areas against the logarithmic bound")
    common(sp, False)
    sp.add_argument("--m", type=int, default=12)
    sp.add_argument("--d", type=float, default=1.0)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ParseError, ValidationError)):
        return EXIT_USAGE
    if isinstance(exc, ResourceError):
        return EXIT_RESOURCE
    if isinstance(exc, VerificationError):
        return EXIT_VERIFY
    if isinstance(exc, (OSError, pickle.UnpicklingError)):
        return EXIT_IO
    if isinstance(exc, NewtonSicError):
        return EXIT_CONSTRUCTION if isinstance(exc, ConstructionError) else EXIT_VERIFY
    raise exc


def run_command(argv) -> int:
    """Parse argv, run one subcommand, print a summary; returns the exit status."""
    t0 = time.perf_counter()
    try:
        args = make_parser().parse_args(list(argv))
        fn, stochastic = COMMANDS[args.command]
        cfg = _load_config(args.config, stochastic) if getattr(args, "config", None) else None
        status, reports = fn(args, cfg)
        if args.record:
            rec = RunRecord(cfg.digest if cfg else "", __version__, args.command, reports, time.perf_counter() - t0)
            path = os.path.join(out_dir(cfg, args.out), f"{args.command}_record.json")
            with open(path, "w") as fh:
                json.dump(dataclasses.asdict(rec), fh, indent=1, default=_jsonable)
        return status
    except (NewtonSicError, OSError, pickle.UnpicklingError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code(e)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating, np.bool_)):
        return x.item()
    return str(x)


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
