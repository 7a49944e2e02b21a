"""Ray tracing against the object mesh and the learned cell-to-facet
visibility table."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from covplan.agent import (CameraConfig, FovPose, LightRay, LightRays,
                           enumerate_configs, fov_offsets, light_rays)
from covplan.geometry import EPS_BARY, EPS_PAR, EPS_PLANE, hull_from_points
from covplan.world import Environment, Mesh, Scenario


class TableError(ValueError):
    pass


@dataclass(frozen=True)
class FacetCache:
    """Per-facet constants reused by every ray query."""

    v0: np.ndarray
    e0: np.ndarray
    e1: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    d00: np.ndarray
    d01: np.ndarray
    d11: np.ndarray
    den: np.ndarray

    @classmethod
    def of(cls, mesh: Mesh) -> "FacetCache":
        t = mesh.tris
        e0 = t[:, 1] - t[:, 0]
        e1 = t[:, 2] - t[:, 0]
        d00 = np.einsum("ij,ij->i", e0, e0)
        d01 = np.einsum("ij,ij->i", e0, e1)
        d11 = np.einsum("ij,ij->i", e1, e1)
        return cls(t[:, 0], e0, e1, mesh.normals, mesh.offsets, d00, d01, d11,
                   d00 * d11 - d01 * d01)


_caches: dict[int, tuple[Mesh, FacetCache]] = {}


def _cache(mesh: Mesh) -> FacetCache:
    hit = _caches.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, FacetCache.of(mesh))
        _caches[id(mesh)] = hit
    return hit[1]


def trace_many(origins, endpoints, mesh: Mesh) -> np.ndarray:
    """Facet index hit last before each ray's endpoint, ``-1`` for a miss.

    ``origins`` is ``(R, 3)``; ``endpoints`` is ``(3,)`` or ``(R, 3)``.
    Among facets whose plane is crossed at ``d`` in ``[0, 1]`` inside the
    triangle, the largest ``d`` wins; equal ``d`` goes to the lower index.
    """
    fc = _cache(mesh)
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    direction = np.asarray(endpoints, dtype=float) - o
    if fc.v0.shape[0] == 0:
        return np.full(len(o), -1, dtype=int)
    denom = direction @ fc.normals.T
    num = fc.offsets[None, :] - o @ fc.normals.T
    ok = np.abs(denom) >= EPS_PAR
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(ok, num / np.where(ok, denom, 1.0), np.nan)
    ok &= (d >= 0.0) & (d <= 1.0)
    p = o[:, None, :] + d[:, :, None] * direction[:, None, :]
    w = p - fc.v0[None]
    d20 = np.einsum("rkj,kj->rk", w, fc.e0)
    d21 = np.einsum("rkj,kj->rk", w, fc.e1)
    b1 = (fc.d11 * d20 - fc.d01 * d21) / fc.den
    b2 = (fc.d00 * d21 - fc.d01 * d20) / fc.den
    b0 = 1.0 - b1 - b2
    on_plane = np.abs(np.einsum("rkj,kj->rk", p, fc.normals) - fc.offsets) <= EPS_PLANE
    ok &= on_plane & (b0 >= -EPS_BARY) & (b1 >= -EPS_BARY) & (b2 >= -EPS_BARY)
    score = np.where(ok, d, -np.inf)
    best = np.argmax(score, axis=1)
    hit = np.isfinite(score[np.arange(len(o)), best])
    return np.where(hit, best, -1)


def trace(ray: LightRay, mesh: Mesh) -> int | None:
    k = int(trace_many(ray.origin[None], ray.endpoint, mesh)[0])
    return None if k < 0 else k


def visible_facets(pose: FovPose, mesh: Mesh, n_rays: int, seed=None) -> set[int]:
    rays = light_rays(pose, n_rays, seed)
    hits = trace_many(rays.origins, rays.endpoint, mesh)
    return {int(k) for k in hits if k >= 0}


@dataclass
class VisibilityTable:
    grid_dims: tuple[int, int, int]
    facet_count: int
    samples: int
    seed: int
    bits: np.ndarray  # (n_cells, n_facets) bool

    def __eq__(self, other):
        return (isinstance(other, VisibilityTable) and self.grid_dims == other.grid_dims
                and self.facet_count == other.facet_count and self.samples == other.samples
                and self.seed == other.seed and np.array_equal(self.bits, other.bits))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.grid_dims))

    def check_matches(self, scenario: Scenario, samples: int | None = None) -> None:
        if (tuple(self.grid_dims) != tuple(scenario.env.grid_dims)
                or self.facet_count != scenario.mesh.n_facets
                or (samples is not None and self.samples != samples)):
            raise TableError("table/scenario mismatch")

    @classmethod
    def all_visible(cls, scenario: Scenario) -> "VisibilityTable":
        env = scenario.env
        return cls(tuple(env.grid_dims), scenario.mesh.n_facets, 0, scenario.seed,
                   np.ones((env.n_cells, scenario.mesh.n_facets), dtype=bool))


def sample_cell(env: Environment, cell: int, configs: list[CameraConfig], offsets, n_rays: int,
                samples: int, seed: int):
    """Draw ``samples`` (position, config, ray origins) tuples for one cell from
    the ``(seed, cell)`` substream.  Each draw consumes a fixed amount of the
    stream, so a longer run extends a shorter one."""
    rng = np.random.default_rng([seed, cell])
    lo, hi = env.cell_bounds(cell)
    for _ in range(samples):
        pos = lo + rng.random(3) * (hi - lo)
        m = int(rng.integers(len(configs)))
        uv = rng.random((n_rays, 2))
        verts = offsets[m] + pos
        c0, c1, _, c3 = verts[:4]
        origins = c0 + uv[:, :1] * (c1 - c0) + uv[:, 1:] * (c3 - c0)
        yield pos, m, origins


def learn_row(scenario: Scenario, mesh: Mesh, cell: int, samples: int, seed: int) -> np.ndarray:
    configs = enumerate_configs(scenario.camera)
    offsets = [fov_offsets(c, scenario.camera) for c in configs]
    row = np.zeros(mesh.n_facets, dtype=bool)
    n = scenario.camera.n_rays
    batch_o, batch_e = [], []
    for pos, _, origins in sample_cell(scenario.env, cell, configs, offsets, n, samples, seed):
        batch_o.append(origins)
        batch_e.append(np.broadcast_to(pos, origins.shape))
    if batch_o and mesh.n_facets:
        hits = trace_many(np.vstack(batch_o), np.vstack(batch_e), mesh)
        row[hits[hits >= 0]] = True
    return row


def learn_table(scenario: Scenario, mesh: Mesh | None = None, samples: int | None = None,
                seed: int | None = None, workers: int = 1) -> VisibilityTable:
    """Monte-Carlo visibility table: bit ``(cell, facet)`` is set when some
    sampled pose inside the cell traces a ray back to the facet."""
    mesh = scenario.mesh if mesh is None else mesh
    samples = scenario.samples_per_cell if samples is None else samples
    seed = scenario.seed if seed is None else seed
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cells = range(scenario.env.n_cells)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(learn_row, *zip(*[(scenario, mesh, c, samples, seed) for c in cells])))
    else:
        rows = [learn_row(scenario, mesh, c, samples, seed) for c in cells]
    bits = np.array(rows, dtype=bool).reshape(scenario.env.n_cells, mesh.n_facets)
    return VisibilityTable(tuple(scenario.env.grid_dims), mesh.n_facets, samples, seed, bits)


def save_table(table: VisibilityTable, path) -> None:
    nx, ny, nz = table.grid_dims
    lines = ["VISTAB v1", f"grid {nx} {ny} {nz}", f"facets {table.facet_count}",
             f"samples {table.samples}", f"seed {table.seed}"]
    body = []
    for c, row in enumerate(table.bits):
        ks = np.flatnonzero(row)
        if len(ks):
            body.append(f"{c}: " + " ".join(str(int(k)) for k in ks))
    lines += body
    lines.append(f"end {len(body)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path, scenario: Scenario | None = None) -> VisibilityTable:
    lines = Path(path).read_text().splitlines()
    try:
        if lines[0].strip() != "VISTAB v1":
            raise TableError("bad magic")
        head = {}
        for line, key in zip(lines[1:5], ("grid", "facets", "samples", "seed")):
            tag, *vals = line.split()
            if tag != key:
                raise TableError(f"expected {key!r} header")
            head[key] = [int(v) for v in vals]
        grid = tuple(head["grid"])
        if len(grid) != 3:
            raise TableError("grid needs three dims")
        facets = head["facets"][0]
        bits = np.zeros((int(np.prod(grid)), facets), dtype=bool)
        body = [line for line in lines[5:] if line.strip()]
        tag, count = body[-1].split()
        if tag != "end" or int(count) != len(body) - 1:
            raise TableError("truncated table")
        for line in body[:-1]:
            cell, sep, rest = line.partition(":")
            if not sep:
                raise TableError(f"missing ':' in {line!r}")
            c = int(cell)
            ks = np.array([int(k) for k in rest.split()], dtype=int)
            if not 0 <= c < len(bits) or (len(ks) and (ks.min() < 0 or ks.max() >= facets)):
                raise TableError(f"index out of range in {line!r}")
            bits[c, ks] = True
    except (IndexError, KeyError, ValueError) as exc:
        raise TableError(f"{path}: parse error ({exc})") from exc
    table = VisibilityTable(grid, facets, head["samples"][0], head["seed"][0], bits)
    if scenario is not None:
        table.check_matches(scenario)
    return table
