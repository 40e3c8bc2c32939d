"""Synthetic multi-task data: latent draws, coefficient fields, GRF loads and
a variable-coefficient elliptic oracle.

Each task is one physical system: a latent vector z drawn from a uniform
prior, mapped to a strictly positive coefficient field b(x) on the unit
domain, with loading/solution pairs obtained by a direct sparse solve of

    -div(b grad u) = f,   u = 0 on the boundary.

Grids use nodes x_j = j/n (the periodic convention required by the spectral
layers); homogeneous Dirichlet data is imposed at x = 0 and at the ghost
node x = 1, so stored fields carry a zero first row/column.
"""

from __future__ import annotations

import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .seeding import split_stream

MAGIC = b"DSGO"
FORMAT_VERSION = 1

NUM_CLASS_LABELS = 4
M_KINDS = ("affine-basis", "two-segment", "scalar-set")


class DatagenError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0,1]^s with power-of-two extents and spacing 1/n."""

    extents: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.extents) <= 2:
            raise DatagenError(f"spatial dimension must be 1 or 2, got {len(self.extents)}")
        for n in self.extents:
            if n < 8 or (n & (n - 1)) != 0:
                raise DatagenError(f"grid extent {n} must be a power of two >= 8")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / n for n in self.extents)

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.spacing))

    def coordinates(self) -> list[np.ndarray]:
        """Node coordinate arrays, each shaped like a field."""
        axes = [np.arange(n) / n for n in self.extents]
        return list(np.meshgrid(*axes, indexing="ij")) if self.dim == 2 else [axes[0]]


def default_prior(m_kind: str, d_z: int) -> list[tuple[float, float]]:
    if m_kind == "affine-basis":
        return [(-0.8, 0.8)] * d_z
    if m_kind == "two-segment":
        if d_z < 3:
            raise DatagenError("two-segment needs d_z >= 3 (angle + two levels)")
        return [(0.1, np.pi - 0.1), (0.6, 1.8), (0.6, 1.8)] + [(-0.4, 0.4)] * (d_z - 3)
    if m_kind == "scalar-set":
        return [(0.8, 2.0)] + [(-0.5, 0.5)] * (d_z - 1)
    raise DatagenError(f"unknown m-kind {m_kind!r}; choose one of {M_KINDS}")


@dataclass
class GeneratorSpec:
    d_z: int
    m_kind: str
    num_tasks: int
    n_train: int
    grid: Grid
    n_eval: int = 0
    z_prior: list[tuple[float, float]] | None = None
    grf_exponent: float = 1.25
    load_scale: float = 1.0
    seed: int = 0
    with_labels: bool = False
    with_b: bool = False
    for_identifiability: bool = False
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.d_z < 1:
            raise DatagenError("d_z must be >= 1")
        if self.m_kind not in M_KINDS:
            raise DatagenError(f"unknown m-kind {self.m_kind!r}; choose one of {M_KINDS}")
        if self.z_prior is None:
            self.z_prior = default_prior(self.m_kind, self.d_z)
        if len(self.z_prior) != self.d_z:
            raise DatagenError(f"z_prior has {len(self.z_prior)} ranges, expected {self.d_z}")
        for lo, hi in self.z_prior:
            if not hi > lo:
                raise DatagenError(f"degenerate prior range ({lo}, {hi})")
        if not self.load_scale > 0:
            raise DatagenError(f"load_scale must be positive, got {self.load_scale}")
        if self.for_identifiability and self.num_tasks < 2 * self.d_z + 1:
            raise DatagenError(
                f"identifiability experiments need at least 2*d_z+1 = {2 * self.d_z + 1} "
                f"tasks (the linear-independence condition), got {self.num_tasks}")


@dataclass
class TaskDataset:
    """One system: hidden latent, coefficient field, (f, u) pairs on a grid."""

    index: int
    z: np.ndarray
    b_field: np.ndarray
    pairs: list[tuple[np.ndarray, np.ndarray]]
    label: int | None = None
    b_vector: np.ndarray | None = None


# -- Gaussian random field loads ---------------------------------------------


def sample_grf(grid: Grid, exponent: float, rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None) -> np.ndarray:
    """Zero-mean random field with spectral density ~ (|w|^2)^(-exponent).

    White noise is filtered in Fourier space by the square root of the
    power-law density; the zero mode is removed so the sample mean is
    exactly zero.
    """
    if exponent <= 0:
        raise DatagenError(f"GRF exponent must be positive, got {exponent}")
    if noise is None:
        if rng is None:
            raise DatagenError("sample_grf needs an rng when no noise field is given")
        noise = rng.standard_normal(grid.extents)
    elif noise.shape != grid.extents:
        raise DatagenError(f"noise shape {noise.shape} does not match grid {grid.extents}")
    waves = [np.fft.fftfreq(n, d=1.0 / n) for n in grid.extents]
    if grid.dim == 1:
        w2 = waves[0] ** 2
    else:
        w2 = waves[0][:, None] ** 2 + waves[1][None, :] ** 2
    with np.errstate(divide="ignore"):
        filt = np.where(w2 > 0, w2 ** (-exponent / 2.0), 0.0)
    spec = np.fft.fftn(noise, norm="ortho") * filt
    return np.fft.ifftn(spec, norm="ortho").real


# -- latent -> coefficient field ----------------------------------------------


def _bump_basis(grid: Grid, count: int) -> np.ndarray:
    """`count` smooth Gaussian bumps with distinct centers and amplitudes."""
    coords = grid.coordinates()
    centers = (np.arange(count) + 0.5) / count
    width = max(0.35 / count, 0.06)
    basis = []
    for i, c in enumerate(centers):
        amp = 0.8 * (1.0 - 0.45 * i / max(count, 1))
        if grid.dim == 1:
            r2 = (coords[0] - c) ** 2
        else:
            r2 = (coords[0] - c) ** 2 + (coords[1] - c) ** 2
        basis.append(amp * np.exp(-r2 / (2.0 * width**2)))
    return np.stack(basis)


def _global_profiles(grid: Grid, count: int) -> np.ndarray:
    """Fixed smooth profiles for the parameter-set map, first one constant."""
    coords = grid.coordinates()
    x = coords[0] if grid.dim == 1 else coords[0] + 0.5 * coords[1]
    profiles = [np.ones(grid.extents)]
    for i in range(1, count):
        profiles.append(0.5 * np.cos(2 * np.pi * i * x) / i)
    return np.stack(profiles)


def _check_prior(z: np.ndarray, spec_prior: list[tuple[float, float]]):
    z = np.asarray(z, dtype=np.float64)
    for i, (lo, hi) in enumerate(spec_prior):
        if not lo - 1e-12 <= z[i] <= hi + 1e-12:
            raise DatagenError(f"latent component {i} = {z[i]:.4g} outside prior range "
                               f"({lo:.4g}, {hi:.4g})")
    return z


def coefficient_from_latent(z, m_kind: str, grid: Grid,
                            z_prior: list[tuple[float, float]] | None = None) -> np.ndarray:
    """Map a latent vector to a strictly positive coefficient field."""
    z = np.asarray(z, dtype=np.float64)
    d_z = z.size
    prior = z_prior if z_prior is not None else default_prior(m_kind, d_z)
    if m_kind == "two-segment":
        # the rotation angle lives on the circle; only levels/extras are
        # range-checked so that the angle+pi mirror identity stays usable
        _check_prior(z[1:], prior[1:])
    else:
        z = _check_prior(z, prior)

    if m_kind == "affine-basis":
        b = 1.0 + np.tensordot(z, _bump_basis(grid, d_z), axes=1)
    elif m_kind == "two-segment":
        if grid.dim != 2:
            raise DatagenError("two-segment coefficient fields need a 2-d grid")
        angle, lo_level, hi_level = z[0], z[1], z[2]
        xs, ys = grid.coordinates()
        signed = np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)
        blend = 0.5 * (1.0 + np.tanh(signed / 0.08))
        b = lo_level + (hi_level - lo_level) * blend
        if d_z > 3:
            b = b + np.tensordot(z[3:], _bump_basis(grid, d_z - 3), axes=1)
    elif m_kind == "scalar-set":
        b = np.tensordot(z, _global_profiles(grid, d_z), axes=1)
    else:
        raise DatagenError(f"unknown m-kind {m_kind!r}; choose one of {M_KINDS}")

    if b.min() <= 1e-3:
        raise DatagenError(f"coefficient field not strictly positive (min {b.min():.4g}); "
                           "tighten the latent prior")
    return b


# -- finite-difference elliptic oracle ----------------------------------------


def _assemble(b: np.ndarray, grid: Grid) -> sp.csr_matrix:
    """Second-order flux-form operator for -div(b grad u), interior unknowns.

    Half-point coefficients are arithmetic means of adjacent nodes; at the
    x=1 ghost the coefficient is extended constantly from the last node.
    """
    if b.min() <= 0:
        raise DatagenError(f"coefficient field must be strictly positive (min {b.min():.4g})")
    if grid.dim == 1:
        n = grid.extents[0]
        h2 = grid.spacing[0] ** 2
        bx = np.concatenate([b, b[-1:]])          # ghost extension
        bh = 0.5 * (bx[:-1] + bx[1:])             # b at j+1/2, j=0..n-1
        m = n - 1                                  # unknowns j=1..n-1
        main = (bh[:-1] + bh[1:]) / h2             # at j: b_{j-1/2}+b_{j+1/2}
        off = -bh[1:-1] / h2                       # coupling j <-> j+1
        return sp.diags([off, main, off], [-1, 0, 1], shape=(m, m), format="csr")
    n1, n2 = grid.extents
    h1s, h2s = grid.spacing[0] ** 2, grid.spacing[1] ** 2
    bx = np.pad(b, ((0, 1), (0, 1)), mode="edge")
    bh1 = 0.5 * (bx[:-1, :-1] + bx[1:, :-1])       # at (j+1/2, k)
    bh2 = 0.5 * (bx[:-1, :-1] + bx[:-1, 1:])       # at (j, k+1/2)
    m1, m2 = n1 - 1, n2 - 1
    idx = lambda j, k: (j - 1) * m2 + (k - 1)
    rows, cols, vals = [], [], []
    for j in range(1, n1):
        for k in range(1, n2):
            r = idx(j, k)
            diag = (bh1[j - 1, k] + bh1[j, k]) / h1s + (bh2[j, k - 1] + bh2[j, k]) / h2s
            rows.append(r); cols.append(r); vals.append(diag)
            if j > 1:
                rows.append(r); cols.append(idx(j - 1, k)); vals.append(-bh1[j - 1, k] / h1s)
            if j < n1 - 1:
                rows.append(r); cols.append(idx(j + 1, k)); vals.append(-bh1[j, k] / h1s)
            if k > 1:
                rows.append(r); cols.append(idx(j, k - 1)); vals.append(-bh2[j, k - 1] / h2s)
            if k < n2 - 1:
                rows.append(r); cols.append(idx(j, k + 1)); vals.append(-bh2[j, k] / h2s)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m1 * m2, m1 * m2))


def make_solver(b: np.ndarray, grid: Grid):
    """LU-factored solver for a fixed coefficient field; reusable across loads."""
    if b.shape != grid.extents:
        raise DatagenError(f"field shape {b.shape} does not match grid {grid.extents}")
    lu = spla.splu(_assemble(b, grid).tocsc())

    def solve(f: np.ndarray) -> np.ndarray:
        if f.shape != grid.extents:
            raise DatagenError(f"load shape {f.shape} does not match grid {grid.extents}")
        u = np.zeros(grid.extents)
        if grid.dim == 1:
            u[1:] = lu.solve(f[1:])
        else:
            u[1:, 1:] = lu.solve(f[1:, 1:].ravel()).reshape(grid.extents[0] - 1,
                                                            grid.extents[1] - 1)
        return u

    return solve


def solve_pde(b: np.ndarray, f: np.ndarray, grid: Grid) -> np.ndarray:
    """Direct sparse solve of -div(b grad u) = f with zero Dirichlet data."""
    return make_solver(b, grid)(f)


def pde_residual(b: np.ndarray, u: np.ndarray, f: np.ndarray, grid: Grid) -> float:
    """Inf-norm of A u - f over interior nodes (the defining property of u)."""
    A = _assemble(b, grid)
    if grid.dim == 1:
        r = A @ u[1:] - f[1:]
    else:
        r = A @ u[1:, 1:].ravel() - f[1:, 1:].ravel()
    return float(np.max(np.abs(r)))


# -- dataset assembly and serialization ---------------------------------------


def _sample_z(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([r[0] for r in spec.z_prior])
    hi = np.array([r[1] for r in spec.z_prior])
    return lo + (hi - lo) * rng.random(spec.d_z)


def class_label(z: np.ndarray, prior: list[tuple[float, float]]) -> int:
    """Quantize the first latent coordinate into equal-width bins."""
    lo, hi = prior[0]
    frac = (z[0] - lo) / (hi - lo)
    return int(min(NUM_CLASS_LABELS - 1, max(0, int(frac * NUM_CLASS_LABELS))))


def _make_task(spec: GeneratorSpec, index: int) -> TaskDataset:
    rng = split_stream(spec.seed, f"data/task-{index}")
    z = _sample_z(spec, rng)
    b = coefficient_from_latent(z, spec.m_kind, spec.grid, spec.z_prior)
    solve = make_solver(b, spec.grid)
    pairs = []
    for _ in range(spec.n_train + spec.n_eval):
        f = spec.load_scale * sample_grf(spec.grid, spec.grf_exponent, rng)
        pairs.append((f, solve(f)))
    label = class_label(z, spec.z_prior) if spec.with_labels else None
    b_vec = z.copy() if spec.with_b else None
    return TaskDataset(index, z, b, pairs, label, b_vec)


def _splits(spec: GeneratorSpec) -> dict[str, list[int]]:
    s = spec.num_tasks
    n_val = max(0, int(round(spec.split_fracs[1] * s)))
    n_test = max(0, int(round(spec.split_fracs[2] * s)))
    n_train = s - n_val - n_test
    order = list(range(s))
    return {"train": order[:n_train],
            "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}


def spec_to_dict(spec: GeneratorSpec) -> dict:
    return {
        "d_z": spec.d_z, "m_kind": spec.m_kind, "num_tasks": spec.num_tasks,
        "n_train": spec.n_train, "n_eval": spec.n_eval,
        "grid_extents": list(spec.grid.extents),
        "z_prior": [list(r) for r in spec.z_prior],
        "grf_exponent": spec.grf_exponent, "load_scale": spec.load_scale,
        "seed": spec.seed,
        "with_labels": spec.with_labels, "with_b": spec.with_b,
        "for_identifiability": spec.for_identifiability,
        "split_fracs": list(spec.split_fracs),
    }


def spec_from_dict(d: dict) -> GeneratorSpec:
    return GeneratorSpec(
        d_z=d["d_z"], m_kind=d["m_kind"], num_tasks=d["num_tasks"],
        n_train=d["n_train"], n_eval=d["n_eval"],
        grid=Grid(tuple(d["grid_extents"])),
        z_prior=[tuple(r) for r in d["z_prior"]],
        grf_exponent=d["grf_exponent"],
        load_scale=d.get("load_scale", 1.0), seed=d["seed"],
        with_labels=d["with_labels"], with_b=d["with_b"],
        for_identifiability=d["for_identifiability"],
        split_fracs=tuple(d["split_fracs"]),
    )


def build_dataset(spec: GeneratorSpec) -> tuple[list[TaskDataset], dict]:
    workers = max(1, int(os.environ.get("DISENTANGO_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tasks = list(pool.map(lambda i: _make_task(spec, i), range(spec.num_tasks)))
    else:
        tasks = [_make_task(spec, i) for i in range(spec.num_tasks)]
    manifest = {
        "spec": spec_to_dict(spec),
        "splits": _splits(spec),
        "tasks": [{"index": t.index, "z": t.z.tolist(), "label": t.label}
                  for t in tasks],
    }
    return tasks, manifest


# Binary layout after the JSON manifest, per task in index order, all arrays
# little-endian float64 in row-major grid order:
#   b field, then f_1, u_1, f_2, u_2, ... for all n_train + n_eval pairs.


def save_dataset(path: str, tasks: list[TaskDataset], manifest: dict):
    try:
        with open(path, "wb") as fh:
            _write_dataset(fh, tasks, manifest)
    except OSError as e:
        raise DatagenError(f"cannot write dataset to {path}: {e}") from e


def _write_dataset(fh: io.BufferedWriter, tasks, manifest):
    blob = json.dumps(manifest, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    for t in tasks:
        fh.write(t.b_field.astype("<f8").tobytes())
        for f, u in t.pairs:
            fh.write(f.astype("<f8").tobytes())
            fh.write(u.astype("<f8").tobytes())


def load_dataset(path: str) -> tuple[list[TaskDataset], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DatagenError(f"cannot read dataset from {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise DatagenError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise DatagenError(f"{path}: unknown dataset format version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + mlen].decode())
    spec = spec_from_dict(manifest["spec"])
    extents = spec.grid.extents
    fsize = int(np.prod(extents))
    off = 16 + mlen
    tasks = []
    n_pairs = spec.n_train + spec.n_eval

    def read_field():
        nonlocal off
        a = np.frombuffer(raw, dtype="<f8", count=fsize, offset=off).reshape(extents)
        off += fsize * 8
        return a.copy()

    for meta in manifest["tasks"]:
        b = read_field()
        pairs = [(read_field(), read_field()) for _ in range(n_pairs)]
        z = np.array(meta["z"])
        tasks.append(TaskDataset(meta["index"], z, b, pairs, meta["label"],
                                 z.copy() if spec.with_b else None))
    return tasks, manifest
