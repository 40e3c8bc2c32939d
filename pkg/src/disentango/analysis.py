"""Disentanglement and identifiability diagnostics.

* mutual-information score across latent dimensions (lower = more
  disentangled), via equal-frequency histograms;
* mean correlation coefficient (MCC) between learned and true latents,
  using absolute Spearman correlation and an optimal assignment — rank
  correlation is invariant under the componentwise invertible transforms
  the identifiability result permits;
* supervised latent recovery error (percentage);
* a numerical checker for the linear-independence condition that underpins
  componentwise identifiability, over a Gaussian conditional-prior family;
* latent traversals: decode a latent grid around an anchor task and run the
  operator on a probe load, exporting every field.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from .model import ModelState
from .tensor import Tensor


class AnalysisError(ValueError):
    pass


@dataclass
class LatentTable:
    """Per-task learned posterior means plus optional ground truth."""

    mu: np.ndarray                      # (S, d_z)
    z_true: np.ndarray | None = None    # (S, d_z_true)
    labels: np.ndarray | None = None    # (S,)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.ndim != 2:
            raise AnalysisError(f"latent table must be 2-d, got shape {self.mu.shape}")
        if self.z_true is not None:
            self.z_true = np.asarray(self.z_true, dtype=np.float64)
            if self.z_true.shape[0] != self.mu.shape[0]:
                raise AnalysisError("true-latent rows do not match learned rows")
        if self.labels is not None and len(self.labels) != self.mu.shape[0]:
            raise AnalysisError("label rows do not match learned rows")

    @property
    def num_tasks(self) -> int:
        return self.mu.shape[0]

    @property
    def d_z(self) -> int:
        return self.mu.shape[1]


def latent_table_from_model(model: ModelState, tasks, indices=None) -> LatentTable:
    """Posterior means of the given tasks plus their generating latents."""
    indices = list(range(model.num_tasks)) if indices is None else list(indices)
    _, _, flat = model.theta_rows(indices)
    post = model.encode(flat)
    z_true = np.stack([tasks[i].z for i in indices])
    labels = None
    if all(tasks[i].label is not None for i in indices):
        labels = np.array([tasks[i].label for i in indices])
    return LatentTable(post.mean.data.copy(), z_true, labels)


# -- mutual information ---------------------------------------------------------


def _equal_frequency_bins(col: np.ndarray, bins: int) -> np.ndarray:
    """Assign each sample to one of `bins` roughly equal-count bins."""
    edges = np.quantile(col, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, col, side="right")


def _pair_mi(bi: np.ndarray, bj: np.ndarray, bins: int) -> float:
    joint = np.zeros((bins, bins))
    np.add.at(joint, (bi, bj), 1.0)
    p = joint / joint.sum()
    pi = p.sum(axis=1, keepdims=True)
    pj = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (pi @ pj)[mask])))


def mi_score(table: LatentTable, bins: int = 8) -> tuple[np.ndarray, float]:
    """Pairwise MI matrix (nats) across latent dimensions and its mean
    off-diagonal value. Symmetric with a zero diagonal by convention."""
    if bins < 4:
        raise AnalysisError(f"need at least 4 bins, got {bins}")
    if table.num_tasks < 30:
        raise AnalysisError(f"need at least 30 tasks for MI histograms, "
                            f"got {table.num_tasks}")
    d = table.d_z
    binned = []
    constant = []
    for k in range(d):
        col = table.mu[:, k]
        if np.ptp(col) == 0.0:
            warnings.warn(f"latent dimension {k} is constant; its MI is set to 0")
            constant.append(k)
            binned.append(np.zeros(table.num_tasks, dtype=int))
        else:
            binned.append(_equal_frequency_bins(col, bins))
    mat = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            if i in constant or j in constant:
                continue
            mat[i, j] = mat[j, i] = _pair_mi(binned[i], binned[j], bins)
    score = float(mat.sum() / (d * (d - 1))) if d > 1 else 0.0
    return mat, score


# -- mean correlation coefficient --------------------------------------------------


def mcc(table: LatentTable) -> float:
    """Mean absolute Spearman correlation between learned and true latents
    under the optimal one-to-one matching."""
    if table.z_true is None:
        raise AnalysisError("MCC needs the true latents in the table")
    d_l, d_t = table.d_z, table.z_true.shape[1]
    corr = np.zeros((d_l, d_t))
    for i in range(d_l):
        for j in range(d_t):
            if np.ptp(table.mu[:, i]) == 0.0 or np.ptp(table.z_true[:, j]) == 0.0:
                continue
            rho = spearmanr(table.mu[:, i], table.z_true[:, j]).statistic
            corr[i, j] = abs(rho)
    rows, cols = linear_sum_assignment(corr, maximize=True)
    return float(corr[rows, cols].mean())


def supervised_latent_error(table: LatentTable) -> float:
    """Mean relative recovery error of the supervised latents, in percent."""
    if table.z_true is None:
        raise AnalysisError("supervised latent error needs the true latents")
    norms = np.linalg.norm(table.z_true, axis=1)
    keep = norms > 0
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} task(s) with zero-norm supervision "
                      "excluded from the latent error")
    if not np.any(keep):
        raise AnalysisError("no tasks with nonzero supervision vectors")
    errs = np.linalg.norm(table.mu[keep] - table.z_true[keep], axis=1) / norms[keep]
    return float(errs.mean() * 100.0)


# -- linear-independence condition checker ------------------------------------------


@dataclass
class GaussianQFamily:
    """Conditional prior q_i(z_i | b): independent Gaussians whose mean and
    log-variance are affine in b.

        mean_i(b)   = (A b)_i + m0_i
        logvar_i(b) = (C b)_i + v0_i

    Setting C = 0 reproduces the degenerate mean-only case.
    """

    A: np.ndarray                        # (d_z, d_b)
    m0: np.ndarray                       # (d_z,)
    C: np.ndarray | None = None          # (d_z, d_b) or None for mean-only
    v0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if self.v0.size == 0:
            self.v0 = np.zeros(self.A.shape[0])

    @property
    def d_z(self) -> int:
        return self.A.shape[0]

    def score_vector(self, z: np.ndarray, b: np.ndarray) -> np.ndarray:
        """w(z, b): first and second z-derivatives of log q, stacked."""
        mean = self.A @ b + self.m0
        logvar = self.v0 if self.C is None else self.C @ b + self.v0
        var = np.exp(logvar)
        d1 = -(z - mean) / var
        d2 = -1.0 / var
        return np.concatenate([d1, d2])

    @staticmethod
    def random(d_z: int, d_b: int, rng: np.random.Generator,
               mean_only: bool = False) -> "GaussianQFamily":
        A = rng.standard_normal((d_z, d_b))
        m0 = rng.standard_normal(d_z)
        C = None if mean_only else rng.standard_normal((d_z, d_b))
        v0 = rng.uniform(-0.5, 0.5, size=d_z)
        return GaussianQFamily(A, m0, C, v0)


def check_linear_independence(b_set, family: GaussianQFamily,
                              z: np.ndarray | None = None,
                              rng: np.random.Generator | None = None) -> dict:
    """Numerical test of the componentwise-identifiability condition: the
    2 d_z difference vectors w(z, b^j) - w(z, b^0) must be linearly
    independent for some z."""
    b_set = [np.asarray(b, dtype=np.float64) for b in b_set]
    d_z = family.d_z
    need = 2 * d_z + 1
    if len(b_set) < need:
        raise AnalysisError(
            f"the linear-independence condition needs at least 2*d_z+1 = {need} "
            f"distinct parameter vectors, got {len(b_set)}")
    if z is None:
        rng = rng or np.random.default_rng(0)
        z = rng.standard_normal(d_z)
    w0 = family.score_vector(z, b_set[0])
    diffs = np.stack([family.score_vector(z, b) - w0 for b in b_set[1:need]])
    sv = np.linalg.svd(diffs, compute_uv=False)
    if sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > 1e-8 * sv[0]))
    return {"rank": rank, "satisfied": rank == 2 * d_z}


# -- latent traversal -----------------------------------------------------------------


@dataclass
class TraversalGrid:
    anchor: np.ndarray                  # (d_z,)
    dims: list[int]
    values: list[np.ndarray]            # per varied dim
    z_points: np.ndarray                # (G, d_z)
    theta: np.ndarray                   # (G, d_theta)
    u_hat: np.ndarray                   # (G, pairs, *grid)
    b_recon: np.ndarray | None = None   # (G, *grid) when the map m is known


def _is_untrained(model: ModelState) -> bool:
    return (np.array_equal(model.theta_mean, np.zeros(model.d_theta))
            and np.array_equal(model.theta_std, np.ones(model.d_theta)))


def latent_traversal(model: ModelState, anchor_task: int, dims, lo: float,
                     hi: float, steps: int, probe_load: np.ndarray,
                     b_from_z=None) -> TraversalGrid:
    """Vary the chosen latent dimensions on a regular grid around the anchor
    task's posterior mean, decode each point, and run the operator on the
    probe load."""
    if _is_untrained(model):
        raise AnalysisError("refusing to traverse an untrained model "
                            "(encoder-input statistics were never fitted)")
    dims = [int(d) for d in (dims if hasattr(dims, "__iter__") else [dims])]
    for d in dims:
        if not 0 <= d < model.d_z:
            raise AnalysisError(f"latent dimension {d} out of range [0, {model.d_z})")
    if steps < 1:
        raise AnalysisError("steps must be >= 1")
    _, _, flat = model.theta_rows([anchor_task])
    anchor = model.encode(flat).mean.data[0].copy()

    values = [np.linspace(lo, hi, steps) if steps > 1
              else np.array([(lo + hi) / 2.0]) for _ in dims]
    mesh = np.meshgrid(*values, indexing="ij")
    grid_points = np.stack([m.ravel() for m in mesh], axis=-1)   # (G, len(dims))
    z_points = np.tile(anchor, (len(grid_points), 1))
    for k, d in enumerate(dims):
        z_points[:, d] = grid_points[:, k]

    theta = model.decode(Tensor(z_points)).data
    split = model.d_in * model.channels
    w = Tensor(theta[:, :split].reshape(-1, model.d_in, model.channels))
    b = Tensor(theta[:, split:])
    probe = np.asarray(probe_load, dtype=np.float64)
    if probe.ndim == len(model.grid_extents):
        probe = probe[None]
    f = Tensor(np.broadcast_to(probe, (len(z_points),) + probe.shape).copy())
    u_hat = model.ifno_forward(f, w, b).data
    b_recon = None
    if b_from_z is not None:
        b_recon = np.stack([b_from_z(z) for z in z_points])
    return TraversalGrid(anchor, dims, values, z_points, theta, u_hat, b_recon)


# -- exports -----------------------------------------------------------------------


def write_latent_table(path: str, table: LatentTable):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["task"] + [f"mu_{i}" for i in range(table.d_z)]
        if table.z_true is not None:
            header += [f"z_true_{i}" for i in range(table.z_true.shape[1])]
        if table.labels is not None:
            header.append("label")
        writer.writerow(header)
        for r in range(table.num_tasks):
            row = [r] + list(table.mu[r])
            if table.z_true is not None:
                row += list(table.z_true[r])
            if table.labels is not None:
                row.append(int(table.labels[r]))
            writer.writerow(row)


def write_mi_matrix(path: str, mat: np.ndarray):
    np.savetxt(path, mat, delimiter=",")


def write_traversal(outdir: str, grid: TraversalGrid):
    """One CSV per grid point (header carries the latent values) plus an
    index file; deterministic bytes for a fixed model and grid."""
    os.makedirs(outdir, exist_ok=True)
    index = []
    for g, z in enumerate(grid.z_points):
        name = f"traversal_{g:04d}.csv"
        with open(os.path.join(outdir, name), "w", newline="") as fh:
            fh.write("# z = " + ",".join(repr(v) for v in z) + "\n")
            flat = grid.u_hat[g].reshape(grid.u_hat[g].shape[0], -1)
            writer = csv.writer(fh)
            writer.writerow([f"pair_{j}" for j in range(flat.shape[0])])
            for row in flat.T:
                writer.writerow([repr(v) for v in row])
        index.append({"file": name, "z": list(z)})
    with open(os.path.join(outdir, "traversal_index.json"), "w") as fh:
        json.dump({"dims": grid.dims, "anchor": list(grid.anchor),
                   "points": index}, fh, indent=2, sort_keys=True)


def write_metrics(path: str, metrics: dict):
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
