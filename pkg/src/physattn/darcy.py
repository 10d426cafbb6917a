"""Synthetic steady-diffusion data on the unit square, with the reference
finite-difference solver used to generate ground truth.

The task: -div(a grad p) = f with p = 0 on the boundary, where the
permeability a is a random two-valued medium. Fields live on an H x W nodal
grid over [0,1]^2 in row-major order; samples can be subsampled into
unstructured point sets.
"""

from __future__ import annotations

import concurrent.futures
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError

PERM_HIGH = 12.0
PERM_LOW = 3.0
SMOOTH_PASSES = 4
SOLVER_TOL = 1e-10


@dataclass
class MeshSample:
    """One discretized instance: point coordinates, observed input fields and
    target fields. ``grid`` is (H, W) for grid samples (row-major points),
    None for unstructured ones."""

    coords: np.ndarray
    observed: np.ndarray | None
    target: np.ndarray
    grid: tuple[int, int] | None = None

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def structured(self) -> bool:
        return self.grid is not None

    def validate(self):
        if self.coords.min() < -1e-12 or self.coords.max() > 1.0 + 1e-12:
            raise DataError("coordinates fall outside the unit square")
        if self.grid is not None and self.n_points != self.grid[0] * self.grid[1]:
            raise DataError(
                f"grid {self.grid} implies {self.grid[0] * self.grid[1]} points, "
                f"sample has {self.n_points}"
            )
        if self.observed is not None and self.observed.shape[0] != self.n_points:
            raise DataError("observed field row count does not match coords")
        if self.target.shape[0] != self.n_points:
            raise DataError("target field row count does not match coords")
        return self


@dataclass
class FieldStats:
    """Per-channel z-score statistics, computed on the training split only."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    tgt_mean: np.ndarray
    tgt_std: np.ndarray

    def standardize_observed(self, x):
        return (x - self.obs_mean) / self.obs_std

    def standardize_target(self, x):
        return (x - self.tgt_mean) / self.tgt_std

    def destandardize_target(self, x):
        return x * self.tgt_std + self.tgt_mean


@dataclass
class Dataset:
    """Samples sharing dimensions and structure kind, plus the normalization
    stats needed to map standardized fields back to physical units."""

    samples: list[MeshSample]
    stats: FieldStats

    def __len__(self):
        return len(self.samples)


def grid_coords(gh, gw):
    """(x, y) positions of an H x W nodal grid over [0,1]^2, row-major."""
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, gh), np.linspace(0.0, 1.0, gw), indexing="ij"
    )
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def _box_blur(field, passes):
    """3x3 box filter with edge replication, applied ``passes`` times."""
    out = field
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += padded[dy : dy + out.shape[0], dx : dx + out.shape[1]]
        out = acc / 9.0
    return out


def generate_permeability(seed, resolution):
    """Two-valued random medium: smoothed white noise thresholded at its
    median, giving ~50/50 high/low cells. Deterministic per seed."""
    if resolution < 8:
        raise ConfigError(f"resolution must be >= 8, got {resolution}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((resolution, resolution))
    smooth = _box_blur(noise, SMOOTH_PASSES)
    return np.where(smooth >= np.median(smooth), PERM_HIGH, PERM_LOW)


def solve_darcy(a, forcing=1.0, tol=SOLVER_TOL, max_iter=None):
    """Reference pressure solve: 5-point scheme with harmonic-mean face
    permeabilities, zero Dirichlet boundary, conjugate gradients.

    ``a`` holds nodal permeability on an H x W grid; returns p of the same
    shape with ``||A p - f|| / ||f|| <= tol``. Raises NumericError if CG does
    not get there within 10 * H * W iterations.
    """
    a = np.asarray(a, dtype=np.float64)
    gh, gw = a.shape
    hx = 1.0 / (gw - 1)
    hy = 1.0 / (gh - 1)
    # harmonic means across east-west and north-south faces
    ax = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])
    ay = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])
    e = ax[1:-1, 1:] / hx**2
    w = ax[1:-1, :-1] / hx**2
    s = ay[1:, 1:-1] / hy**2
    n = ay[:-1, 1:-1] / hy**2

    def apply_op(p_int):
        full = np.zeros((gh, gw))
        full[1:-1, 1:-1] = p_int
        pc = full[1:-1, 1:-1]
        return (
            e * (pc - full[1:-1, 2:])
            + w * (pc - full[1:-1, :-2])
            + s * (pc - full[2:, 1:-1])
            + n * (pc - full[:-2, 1:-1])
        )

    b = np.full((gh - 2, gw - 2), float(forcing))
    b_norm = np.linalg.norm(b)
    p = np.zeros((gh, gw))
    if b_norm == 0.0:
        return p

    # aim an order of magnitude below tol so the recomputed true residual,
    # which drifts from the CG recurrence by roundoff, still clears it
    target = 0.1 * tol * b_norm
    limit = max_iter if max_iter is not None else 10 * gh * gw
    x = np.zeros_like(b)
    r = b - apply_op(x)
    d = r.copy()
    rr = float((r * r).sum())
    used = 0
    while used < limit:
        if np.sqrt(rr) <= target:
            true_r = b - apply_op(x)
            if np.linalg.norm(true_r) <= tol * b_norm:
                break
            r = true_r  # recurrence drifted; restart from the true residual
            d = r.copy()
            rr = float((r * r).sum())
        ad = apply_op(d)
        alpha = rr / float((d * ad).sum())
        x += alpha * d
        r -= alpha * ad
        rr_new = float((r * r).sum())
        d = r + (rr_new / rr) * d
        rr = rr_new
        used += 1
    residual = np.linalg.norm(b - apply_op(x)) / b_norm
    if residual > tol:
        raise NumericError(
            f"pressure solve did not converge: residual {residual:.3e} after {used} iterations"
        )
    p[1:-1, 1:-1] = x
    return p


def darcy_sample(seed, resolution):
    """One raw (unstandardized) grid sample: observed = permeability,
    target = pressure."""
    a = generate_permeability(seed, resolution)
    p = solve_darcy(a)
    return MeshSample(
        coords=grid_coords(resolution, resolution),
        observed=a.reshape(-1, 1).astype(np.float64),
        target=p.reshape(-1, 1),
        grid=(resolution, resolution),
    ).validate()


def build_dataset(task, n_train, n_test, resolution, base_seed, workers=1):
    """Generate train/test splits with disjoint per-sample seeds
    (base_seed + index) and z-score both splits using train-split stats."""
    if task != "darcy":
        raise ConfigError(f"unknown task '{task}' (available: darcy)")
    if n_train < 1 or n_test < 0:
        raise ConfigError("need at least one training sample and n_test >= 0")

    train_seeds = [base_seed + i for i in range(n_train)]
    test_seeds = [base_seed + n_train + i for i in range(n_test)]
    if set(train_seeds) & set(test_seeds):
        raise DataError("train and test seed ranges overlap")

    def make(seed):
        return darcy_sample(seed, resolution)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            train = list(pool.map(make, train_seeds))
            test = list(pool.map(make, test_seeds))
    else:
        train = [make(s) for s in train_seeds]
        test = [make(s) for s in test_seeds]

    obs = np.concatenate([s.observed for s in train], axis=0)
    tgt = np.concatenate([s.target for s in train], axis=0)
    stats = FieldStats(
        obs_mean=obs.mean(axis=0),
        obs_std=_nonzero_std(obs),
        tgt_mean=tgt.mean(axis=0),
        tgt_std=_nonzero_std(tgt),
    )
    for s in train + test:
        s.observed = stats.standardize_observed(s.observed)
        s.target = stats.standardize_target(s.target)
    return Dataset(train, stats), Dataset(test, stats)


def _nonzero_std(x):
    std = x.std(axis=0)
    return np.where(std > 0.0, std, 1.0)


def resample_mesh(sample: MeshSample, keep_fraction, seed) -> MeshSample:
    """Uniform random subsample without replacement; rows are kept in their
    original order, so keep_fraction = 1 returns the identical point set.
    The result is unstructured."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = sample.n_points
    k = int(round(keep_fraction * n))
    if k < 4:
        raise DataError(f"resampling to {k} points would leave a degenerate sample")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return MeshSample(
        coords=sample.coords[idx].copy(),
        observed=None if sample.observed is None else sample.observed[idx].copy(),
        target=sample.target[idx].copy(),
        grid=None,
    )


# -- dataset files ------------------------------------------------------------

DATASET_MAGIC = b"PDED"
DATASET_VERSION = 1
_STRUCT_GRID, _STRUCT_UNSTRUCTURED = 0, 1


def save_dataset(path, dataset: Dataset):
    """Raw little-endian float64 container; round-trips bit-exactly."""
    samples = dataset.samples
    if not samples:
        raise DataError("refusing to write an empty dataset")
    first = samples[0]
    for s in samples:
        if s.grid != first.grid or s.n_points != first.n_points:
            raise DataError("all samples in a dataset must share structure and size")

    obs_dim = 0 if first.observed is None else first.observed.shape[1]
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    if first.grid is not None:
        buf.write(struct.pack("<B", _STRUCT_GRID))
        buf.write(struct.pack("<III", len(samples), first.grid[0], first.grid[1]))
    else:
        buf.write(struct.pack("<B", _STRUCT_UNSTRUCTURED))
        buf.write(struct.pack("<II", len(samples), first.n_points))
    buf.write(
        struct.pack("<III", first.coords.shape[1], obs_dim, first.target.shape[1])
    )
    stats = dataset.stats
    for arr in (stats.obs_mean, stats.obs_std, stats.tgt_mean, stats.tgt_std):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for s in samples:
        buf.write(np.ascontiguousarray(s.coords, dtype="<f8").tobytes())
        if obs_dim:
            buf.write(np.ascontiguousarray(s.observed, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(s.target, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            buf = io.BytesIO(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    if buf.read(4) != DATASET_MAGIC:
        raise DataError(f"{path} is not a dataset file (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    (tag,) = struct.unpack("<B", buf.read(1))
    if tag == _STRUCT_GRID:
        n_samples, gh, gw = struct.unpack("<III", buf.read(12))
        grid, n = (gh, gw), gh * gw
    elif tag == _STRUCT_UNSTRUCTURED:
        n_samples, n = struct.unpack("<II", buf.read(8))
        grid = None
    else:
        raise DataError(f"unknown structure tag {tag}")
    geom_dim, obs_dim, out_dim = struct.unpack("<III", buf.read(12))

    def read_array(shape):
        count = int(np.prod(shape))
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise DataError("dataset file truncated")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    stats = FieldStats(
        obs_mean=read_array((obs_dim,)),
        obs_std=read_array((obs_dim,)),
        tgt_mean=read_array((out_dim,)),
        tgt_std=read_array((out_dim,)),
    )
    samples = []
    for _ in range(n_samples):
        coords = read_array((n, geom_dim))
        observed = read_array((n, obs_dim)) if obs_dim else None
        target = read_array((n, out_dim))
        samples.append(MeshSample(coords, observed, target, grid=grid))
    if buf.read(1):
        raise DataError("dataset file has trailing bytes")
    return Dataset(samples, stats)
