"""Evaluation metrics: relative L2, rank correlation, force coefficients from
surface pressure, and the attention-sharpness diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import attention_kl_from_uniform
from .darcy import Dataset
from .errors import ContractError, ShapeError
from .model import ModelConfig, ParamStore, forward
from .tensor import Graph
from .training import relative_l2_loss


def relative_l2(pred, target) -> float:
    """Reporting entry point for the relative-L2 contract (same implementation
    as the training loss)."""
    return float(relative_l2_loss(Graph(), np.asarray(pred), np.asarray(target)).data)


def _average_ranks(values):
    """1-based ranks; ties receive the average of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(pred_coeffs, true_coeffs) -> float:
    """Pearson correlation of the rank variables, average ranks for ties.

    Invariant under strictly increasing transforms of either list; undefined
    (ContractError) when a list is constant or has fewer than two entries.
    """
    pred = np.asarray(pred_coeffs, dtype=np.float64)
    true = np.asarray(true_coeffs, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"coefficient lists disagree: {pred.shape} vs {true.shape}")
    if pred.size < 2:
        raise ContractError("rank correlation needs at least two samples")
    if np.all(pred == pred[0]) or np.all(true == true[0]):
        raise ContractError("rank correlation is undefined for constant input")
    rp = _average_ranks(pred) - _average_ranks(pred).mean()
    rt = _average_ranks(true) - _average_ranks(true).mean()
    return float((rp * rt).sum() / np.sqrt((rp * rp).sum() * (rt * rt).sum()))


@dataclass
class SurfacePatchSet:
    """Discretized object surface plus the inflow/reference quantities that
    nondimensionalize the force."""

    pressures: np.ndarray  # (K,)
    normals: np.ndarray  # (K, D) outward unit normals
    areas: np.ndarray  # (K,)
    inflow_dir: np.ndarray  # (D,) unit vector
    inflow_speed: float
    ref_area: float

    def validate(self):
        normals = np.asarray(self.normals, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=-1)
        if np.abs(lengths - 1.0).max() > 1e-9:
            raise ContractError("surface normals must be unit vectors (within 1e-9)")
        if np.abs(np.linalg.norm(np.asarray(self.inflow_dir, float)) - 1.0) > 1e-9:
            raise ContractError("inflow direction must be a unit vector")
        if np.asarray(self.areas).min() <= 0:
            raise ContractError("patch areas must be positive")
        if self.ref_area <= 0 or self.inflow_speed <= 0:
            raise ContractError("reference area and inflow speed must be positive")
        return self


def force_coefficient(surface: SurfacePatchSet) -> float:
    """Pressure part of the force coefficient for unit-density flow:
    C = 2/(v^2 A) * sum_patches p * (n . i) * area.

    The wall-shear contribution is deliberately dropped (it is typically much
    smaller than the pressure term); reports carry a flag saying so.
    """
    surface.validate()
    p = np.asarray(surface.pressures, dtype=np.float64)
    proj = np.asarray(surface.normals, float) @ np.asarray(surface.inflow_dir, float)
    integral = float((p * proj * np.asarray(surface.areas, float)).sum())
    return 2.0 * integral / (surface.inflow_speed**2 * surface.ref_area)


@dataclass
class EvalReport:
    """Aggregated test-set evaluation (flat key-value text + CSV)."""

    n_samples: int
    rel_l2_mean: float
    rel_l2_per_channel: list[float]
    kl_per_layer: list[float] | None = None
    coefficient_error: float | None = None
    spearman: float | None = None
    shear_term_dropped: bool = True

    def _pairs(self):
        pairs = [("n_samples", str(self.n_samples)),
                 ("rel_l2_mean", f"{self.rel_l2_mean:.17g}")]
        for i, v in enumerate(self.rel_l2_per_channel):
            pairs.append((f"rel_l2_channel_{i}", f"{v:.17g}"))
        if self.kl_per_layer is not None:
            for i, v in enumerate(self.kl_per_layer):
                pairs.append((f"attention_kl_layer_{i}", f"{v:.17g}"))
        if self.coefficient_error is not None:
            pairs.append(("coefficient_error", f"{self.coefficient_error:.17g}"))
        if self.spearman is not None:
            pairs.append(("spearman_rho", f"{self.spearman:.17g}"))
        pairs.append(("shear_term_dropped", str(self.shear_term_dropped).lower()))
        return pairs

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self._pairs())

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("metric,value\n")
            for k, v in self._pairs():
                fh.write(f"{k},{v}\n")


def predict(params: ParamStore, config: ModelConfig, dataset: Dataset,
            batch_size=16, collect_kl=False):
    """Batched forward over a dataset; returns predictions in physical units
    and, optionally, the per-layer mean attention KL from uniform."""
    samples = dataset.samples
    grid = samples[0].grid
    preds = []
    kl_sums = np.zeros(config.layers)
    kl_rows = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        coords = np.stack([s.coords for s in chunk])
        observed = None
        if chunk[0].observed is not None:
            observed = np.stack([s.observed for s in chunk])
        g = Graph()
        traces = [] if collect_kl else None
        out = forward(g, coords, observed, params, config, grid=grid, traces=traces)
        preds.append(dataset.stats.destandardize_target(out.data))
        if collect_kl:
            batch_rows = traces[0].attention.size // traces[0].attention.shape[-1]
            for layer, trace in enumerate(traces):
                kl_sums[layer] += attention_kl_from_uniform(trace.attention) * batch_rows
            kl_rows += batch_rows
    kl = (kl_sums / kl_rows).tolist() if collect_kl else None
    return np.concatenate(preds, axis=0), kl


def evaluate(params: ParamStore, config: ModelConfig, dataset: Dataset,
             kl=False, batch_size=16) -> EvalReport:
    """Relative L2 (overall and per channel) in physical units over a test
    set, optionally with the per-layer attention-KL diagnostic."""
    preds, kl_per_layer = predict(params, config, dataset, batch_size, collect_kl=kl)
    targets = np.stack(
        [dataset.stats.destandardize_target(s.target) for s in dataset.samples]
    )
    per_sample = [relative_l2(p, t) for p, t in zip(preds, targets)]
    per_channel = [
        float(np.mean([relative_l2(p[:, c : c + 1], t[:, c : c + 1])
                       for p, t in zip(preds, targets)]))
        for c in range(config.out_dim)
    ]
    return EvalReport(
        n_samples=len(dataset.samples),
        rel_l2_mean=float(np.mean(per_sample)),
        rel_l2_per_channel=per_channel,
        kl_per_layer=kl_per_layer,
    )
