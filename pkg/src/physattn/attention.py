"""Slice-based attention over mesh points.

The mechanism runs in four stages, per head:

1. project every point feature to M slice logits and softmax over the slice
   axis, giving a row-stochastic weight matrix w (each point distributes one
   unit of mass over the slices);
2. encode each slice into a token as the w-weighted mean of point features;
3. run standard scaled dot-product attention among the M tokens;
4. deslice: recompose per-point features as w-weighted mixes of the
   transited tokens.

Heads operate on disjoint channel groups and are concatenated before a final
output affine map. With M fixed, the cost is O(N*M*C + M^2*C), linear in the
number of mesh points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, GeometryError, ShapeError
from .tensor import Graph, Tensor

SLICE_SUM_GUARD = 1e-8  # added to slice mass so starved slices cannot divide by zero


@dataclass
class AttentionParams:
    """Per-layer attention parameters, one channel group per head.

    Shapes (H heads, per-head width ch, M slices, C = H * ch):
      slice_w (H, ch, M) pointwise or (H, 3, 3, ch, M) stencil; None for the
      fixed-squares variant. slice_b (H, 1, M). q/k/v weights (H, ch, ch) with
      biases (H, 1, ch). out_w (C, C), out_b (C,).
    """

    kind: str  # "pointwise" | "stencil3x3" | "squares"
    slice_w: Tensor | None
    slice_b: Tensor | None
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    out_w: Tensor
    out_b: Tensor
    square_side: int = 4


@dataclass
class AttnTrace:
    """Optional diagnostics captured during one attention call.

    slice_weights: (..., H, N, M), or (N, M) for the shared fixed-squares
    assignment. attention: (..., H, M, M). pre_output: (..., N, C) merged head
    features before the output affine map.
    """

    slice_weights: np.ndarray | None = None
    attention: np.ndarray | None = None
    pre_output: np.ndarray | None = None


def check_row_stochastic(w, tol=1e-9):
    """Raise ContractError unless every row of ``w`` is a distribution."""
    w = np.asarray(w, dtype=np.float64)
    if (w < 0).any():
        raise ContractError("row-stochastic matrix has negative entries")
    err = np.abs(w.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ContractError(f"rows sum to 1 +/- {err:.3e}, tolerance {tol:.1e}")


def compute_slice_weights(g: Graph, x, proj_w, proj_b):
    """Pointwise slice weights: softmax over slices of an affine projection.

    ``x`` is (..., N, ch); the same map applies to every point, so the result
    is permutation-equivariant in N. Returns a row-stochastic (..., N, M).
    """
    proj_w = g.as_tensor(proj_w)
    if proj_w.shape[-1] < 1:
        raise ConfigError("slice projector must produce at least one slice")
    logits = g.add(g.matmul(x, proj_w), proj_b)
    return g.softmax(logits, axis=-1)


def compute_slice_weights_stencil(g: Graph, x, stencil_w, stencil_b, grid):
    """Slice weights from a 3x3 stencil map on a structured grid.

    ``x`` is (..., N, ch) with N = gh * gw in row-major order; ``stencil_w``
    is (..., 3, 3, ch, M). Zero padding, stride 1, so N is unchanged.
    """
    if grid is None:
        raise GeometryError("stencil slice projector requires a structured grid")
    gh, gw = grid
    x = g.as_tensor(x)
    stencil_w = g.as_tensor(stencil_w)
    n, ch = x.shape[-2], x.shape[-1]
    if n != gh * gw:
        raise ShapeError(f"stencil: grid {gh}x{gw} does not match {n} points")
    m = stencil_w.shape[-1]
    if m < 1:
        raise ConfigError("slice projector must produce at least one slice")

    lead = x.shape[:-2]
    xg = g.reshape(x, lead + (gh, gw, ch))
    logits = g.reshape(g.stencil3x3(xg, stencil_w), lead + (n, m))
    logits = g.add(logits, stencil_b)
    return g.softmax(logits, axis=-1)


def slice_encode(g: Graph, x, w):
    """Aggregate point features into tokens: z_j = sum_i w_ij x_i / sum_i w_ij.

    A one-hot w yields exact cluster means. The denominator is floored at a
    tiny guard so a slice that receives no mass stays finite; any slice with
    real mass divides by its exact weight sum.
    """
    num = g.matmul(g.swap_last(w), x)
    mass = g.sum(w, axis=-2, keepdims=True)  # (..., 1, M)
    den = g.clip_min(g.swap_last(mass), SLICE_SUM_GUARD)  # (..., M, 1)
    return g.div(num, den)


def token_attention(g: Graph, z, params: AttentionParams, attn_sink=None):
    """Scaled dot-product attention among tokens, scale 1/sqrt(per-head width)."""
    z = g.as_tensor(z)
    q = g.add(g.matmul(z, params.q_w), params.q_b)
    k = g.add(g.matmul(z, params.k_w), params.k_b)
    v = g.add(g.matmul(z, params.v_w), params.v_b)
    scale = 1.0 / math.sqrt(z.shape[-1])
    attn = g.softmax(g.mul(g.matmul(q, g.swap_last(k)), scale), axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    return g.matmul(attn, v)


def deslice(g: Graph, z_prime, w):
    """Broadcast tokens back to points: x'_i = sum_j w_ij z'_j.

    Every output row is a convex combination of token rows.
    """
    return g.matmul(w, z_prime)


def _split_heads(g: Graph, x, heads):
    nd = x.ndim
    lead = x.shape[:-2]
    n, c = x.shape[-2], x.shape[-1]
    xh = g.reshape(x, lead + (n, heads, c // heads))
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2, nd)
    return g.transpose(xh, perm)


def _merge_heads(g: Graph, xh):
    nd = xh.ndim
    lead = xh.shape[:-3]
    h, n, ch = xh.shape[-3], xh.shape[-2], xh.shape[-1]
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return g.reshape(g.transpose(xh, perm), lead + (n, h * ch))


def physics_attention(g: Graph, x, params: AttentionParams, heads, grid=None, trace=None):
    """Multi-head slice attention: split channels, run the four stages per
    head, concatenate and apply the output affine map.

    ``x`` is (..., N, C) with C divisible by ``heads``. ``grid`` = (gh, gw) is
    required by the stencil and fixed-squares variants. With a single head the
    result is identical to composing the stage functions directly.
    """
    x = g.as_tensor(x)
    c = x.shape[-1]
    if c % heads != 0:
        raise ConfigError(f"channels ({c}) must be divisible by heads ({heads})")

    xh = _split_heads(g, x, heads)
    if params.kind == "pointwise":
        w = compute_slice_weights(g, xh, params.slice_w, params.slice_b)
    elif params.kind == "stencil3x3":
        w = compute_slice_weights_stencil(g, xh, params.slice_w, params.slice_b, grid)
    elif params.kind == "squares":
        if grid is None:
            raise GeometryError("fixed regular squares require a structured grid")
        w = Tensor(regular_square_slices(grid, params.square_side))
    else:
        raise ConfigError(f"unknown slice projector kind '{params.kind}'")

    if trace is not None:
        trace.slice_weights = w.data

    z = slice_encode(g, xh, w)
    attn_sink = [] if trace is not None else None
    z_prime = token_attention(g, z, params, attn_sink=attn_sink)
    if trace is not None:
        trace.attention = attn_sink[0]

    merged = _merge_heads(g, deslice(g, z_prime, w))
    if trace is not None:
        trace.pre_output = merged.data
    return g.affine(merged, params.out_w, params.out_b)


def regular_square_slices(grid, side=4):
    """One-hot assignment of grid points to fixed side x side squares.

    Partial squares at the right/bottom boundaries keep their own slice, so
    M = ceil(gh/side) * ceil(gw/side). Only defined for structured grids.
    """
    if grid is None:
        raise GeometryError("regular squares are undefined for unstructured input")
    if side < 1:
        raise ConfigError(f"square side must be >= 1, got {side}")
    gh, gw = int(grid[0]), int(grid[1])
    mh = -(-gh // side)
    mw = -(-gw // side)
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    labels = (ii // side) * mw + (jj // side)
    w = np.zeros((gh * gw, mh * mw))
    w[np.arange(gh * gw), labels.reshape(-1)] = 1.0
    return w


def attention_kl_from_uniform(attn):
    """Mean KL divergence of attention rows from the uniform distribution.

    For a row-stochastic input with rows a: mean over rows of
    sum_j a_j * ln(a_j * M), with 0 * ln 0 = 0. Zero iff every row is uniform.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ContractError("attention matrix must have at least one column")
    if (a < 0).any():
        raise ContractError("attention weights must be nonnegative")
    m = a.shape[-1]
    rows = a.reshape(-1, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, rows * np.log(rows * m), 0.0)
    return max(float(terms.sum(axis=1).mean()), 0.0)


def write_slice_weights_csv(path, coords, weights):
    """Write one row per point: point_index, coordinates, w_1..w_M."""
    coords = np.asarray(coords, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if coords.shape[0] != weights.shape[0]:
        raise ShapeError(
            f"coords ({coords.shape[0]} points) and weights ({weights.shape[0]}) disagree"
        )
    dim_names = ["x", "y", "z"][: coords.shape[1]]
    header = ["point_index", *dim_names, *[f"w_{j + 1}" for j in range(weights.shape[1])]]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(coords.shape[0]):
            cells = [str(i)]
            cells += [f"{v:.17g}" for v in coords[i]]
            cells += [f"{v:.17g}" for v in weights[i]]
            fh.write(",".join(cells) + "\n")
