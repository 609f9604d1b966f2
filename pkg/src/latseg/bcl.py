"""Bilateral convolution layers on a sparse permutohedral lattice.

A BCL transports point features onto the lattice vertices (splat), filters
them with a learnable kernel over each vertex's one-ring (convolve), and
reads them back at a set of output points (slice):

    out = slice(convolve(splat(F)))

Splat scatter-adds each point's features to its d+1 simplex corners weighted
by barycentric coordinates; slice is the transposed gather. Input and output
clouds may differ: output points are embedded against the vertex set the
input cloud touched, and simplex corners nobody touched contribute zero.

With normalization on, the raw sliced values are divided point-wise by the
result of pushing an all-ones signal through splat -> a fixed single-channel
blur profile over the one-ring -> slice on the same lattice. The denominator
depends only on the lattice geometry, never on features or learnable
weights, and is floored at 1e-12 (so outputs with no lattice support are 0).

All forward ops are linear in the features, and the backward pass is exact:
splat and slice are mutual adjoints, and the convolution gradient
scatter-gathers along the same adjacency. Accumulation orders are fixed
(ascending point index for scatters, ascending dense vertex index for
reductions), so results are bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError, StateError
from .lattice import MISSING, LatticeConfig, SparseLattice, build_lattice

# Floor for normalization denominators; keeps unsupported outputs at exactly 0.
NORM_EPS = 1e-12


@dataclass
class FilterBank:
    """Learnable one-ring kernel: weights (K, C_in, C_out) plus bias (C_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeError(f"weights must be (K, C_in, C_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[2],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out {self.weights.shape[2]}"
            )

    @property
    def taps(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


def identity_bank(taps: int, channels: int) -> FilterBank:
    """Kernel that copies the zero-offset tap: convolve becomes the identity."""
    w = np.zeros((taps, channels, channels))
    w[0] = np.eye(channels)
    return FilterBank(w, np.zeros(channels))


def default_blur_profile(taps: int) -> np.ndarray:
    """Fixed normalization blur: 1 at the zero offset, 0.5 elsewhere, sum 1."""
    prof = np.full(taps, 0.5)
    prof[0] = 1.0
    return prof / prof.sum()


def _gather(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row gather with MISSING -> zero row."""
    safe = np.maximum(idx, 0)
    out = values[safe]
    out[idx == MISSING] = 0.0
    return out


def splat(values: np.ndarray, lat: SparseLattice) -> np.ndarray:
    """Scatter-add (n, C) point features to (V, C) vertex features."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != lat.num_points:
        raise ShapeError(
            f"expected ({lat.num_points}, C) features, got {values.shape}"
        )
    d1 = lat.config.dim + 1
    rows = lat.point_vertices.reshape(-1)
    w = lat.point_bary.reshape(-1)
    out = np.empty((lat.num_vertices, values.shape[1]))
    for c in range(values.shape[1]):
        contrib = w * np.repeat(values[:, c], d1)
        out[:, c] = np.bincount(rows, weights=contrib, minlength=lat.num_vertices)
    return out


def slice(values: np.ndarray, indices: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Barycentric gather of (V, C) vertex features to (m, C) point features.

    indices/bary are an embedding as produced by SparseLattice.embed; MISSING
    corners contribute zero.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"expected (V, C) vertex features, got {values.shape}")
    if indices.shape != bary.shape:
        raise ShapeError("embedding indices and weights must have the same shape")
    gathered = _gather(values, indices)  # (m, d+1, C)
    return np.einsum("mk,mkc->mc", bary, gathered)


def splat_adjoint(vertex_grad: np.ndarray, lat: SparseLattice) -> np.ndarray:
    """Pull a (V, C) cotangent back to points; the transpose of splat."""
    return slice(vertex_grad, lat.point_vertices, lat.point_bary)


def slice_adjoint(
    point_grad: np.ndarray, indices: np.ndarray, bary: np.ndarray, num_vertices: int
) -> np.ndarray:
    """Push an (m, C) cotangent onto vertices; the transpose of slice."""
    point_grad = np.asarray(point_grad, dtype=np.float64)
    d1 = indices.shape[1]
    rows = indices.reshape(-1)
    w = bary.reshape(-1)
    valid = rows != MISSING
    rows_v = rows[valid]
    w_v = w[valid]
    out = np.empty((num_vertices, point_grad.shape[1]))
    for c in range(point_grad.shape[1]):
        contrib = w_v * np.repeat(point_grad[:, c], d1)[valid]
        out[:, c] = np.bincount(rows_v, weights=contrib, minlength=num_vertices)
    return out


def convolve(values: np.ndarray, lat: SparseLattice, bank: FilterBank) -> np.ndarray:
    """Sparse one-ring convolution over the vertex set.

    out[v, co] = bias[co] + sum_k sum_ci weights[k, ci, co] * values[adj[v, k], ci]
    with absent neighbors contributing zero.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != lat.num_vertices:
        raise ShapeError(f"expected ({lat.num_vertices}, C) vertex features, got {values.shape}")
    k_taps = lat.adjacency.shape[1]
    if bank.taps != k_taps:
        raise ShapeError(f"filter has {bank.taps} taps, lattice one-ring has {k_taps}")
    if bank.c_in != values.shape[1]:
        raise ShapeError(f"filter expects C_in={bank.c_in}, features have {values.shape[1]}")
    out = np.tile(bank.bias, (lat.num_vertices, 1))
    for k in range(k_taps):
        out += _gather(values, lat.adjacency[:, k]) @ bank.weights[k]
    return out


def convolve_backward(
    saved_values: np.ndarray, lat: SparseLattice, bank: FilterBank, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of convolve w.r.t. (values, weights, bias).

    For a fixed tap, each vertex has at most one neighbor and distinct
    vertices have distinct neighbors, so the input-gradient scatter has no
    index collisions.
    """
    grad_values = np.zeros_like(saved_values)
    grad_weights = np.empty_like(bank.weights)
    for k in range(bank.taps):
        idx = lat.adjacency[:, k]
        valid = idx != MISSING
        gathered = _gather(saved_values, idx)
        grad_weights[k] = gathered.T @ grad_out
        back = grad_out @ bank.weights[k].T
        grad_values[idx[valid]] += back[valid]
    return grad_values, grad_weights, grad_out.sum(axis=0)


def _profile_convolve(values: np.ndarray, lat: SparseLattice, profile: np.ndarray) -> np.ndarray:
    # Single-channel, bias-free convolution with one scalar weight per tap.
    out = np.zeros_like(values)
    for k, wk in enumerate(profile):
        out += wk * _gather(values, lat.adjacency[:, k])
    return out


def _ones_pass(
    lat: SparseLattice, indices: np.ndarray, bary: np.ndarray, blur: np.ndarray | None
) -> np.ndarray:
    mass = splat(np.ones((lat.num_points, 1)), lat)
    if blur is not None:
        blur = np.asarray(blur, dtype=np.float64)
        if blur.shape != (lat.adjacency.shape[1],):
            raise ShapeError(
                f"blur profile must have {lat.adjacency.shape[1]} taps, got {blur.shape}"
            )
        mass = _profile_convolve(mass, lat, blur)
    return slice(mass, indices, bary)


def normalize(
    raw: np.ndarray,
    lat: SparseLattice,
    indices: np.ndarray,
    bary: np.ndarray,
    blur: np.ndarray | None = None,
) -> np.ndarray:
    """Divide raw sliced values by the ones-signal response of the lattice.

    blur is the fixed per-tap profile applied to the splatted ones before
    slicing; None skips the blur (pure splat->slice mass). Denominators are
    floored at NORM_EPS, so points with zero lattice support map to 0.
    """
    raw = np.asarray(raw, dtype=np.float64)
    denom = _ones_pass(lat, indices, bary, blur)
    return raw / np.maximum(denom, NORM_EPS)


@dataclass
class BCLDescriptor:
    """Reusable geometry of one BCL application.

    Captures the input-cloud lattice, the output-cloud embedding against it,
    and (when normalizing) the cached denominator, which depends only on the
    geometry. Build once per (cloud pair, scale); apply to any number of
    feature matrices / filter banks.
    """

    lattice: SparseLattice
    out_indices: np.ndarray
    out_bary: np.ndarray
    normalize: bool
    denominator: np.ndarray | None  # (m, 1), already floored

    @property
    def num_out(self) -> int:
        return self.out_indices.shape[0]


_DEFAULT_BLUR = "default"


def make_descriptor(
    features_in: np.ndarray,
    features_out: np.ndarray | None,
    config: LatticeConfig,
    normalize: bool = True,
    blur=_DEFAULT_BLUR,
) -> BCLDescriptor:
    """Build the lattice for the input cloud and embed the output cloud.

    features_out=None means "slice back onto the input points". blur selects
    the normalization profile: the default 1/0.5 one-ring profile, an
    explicit (K,) array, or None for no blur in the ones-pass.
    """
    lat = build_lattice(features_in, config)
    if features_out is None:
        out_idx, out_bary = lat.point_vertices, lat.point_bary
    else:
        features_out = np.asarray(features_out, dtype=np.float64)
        if features_out.ndim != 2 or features_out.shape[1] != config.dim:
            raise ShapeError(
                f"output features must be (m, {config.dim}), got {features_out.shape}"
            )
        out_idx, out_bary = lat.embed(features_out)
    denom = None
    if normalize:
        profile = default_blur_profile(lat.adjacency.shape[1]) if isinstance(blur, str) else blur
        denom = np.maximum(_ones_pass(lat, out_idx, out_bary, profile), NORM_EPS)
    return BCLDescriptor(lat, out_idx, out_bary, normalize, denom)


@dataclass
class BCLState:
    """Forward-pass residue needed by bcl_backward; release() drops it."""

    desc: BCLDescriptor
    bank: FilterBank
    splatted: np.ndarray | None

    def release(self) -> None:
        self.splatted = None


@dataclass
class GradientPair:
    grad_input: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def bcl_forward(
    values: np.ndarray, desc: BCLDescriptor, bank: FilterBank
) -> tuple[np.ndarray, BCLState]:
    """splat -> convolve -> slice (-> normalize), retaining backward state."""
    splatted = splat(values, desc.lattice)
    filtered = convolve(splatted, desc.lattice, bank)
    out = slice(filtered, desc.out_indices, desc.out_bary)
    if desc.normalize:
        out = out / desc.denominator
    return out, BCLState(desc, bank, splatted)


def bcl_backward(state: BCLState, grad_out: np.ndarray) -> GradientPair:
    """Exact gradients of bcl_forward w.r.t. input features, weights, bias.

    The normalization denominator is geometry-only, so it enters as a
    constant per-point factor.
    """
    if state.splatted is None:
        raise StateError("bcl_backward called without retained forward state")
    desc = state.desc
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[0] != desc.num_out:
        raise ShapeError(
            f"grad_out has {grad_out.shape[0]} rows, descriptor expects {desc.num_out}"
        )
    g = grad_out / desc.denominator if desc.normalize else grad_out
    g_filtered = slice_adjoint(g, desc.out_indices, desc.out_bary, desc.lattice.num_vertices)
    g_splat, g_w, g_b = convolve_backward(state.splatted, desc.lattice, state.bank, g_filtered)
    g_input = splat_adjoint(g_splat, desc.lattice)
    return GradientPair(g_input, g_w, g_b)


def bcl_apply(
    values: np.ndarray,
    features_in: np.ndarray,
    features_out: np.ndarray | None,
    config: LatticeConfig,
    bank: FilterBank,
    normalize: bool = True,
    blur=_DEFAULT_BLUR,
) -> np.ndarray:
    """One-shot BCL: build the descriptor, run forward, drop the state."""
    desc = make_descriptor(features_in, features_out, config, normalize, blur)
    out, state = bcl_forward(values, desc, bank)
    state.release()
    return out


def project(
    values: np.ndarray,
    features_src: np.ndarray,
    features_dst: np.ndarray,
    config: LatticeConfig,
) -> np.ndarray:
    """Transport point features between clouds: normalized splat-then-slice.

    No convolution is involved, and the ones-pass uses no blur either, so the
    numerator and denominator run through identical geometry: constant
    channels are reproduced exactly wherever the destination has lattice
    support, and unsupported destinations get 0.
    """
    values = np.asarray(values, dtype=np.float64)
    features_src = np.asarray(features_src, dtype=np.float64)
    if values.shape[0] != features_src.shape[0]:
        raise ShapeError(
            f"values rows {values.shape[0]} != source cloud rows {features_src.shape[0]}"
        )
    features_dst = np.asarray(features_dst, dtype=np.float64)
    if features_dst.ndim != 2 or features_dst.shape[1] != config.dim:
        raise InvalidInput(
            f"destination features must be (m, {config.dim}), got {features_dst.shape}"
        )
    lat = build_lattice(features_src, config)
    idx, bary = lat.embed(features_dst)
    num = slice(splat(values, lat), idx, bary)
    den = slice(splat(np.ones((lat.num_points, 1)), lat), idx, bary)
    return num / np.maximum(den, NORM_EPS)
