"""Global and patch-level VLAD descriptors over backbone feature maps.

A feature map is read as one local descriptor per spatial position. Residuals
against a learned codebook are aggregated per cluster (weighted by a learned
soft assignment), each cluster block is L2-normalized, the concatenation is
L2-normalized again, and an orthonormal projection takes the result down to
its final dimension. Patch descriptors run the identical pipeline over the
positions inside each square window of a dense grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .tensor import Tensor4, as_tensor4, softmax_rows


@dataclass(frozen=True)
class VladParams:
    """Codebook centers (K, D) plus the learned assignment map (scores = x @ W.T + b)."""

    centers: np.ndarray
    assign_weight: np.ndarray
    assign_bias: np.ndarray

    def __post_init__(self) -> None:
        if self.centers.ndim != 2:
            raise ShapeError(f"centers must be (K, D), got shape {self.centers.shape}")
        if self.assign_weight.shape != self.centers.shape:
            raise ShapeError(
                f"assignment weight shape {self.assign_weight.shape} must match centers {self.centers.shape}"
            )
        if self.assign_bias.shape != (self.centers.shape[0],):
            raise ShapeError(f"assignment bias must be (K,), got {self.assign_bias.shape}")
        for name in ("centers", "assign_weight", "assign_bias"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))

    @property
    def cluster_count(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def vlad_params_from_centers(centers: np.ndarray, alpha: float = 1.0) -> VladParams:
    """Assignment scores -alpha * ||x - c_k||^2 up to an x-only term, as in classic
    soft codebooks: W = 2*alpha*C, b_k = -alpha*||c_k||^2. Large alpha approaches
    nearest-center hard assignment."""
    centers = np.asarray(centers, dtype=np.float32)
    weight = (2.0 * alpha * centers.astype(np.float64)).astype(np.float32)
    bias = (-alpha * np.sum(centers.astype(np.float64) ** 2, axis=1)).astype(np.float32)
    return VladParams(centers=centers, assign_weight=weight, assign_bias=bias)


def random_vlad_params(dim: int, clusters: int, rng: np.random.Generator) -> VladParams:
    centers = rng.standard_normal((clusters, dim)).astype(np.float32)
    return VladParams(
        centers=centers,
        assign_weight=rng.standard_normal((clusters, dim)).astype(np.float32),
        assign_bias=rng.standard_normal(clusters).astype(np.float32),
    )


@dataclass(frozen=True)
class GlobalDescriptor:
    """Unit-norm descriptor vector; pca_applied records whether it was projected."""

    values: np.ndarray
    pca_applied: bool = False

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ShapeError(f"descriptor values must be rank 1, got shape {self.values.shape}")
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32))

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def soft_assign(x: np.ndarray, p: VladParams) -> np.ndarray:
    """Row-wise softmax over assignment scores; (N, D) descriptors -> (N, K) weights."""
    x = _as_descriptor_rows(x, p.dim)
    scores = x.astype(np.float64) @ p.assign_weight.astype(np.float64).T + p.assign_bias.astype(np.float64)
    return softmax_rows(scores)


def hard_assign(x: np.ndarray, p: VladParams) -> np.ndarray:
    """One-hot rows selecting each descriptor's nearest center (ties to the lowest index)."""
    x = _as_descriptor_rows(x, p.dim)
    xd = x.astype(np.float64)
    c = p.centers.astype(np.float64)
    d2 = np.sum(xd**2, axis=1, keepdims=True) - 2.0 * xd @ c.T + np.sum(c**2, axis=1)
    out = np.zeros((x.shape[0], p.cluster_count), dtype=np.float64)
    out[np.arange(x.shape[0]), np.argmin(d2, axis=1)] = 1.0
    return out


def vlad_raw(x: np.ndarray, assignments: np.ndarray, p: VladParams) -> np.ndarray:
    """Residual sums V[j, k] = sum_i a[i, k] * (x[i, j] - c[k, j]), shape (D, K)."""
    x = _as_descriptor_rows(x, p.dim)
    a = np.asarray(assignments, dtype=np.float64)
    if a.shape != (x.shape[0], p.cluster_count):
        raise ShapeError(f"assignments shape {a.shape} must be (N, K) = ({x.shape[0]}, {p.cluster_count})")
    xd = x.astype(np.float64)
    c = p.centers.astype(np.float64)
    return xd.T @ a - c.T * a.sum(axis=0)


def normalize_vlad(v: np.ndarray) -> np.ndarray:
    """L2-normalize each cluster column, then the flattened whole.

    All-zero columns stay zero rather than dividing by zero; an entirely zero
    matrix has no direction and is refused.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected a (D, K) matrix, got rank {v.ndim}")
    norms = np.sqrt((v**2).sum(axis=0))
    safe = np.where(norms > 0.0, norms, 1.0)
    v = v / safe
    flat = v.T.reshape(-1)  # cluster blocks contiguous
    total = float(np.sqrt(np.dot(flat, flat)))
    if total == 0.0:
        raise DegenerateInputError("aggregated descriptor is identically zero")
    return flat / total


def vlad_aggregate(x: np.ndarray, assignments: np.ndarray, p: VladParams) -> GlobalDescriptor:
    """Aggregate descriptors into a normalized (D*K,) VLAD vector."""
    flat = normalize_vlad(vlad_raw(x, assignments, p))
    return GlobalDescriptor(values=flat.astype(np.float32), pca_applied=False)


@dataclass(frozen=True)
class PcaModel:
    """Linear projection rows over mean-centered inputs; rows orthonormal unless whitened."""

    projection: np.ndarray
    mean: np.ndarray
    whitened: bool = False
    explained_variance: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.projection.ndim != 2:
            raise ShapeError(f"projection must be (out, in), got shape {self.projection.shape}")
        if self.mean.shape != (self.projection.shape[1],):
            raise ShapeError(f"mean shape {self.mean.shape} must be ({self.projection.shape[1]},)")
        object.__setattr__(self, "projection", np.ascontiguousarray(self.projection, dtype=np.float32))
        object.__setattr__(self, "mean", np.ascontiguousarray(self.mean, dtype=np.float32))
        if self.explained_variance is not None:
            object.__setattr__(
                self, "explained_variance", np.ascontiguousarray(self.explained_variance, dtype=np.float32)
            )

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]


def pca_fit(samples: np.ndarray, out_dim: int, whiten: bool = False) -> PcaModel:
    """Principal axes of the sample covariance, ordered by descending eigenvalue.

    Needs strictly more samples than out_dim. With whiten=True the rows are
    scaled by 1/sqrt(eigenvalue) and are no longer orthonormal.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be (N, D), got rank {samples.ndim}")
    n, d = samples.shape
    if out_dim < 1 or out_dim > d:
        raise ShapeError(f"out_dim must be in [1, {d}], got {out_dim}")
    if n <= out_dim:
        raise DegenerateInputError(f"need more than {out_dim} samples to fit {out_dim} components, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1][:out_dim]
    values = eigvals[order]
    rows = eigvecs[:, order].T
    if whiten:
        scale = 1.0 / np.sqrt(np.maximum(values, np.finfo(np.float64).tiny))
        rows = rows * scale[:, None]
    return PcaModel(
        projection=rows.astype(np.float32),
        mean=mean.astype(np.float32),
        whitened=whiten,
        explained_variance=values.astype(np.float32),
    )


def random_projection(in_dim: int, out_dim: int, rng: np.random.Generator) -> PcaModel:
    """Orthonormal rows from the QR of a seeded Gaussian; a stand-in when no
    fitted projection is available (zero mean, nothing whitened)."""
    if out_dim > in_dim:
        raise ShapeError(f"out_dim {out_dim} cannot exceed in_dim {in_dim}")
    q, r = np.linalg.qr(rng.standard_normal((in_dim, out_dim)))
    q = q * np.sign(np.diag(r))  # fix the sign convention so the draw is stable
    return PcaModel(projection=q.T.astype(np.float32), mean=np.zeros(in_dim, dtype=np.float32))


def _project_rows(rows: np.ndarray, m: PcaModel) -> np.ndarray:
    if rows.shape[1] != m.in_dim:
        raise ShapeError(f"vectors of dim {rows.shape[1]} do not match projection input dim {m.in_dim}")
    centered = rows.astype(np.float64) - m.mean.astype(np.float64)
    projected = centered @ m.projection.astype(np.float64).T
    norms = np.sqrt((projected**2).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInputError("projection collapsed an input to zero (input equals the mean?)")
    return projected / norms[:, None]


def pca_project(v: np.ndarray, m: PcaModel) -> np.ndarray:
    """Center, project, and L2-renormalize a single vector."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"pca_project expects a rank-1 vector, got rank {v.ndim}")
    return _project_rows(v[None, :], m)[0]


@dataclass(frozen=True)
class PatchGrid:
    """Dense grid of d_x by d_y windows over an (height, width) feature map at a fixed stride."""

    d_x: int
    d_y: int
    stride: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if min(self.d_x, self.d_y, self.stride) < 1:
            raise ShapeError("patch dims and stride must be >= 1")
        if self.d_y > self.height or self.d_x > self.width:
            raise ShapeError(
                f"patch {self.d_x}x{self.d_y} does not fit feature map {self.width}x{self.height}"
            )

    @property
    def rows(self) -> int:
        return (self.height - self.d_y) // self.stride + 1

    @property
    def cols(self) -> int:
        return (self.width - self.d_x) // self.stride + 1

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def centers(self) -> np.ndarray:
        """(count, 2) array of (x, y) patch centers in feature-map coordinates, row-major."""
        ys = np.arange(self.rows) * self.stride + (self.d_y - 1) / 2.0
        xs = np.arange(self.cols) * self.stride + (self.d_x - 1) / 2.0
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(np.float32)


def make_patch_grid(height: int, width: int, d_x: int, d_y: int, stride: int = 1) -> PatchGrid:
    return PatchGrid(d_x=d_x, d_y=d_y, stride=stride, height=height, width=width)


@dataclass(frozen=True)
class PatchDescriptorSet:
    """Per-patch unit-norm descriptors (count, dim) plus the grid that produced them."""

    descriptors: np.ndarray
    grid: PatchGrid

    def __post_init__(self) -> None:
        if self.descriptors.ndim != 2:
            raise ShapeError(f"patch descriptors must be (count, dim), got shape {self.descriptors.shape}")
        if self.descriptors.shape[0] != self.grid.count:
            raise ShapeError(
                f"descriptor count {self.descriptors.shape[0]} disagrees with grid count {self.grid.count}"
            )
        object.__setattr__(self, "descriptors", np.ascontiguousarray(self.descriptors, dtype=np.float32))

    @property
    def count(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def feature_map_descriptors(fmap: Tensor4) -> np.ndarray:
    """Read a (1, D, H, W) feature map as H*W local descriptors, row-major."""
    fmap = as_tensor4(fmap)
    if fmap.shape[0] != 1:
        raise ShapeError(f"expected batch size 1, got {fmap.shape[0]}")
    d = fmap.shape[1]
    return fmap[0].reshape(d, -1).T.copy()


def global_descriptor(fmap: Tensor4, vlad: VladParams, pca: Optional[PcaModel]) -> GlobalDescriptor:
    """Soft-assigned VLAD over every position, optionally projected."""
    x = feature_map_descriptors(fmap)
    desc = vlad_aggregate(x, soft_assign(x, vlad), vlad)
    if pca is None:
        return desc
    return GlobalDescriptor(values=pca_project(desc.values, pca).astype(np.float32), pca_applied=True)


def extract_patch_descriptors(
    fmap: Tensor4,
    grid: PatchGrid,
    vlad: VladParams,
    pca: Optional[PcaModel],
) -> PatchDescriptorSet:
    """One normalized VLAD descriptor per grid window.

    Assignment weights are computed once per position and reused by every
    window containing that position, so a window's descriptor equals
    vlad_aggregate run on exactly its own positions.
    """
    fmap = as_tensor4(fmap)
    _, d, h, w = fmap.shape
    if (grid.height, grid.width) != (h, w):
        raise ShapeError(f"grid was built for {grid.height}x{grid.width} but feature map is {h}x{w}")
    x = feature_map_descriptors(fmap)
    a = soft_assign(x, vlad)
    xd = x.astype(np.float64)
    ad = a.astype(np.float64)
    centers_t = vlad.centers.astype(np.float64).T

    raw = np.empty((grid.count, d * vlad.cluster_count), dtype=np.float64)
    idx = np.arange(h * w).reshape(h, w)
    p = 0
    for r in range(grid.rows):
        for c in range(grid.cols):
            sel = idx[r * grid.stride : r * grid.stride + grid.d_y, c * grid.stride : c * grid.stride + grid.d_x]
            sel = sel.reshape(-1)
            v = xd[sel].T @ ad[sel] - centers_t * ad[sel].sum(axis=0)
            norms = np.sqrt((v**2).sum(axis=0))
            v = v / np.where(norms > 0.0, norms, 1.0)
            raw[p] = v.T.reshape(-1)
            p += 1
    totals = np.sqrt((raw**2).sum(axis=1))
    if np.any(totals == 0.0):
        raise DegenerateInputError("a patch produced an identically zero descriptor")
    raw = raw / totals[:, None]
    if pca is not None:
        raw = _project_rows(raw, pca)
    return PatchDescriptorSet(descriptors=raw.astype(np.float32), grid=grid)


def triplet_loss(
    query: GlobalDescriptor, positive: GlobalDescriptor, negative: GlobalDescriptor, margin: float = 0.1
) -> float:
    """max(0, ||q - pos||^2 + margin - ||q - neg||^2)."""
    if not (query.dim == positive.dim == negative.dim):
        raise ShapeError(
            f"descriptor dims disagree: query {query.dim}, positive {positive.dim}, negative {negative.dim}"
        )
    if margin < 0:
        raise ShapeError(f"margin must be >= 0, got {margin}")
    q = query.values.astype(np.float64)
    dp = q - positive.values.astype(np.float64)
    dn = q - negative.values.astype(np.float64)
    return float(max(0.0, float(dp @ dp) + margin - float(dn @ dn)))


def _as_descriptor_rows(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"descriptors must be (N, D), got rank {x.ndim}")
    if x.shape[1] != dim:
        raise ShapeError(f"descriptor dim {x.shape[1]} does not match expected {dim}")
    if x.shape[0] < 1:
        raise ShapeError("need at least one descriptor")
    return x
