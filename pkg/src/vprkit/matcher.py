"""Patch matching: attention enhancement, similarity scores, optimal transport.

Query and candidate patch descriptors pass through alternating self- and
cross-attention rounds, inner products of the enhanced descriptors form the
score matrix (deliberately left un-normalized), and entropy-regularized
optimal transport with a dustbin row/column turns scores into a soft
assignment. Everything here runs in float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .errors import EmptyGroundTruthWarning, ShapeError

Normalization = Literal["per_destination", "global"]


@dataclass(frozen=True)
class AttentionLayer:
    """One attention round: key/query maps w_f, w_g (key_dim, dim), value map w_h (dim, dim)."""

    w_f: np.ndarray
    w_g: np.ndarray
    w_h: np.ndarray
    mode: Literal["self", "cross"]

    def __post_init__(self) -> None:
        if self.w_f.ndim != 2 or self.w_g.shape != self.w_f.shape:
            raise ShapeError(f"w_f and w_g must share shape (key_dim, dim), got {self.w_f.shape} and {self.w_g.shape}")
        dim = self.w_f.shape[1]
        if self.w_h.shape != (dim, dim):
            raise ShapeError(f"w_h must be ({dim}, {dim}), got {self.w_h.shape}")
        if self.mode not in ("self", "cross"):
            raise ShapeError(f"mode must be 'self' or 'cross', got {self.mode!r}")
        for name in ("w_f", "w_g", "w_h"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))

    @property
    def dim(self) -> int:
        return self.w_f.shape[1]


@dataclass(frozen=True)
class MatcherParams:
    """The attention stack plus the learnable dustbin score."""

    layers: tuple[AttentionLayer, ...]
    dustbin_score: float = 1.0

    def __post_init__(self) -> None:
        dims = {layer.dim for layer in self.layers}
        if len(dims) > 1:
            raise ShapeError(f"attention layers disagree on descriptor dim: {sorted(dims)}")
        if not np.isfinite(self.dustbin_score):
            raise ShapeError("dustbin score must be finite")

    @property
    def dim(self) -> Optional[int]:
        return self.layers[0].dim if self.layers else None


def random_matcher_params(
    dim: int,
    rng: np.random.Generator,
    key_dim: Optional[int] = None,
    rounds: int = 2,
    dustbin_score: float = 0.9,
) -> MatcherParams:
    """rounds alternating (self, cross) layers with Gaussian key weights scaled by
    1/sqrt(dim). Message weights get an extra 0.1 gain so the residual updates
    perturb rather than swamp the unit-norm inputs; score matrices then stay at
    inner-product scale and the default dustbin sits inside their range."""
    if rounds < 0:
        raise ShapeError(f"rounds must be >= 0, got {rounds}")
    kd = key_dim or dim
    scale = 1.0 / np.sqrt(dim)
    message_scale = 0.1 * scale
    layers = []
    for _ in range(rounds):
        for mode in ("self", "cross"):
            layers.append(
                AttentionLayer(
                    w_f=(rng.standard_normal((kd, dim)) * scale).astype(np.float32),
                    w_g=(rng.standard_normal((kd, dim)) * scale).astype(np.float32),
                    w_h=(rng.standard_normal((dim, dim)) * message_scale).astype(np.float32),
                    mode=mode,
                )
            )
    return MatcherParams(layers=tuple(layers), dustbin_score=dustbin_score)


def attention_forward(
    x_src: np.ndarray,
    x_dst: np.ndarray,
    layer: AttentionLayer,
    normalization: Normalization = "per_destination",
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate source descriptors into each destination.

    Logits are f(src_i) . g(dst_j). With per-destination normalization (the
    default) the weights into each destination form a softmax over sources, so
    every column of the returned (N_src, N_dst) map sums to 1; "global"
    normalizes by the sum over all pairs instead. The enhanced output is
    x_dst[j] + sum_i rho[i, j] * w_h @ x_src[i].
    """
    xs = _as_rows(x_src, layer.dim, "source")
    xd = _as_rows(x_dst, layer.dim, "destination")
    f = xs @ layer.w_f.astype(np.float64).T
    g = xd @ layer.w_g.astype(np.float64).T
    logits = f @ g.T  # (N_src, N_dst)
    if normalization == "per_destination":
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        rho = e / e.sum(axis=0, keepdims=True)
    elif normalization == "global":
        e = np.exp(logits - logits.max())
        rho = e / e.sum()
    else:
        raise ShapeError(f"unknown normalization {normalization!r}")
    values = xs @ layer.w_h.astype(np.float64).T
    out = xd + rho.T @ values
    return out, rho


def enhance_descriptors(
    q: np.ndarray,
    d: np.ndarray,
    params: MatcherParams,
    normalization: Normalization = "per_destination",
) -> tuple[np.ndarray, np.ndarray]:
    """Run the attention stack over both descriptor sets.

    Self layers update each set from itself; cross layers update both sets
    symmetrically from the other, using the same weights for both directions.
    """
    yq = np.asarray(q, dtype=np.float64)
    yd = np.asarray(d, dtype=np.float64)
    for layer in params.layers:
        if layer.mode == "self":
            yq, _ = attention_forward(yq, yq, layer, normalization)
            yd, _ = attention_forward(yd, yd, layer, normalization)
        else:
            new_q, _ = attention_forward(yd, yq, layer, normalization)
            new_d, _ = attention_forward(yq, yd, layer, normalization)
            yq, yd = new_q, new_d
    return yq, yd


def score_matrix(yq: np.ndarray, yd: np.ndarray) -> np.ndarray:
    """Pairwise inner products, (M, N). No re-normalization on purpose: the
    transport layer consumes raw similarities."""
    yq = np.asarray(yq, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    if yq.ndim != 2 or yd.ndim != 2 or yq.shape[1] != yd.shape[1]:
        raise ShapeError(f"descriptor sets disagree: {yq.shape} vs {yd.shape}")
    return yq @ yd.T


@dataclass(frozen=True)
class AssignmentMatrix:
    """Dustbin-augmented transport plan, (M+1, N+1), with iteration metadata."""

    z: np.ndarray
    iterations: int
    converged: bool

    @property
    def interior(self) -> np.ndarray:
        return self.z[:-1, :-1]


def _augment(scores: np.ndarray, dustbin_score: float) -> np.ndarray:
    m, n = scores.shape
    out = np.full((m + 1, n + 1), float(dustbin_score), dtype=np.float64)
    out[:m, :n] = scores
    return out


def _log_marginals(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    # Each patch carries unit mass; the dustbin absorbs the other side's total.
    row = np.zeros(m + 1)
    row[m] = np.log(n)
    col = np.zeros(n + 1)
    col[n] = np.log(m)
    return row, col


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - hi).sum(axis=axis, keepdims=True)) + hi
    return np.squeeze(out, axis=axis)


def sinkhorn_assign(
    scores: np.ndarray,
    dustbin_score: float,
    reg: float = 1.0,
    tol: float = 1e-6,
    max_iters: int = 100,
) -> AssignmentMatrix:
    """Entropy-regularized transport of scores to a soft assignment.

    The score matrix is augmented with a dustbin row and column pinned at a
    single scalar score. Target marginals are 1 for every real row/column, N
    for the dustbin row and M for the dustbin column. Iterations run in the
    log domain; convergence means the worst marginal violation is within tol.
    tol=0 disables the early exit and always runs max_iters iterations.
    Non-convergence is reported through the flag, never raised.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or 0 in scores.shape:
        raise ShapeError(f"scores must be a non-empty (M, N) matrix, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)) or not np.isfinite(dustbin_score):
        raise ShapeError("scores and dustbin score must be finite")
    if reg <= 0:
        raise ShapeError(f"regularization must be > 0, got {reg}")
    if max_iters < 1:
        raise ShapeError(f"max_iters must be >= 1, got {max_iters}")

    m, n = scores.shape
    s = _augment(scores, dustbin_score) / reg
    log_r, log_c = _log_marginals(m, n)
    log_u = np.zeros(m + 1)
    log_v = np.zeros(n + 1)

    iterations = 0
    converged = False
    for _ in range(max_iters):
        log_u = log_r - _logsumexp(s + log_v[None, :], axis=1)
        log_v = log_c - _logsumexp(s + log_u[:, None], axis=0)
        iterations += 1
        if tol > 0:
            z = np.exp(s + log_u[:, None] + log_v[None, :])
            err_r = np.abs(z.sum(axis=1) - np.exp(log_r)).max()
            err_c = np.abs(z.sum(axis=0) - np.exp(log_c)).max()
            if max(err_r, err_c) <= tol:
                converged = True
                break
    z = np.exp(s + log_u[:, None] + log_v[None, :])
    return AssignmentMatrix(z=z, iterations=iterations, converged=converged)


def match_score(assignment: AssignmentMatrix) -> float:
    """Interior transport mass over min(M, N); 1 means everything matched."""
    interior = assignment.interior
    return float(interior.sum() / min(interior.shape))


@dataclass(frozen=True)
class GroundTruthMatches:
    """Index pairs (query_patch, candidate_patch) known to correspond."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        seen = set()
        for pair in self.pairs:
            if len(pair) != 2 or pair[0] < 0 or pair[1] < 0:
                raise ShapeError(f"ground-truth pairs must be non-negative index 2-tuples, got {pair!r}")
            if pair in seen:
                raise ShapeError(f"duplicate ground-truth pair {pair!r}")
            seen.add(pair)

    def __len__(self) -> int:
        return len(self.pairs)


def _check_pairs_in(pairs: Iterable[tuple[int, int]], m: int, n: int) -> None:
    for i, j in pairs:
        if i >= m or j >= n:
            raise ShapeError(f"ground-truth pair ({i}, {j}) is outside the {m}x{n} interior")


_Z_FLOOR = 1e-12


def nll_loss(assignment: AssignmentMatrix, matches: GroundTruthMatches) -> float:
    """Negative log-likelihood of the interior assignment over the ground-truth pairs.

    Probabilities are clamped at 1e-12 before the log. An empty match set
    yields 0.0 and raises EmptyGroundTruthWarning.
    """
    if len(matches) == 0:
        warnings.warn("ground-truth match set is empty; loss is 0", EmptyGroundTruthWarning, stacklevel=2)
        return 0.0
    interior = assignment.interior
    _check_pairs_in(matches.pairs, *interior.shape)
    rows = [i for i, _ in matches.pairs]
    cols = [j for _, j in matches.pairs]
    probs = np.maximum(interior[rows, cols], _Z_FLOOR)
    return float(-np.log(probs).sum())


def nll_loss_from_scores(
    scores: np.ndarray,
    matches: GroundTruthMatches,
    dustbin_score: float,
    reg: float = 1.0,
    iters: int = 100,
) -> float:
    """Fixed-iteration forward used for gradient work; no early stopping, so the
    value is a smooth function of the scores."""
    assignment = sinkhorn_assign(scores, dustbin_score, reg=reg, tol=0.0, max_iters=iters)
    return nll_loss(assignment, matches)


def loss_gradient(
    scores: np.ndarray,
    matches: GroundTruthMatches,
    dustbin_score: float,
    reg: float = 1.0,
    iters: int = 100,
) -> np.ndarray:
    """d(nll_loss_from_scores)/d(scores), by reverse-mode through the unrolled iterations.

    Returns an (M, N) array covering the interior scores; sensitivity to the
    dustbin scalar is not included.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(matches) == 0:
        warnings.warn("ground-truth match set is empty; gradient is 0", EmptyGroundTruthWarning, stacklevel=2)
        return np.zeros_like(scores)
    m, n = scores.shape
    _check_pairs_in(matches.pairs, m, n)
    s = _augment(scores, dustbin_score) / reg
    log_r, log_c = _log_marginals(m, n)

    # Forward, keeping the per-iteration duals for the reverse sweep.
    log_u = np.zeros(m + 1)
    log_v = np.zeros(n + 1)
    us = [log_u]
    vs = [log_v]
    for _ in range(iters):
        log_u = log_r - _logsumexp(s + vs[-1][None, :], axis=1)
        log_v = log_c - _logsumexp(s + log_u[:, None], axis=0)
        us.append(log_u)
        vs.append(log_v)

    log_z = s + us[-1][:, None] + vs[-1][None, :]
    g_logz = np.zeros((m + 1, n + 1))
    floor = np.log(_Z_FLOOR)
    for i, j in matches.pairs:
        if log_z[i, j] > floor:  # clamped entries contribute zero gradient
            g_logz[i, j] = -1.0
    g_s = g_logz.copy()
    g_u = g_logz.sum(axis=1)
    g_v = g_logz.sum(axis=0)

    for t in range(iters, 0, -1):
        # log_v[t] = log_c - logsumexp_i(s + log_u[t]); softmax over axis 0.
        a = s + us[t][:, None]
        a = np.exp(a - _logsumexp(a, axis=0)[None, :])
        contrib = -a * g_v[None, :]
        g_s += contrib
        g_u += contrib.sum(axis=1)
        g_v = np.zeros(n + 1)
        # log_u[t] = log_r - logsumexp_j(s + log_v[t-1]); softmax over axis 1.
        b = s + vs[t - 1][None, :]
        b = np.exp(b - _logsumexp(b, axis=1)[:, None])
        contrib = -b * g_u[:, None]
        g_s += contrib
        g_v += contrib.sum(axis=0)
        g_u = np.zeros(m + 1)

    return g_s[:m, :n] / reg


def match_pair(
    q_patches: np.ndarray,
    d_patches: np.ndarray,
    params: MatcherParams,
    reg: float = 1.0,
    tol: float = 1e-6,
    max_iters: int = 100,
    normalization: Normalization = "per_destination",
) -> float:
    """Enhance, score, transport, and summarize one query/candidate pair."""
    yq, yd = enhance_descriptors(q_patches, d_patches, params, normalization)
    assignment = sinkhorn_assign(score_matrix(yq, yd), params.dustbin_score, reg=reg, tol=tol, max_iters=max_iters)
    return match_score(assignment)


def _as_rows(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} descriptors must be (N, {dim}), got shape {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError(f"{what} descriptor set is empty")
    return x
