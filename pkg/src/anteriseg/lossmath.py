"""Loss functions with closed-form gradients for the contrastive and
supervised halves of the training recipe, plus a toy end-to-end trainer.

The contrastive loss is the normalized temperature-scaled cross entropy over
a batch of 2N embeddings where views of sample k sit at rows 2k and 2k+1:

    L(i,j) = -log( exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) )

with sim the dot product of L2-normalized vectors, averaged over all 2N
ordered positive pairs. Gradients treat the inputs as already normalized;
the normalization Jacobian can be chained in behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NORM_TOL = 1e-6


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; zero rows are rejected."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
        squeeze = True
    else:
        squeeze = False
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise ValidationError("cannot normalize a zero vector")
    out = a / norms[:, None]
    return out[0] if squeeze else out


@dataclass(frozen=True, eq=False, repr=False)
class EmbeddingBatch:
    """2N unit-norm embeddings; views of sample k at rows 2k and 2k+1."""

    vectors: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.vectors, dtype=np.float64)
        if a.ndim != 2:
            raise ValidationError(f"EmbeddingBatch: expected 2-d array, got {a.shape}")
        m, d = a.shape
        if m < 2 or m % 2 != 0:
            raise ValidationError(f"EmbeddingBatch: need an even row count >= 2, got {m}")
        if d < 1:
            raise ValidationError("EmbeddingBatch: empty embedding dimension")
        norms = np.linalg.norm(a, axis=1)
        off = np.abs(norms - 1.0)
        if off.max() > NORM_TOL:
            i = int(off.argmax())
            raise ValidationError(
                f"EmbeddingBatch: row {i} has norm {norms[i]:.8f}, expected 1 +/- {NORM_TOL}"
            )
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "vectors", a)

    @property
    def n_pairs(self) -> int:
        return self.vectors.shape[0] // 2

    def __repr__(self):
        return f"EmbeddingBatch(pairs={self.n_pairs}, dim={self.vectors.shape[1]})"


def nt_xent_loss(z: np.ndarray, tau: float = 0.5) -> float:
    """Loss only, on raw rows (no norm validation): usable as a finite-
    difference oracle target."""
    return _nt_xent_core(np.asarray(z, dtype=np.float64), tau)[0]


def _nt_xent_core(z: np.ndarray, tau: float) -> tuple:
    if tau <= 0:
        raise ValidationError(f"tau must be > 0, got {tau}")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise ValidationError(f"need a (2N, d) array with N >= 1, got {z.shape}")
    m = z.shape[0]
    s = (z @ z.T) / tau
    np.fill_diagonal(s, -np.inf)
    mx = s.max(axis=1, keepdims=True)
    e = np.exp(s - mx)
    denom = e.sum(axis=1)
    log_z = mx[:, 0] + np.log(denom)
    idx = np.arange(m)
    partner = idx ^ 1
    loss = float(np.mean(log_z - s[idx, partner]))

    p = e / denom[:, None]  # rows of softmax with the diagonal excluded
    g = p
    g[idx, partner] -= 1.0
    g /= m
    grad = (g @ z + g.T @ z) / tau
    return loss, grad


def nt_xent(
    batch,
    tau: float = 0.5,
    include_normalization_jacobian: bool = False,
) -> tuple:
    """(loss, gradient) of the contrastive loss over an EmbeddingBatch (or a
    raw (2N, d) array of unit rows).

    By default the gradient is taken with respect to the normalized
    embeddings themselves. With include_normalization_jacobian=True it is
    chained through z = v/||v|| evaluated at unit norm, i.e. projected onto
    the tangent plane of the unit sphere."""
    if isinstance(batch, EmbeddingBatch):
        z = batch.vectors.astype(np.float64)
    else:
        z = np.asarray(batch, dtype=np.float64)
    loss, grad = _nt_xent_core(z, tau)
    if include_normalization_jacobian:
        grad = grad - (grad * z).sum(axis=1, keepdims=True) * z
    return loss, grad


# ---------------------------------------------------------------------------
# Supervised side


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights w_c = N / (C * n_c)."""
    n = np.asarray(counts)
    if n.ndim != 1 or n.size < 1:
        raise ValidationError(f"counts must be a non-empty 1-d sequence, got shape {n.shape}")
    if not np.issubdtype(n.dtype, np.integer):
        if not np.all(np.equal(np.mod(n, 1), 0)):
            raise ValidationError("counts must be integers")
        n = n.astype(np.int64)
    if np.any(n <= 0):
        raise ValidationError("every class count must be positive")
    total = n.sum()
    return total / (n.size * n.astype(np.float64))


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> tuple:
    """(loss, grad wrt logits) of class-weighted softmax cross entropy.

    loss = mean_i w_{y_i} * (-log softmax(logits_i)[y_i]), softmax computed
    with max subtraction. Unit weights reduce to plain cross entropy."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"logits must be (n, C), got {x.shape}")
    n, c = x.shape
    if y.shape != (n,):
        raise ValidationError(f"labels must be ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError("labels must be integer class indices")
    if y.min() < 0 or y.max() >= c:
        raise ValidationError(f"labels must lie in 0..{c - 1}")
    if w.shape != (c,):
        raise ValidationError(f"weights must be ({c},), got {w.shape}")
    if np.any(w <= 0):
        raise ValidationError("class weights must be positive")
    if not np.all(np.isfinite(x)):
        raise ValidationError("logits must be finite")

    shift = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    wi = w[y]
    loss = float(np.mean(wi * (-logp[np.arange(n), y])))
    grad = np.exp(logp) * wi[:, None]
    grad[np.arange(n), y] -= wi
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# Toy trainer


def toy_contrastive_train(
    n_samples: int = 200,
    dim: int = 16,
    proj_dim: int = 8,
    epochs: int = 10,
    lr: float = 1e-2,
    tau: float = 0.5,
    seed: int = 0,
    n_clusters: int = 4,
    batch_size: int = 32,
) -> dict:
    """Train a linear projection on clustered synthetic vectors with the
    contrastive loss over jittered view pairs.

    Views and batch order are drawn once up front, so lr=0 yields an
    identical loss every epoch. Returns the per-epoch mean loss trace and
    the final projection."""
    if epochs < 1 or n_samples < 2:
        raise ValidationError("need epochs >= 1 and n_samples >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(0.0, 1.0, size=(n_clusters, dim))
    assign = rng.integers(0, n_clusters, size=n_samples)
    feats = centers[assign] + 0.10 * rng.normal(size=(n_samples, dim))
    view_a = feats + 0.05 * rng.normal(size=feats.shape)
    view_b = feats + 0.05 * rng.normal(size=feats.shape)
    order = rng.permutation(n_samples)
    w = 0.1 * rng.normal(size=(proj_dim, dim))

    batches = [order[i : i + batch_size] for i in range(0, n_samples, batch_size)]
    batches = [b for b in batches if len(b) >= 1]
    trace = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for b in batches:
            u = np.empty((2 * len(b), dim))
            u[0::2] = view_a[b]
            u[1::2] = view_b[b]
            proj = u @ w.T
            norms = np.linalg.norm(proj, axis=1, keepdims=True)
            norms = np.where(norms == 0, 1.0, norms)
            z = proj / norms
            loss, gz = _nt_xent_core(z, tau)
            gproj = (gz - (gz * z).sum(axis=1, keepdims=True) * z) / norms
            gw = gproj.T @ u
            w = w - lr * gw
            total += loss * len(b)
            count += len(b)
        trace.append(total / count)
    return {"loss_trace": trace, "projection": w}
