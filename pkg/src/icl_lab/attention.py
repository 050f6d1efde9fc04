"""Masked, reparameterized one-layer softmax attention.

The key-query product is collapsed into a single ``d x d`` matrix ``Q`` and
the value head reads only the label row with weight 1, so the prediction for
the query column is a softmax-weighted average of the in-context labels.
Restricted to the feature span, ``Q`` is summarised by the ``K x K`` matrix
``M[n, k] = v_n^T Q v_k``: ``M[k, k]`` is the self weight ``A_k`` and
``M[n, k]`` (``n != k``) the cross weight ``B_{k,n}`` seen by a query on
feature ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icl_lab.errors import DimensionError, InvalidPromptError, MissingTaskError, NumericError
from icl_lab.features import FeatureBasis, Prompt, PromptCounts


@dataclass
class ReducedWeights:
    """Bilinear attention weights ``M[n, k] = v_n^T Q v_k``."""

    M: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        if self.M.ndim != 2 or self.M.shape[0] != self.M.shape[1]:
            raise DimensionError("reduced weights must be square")

    @classmethod
    def zeros(cls, K: int) -> "ReducedWeights":
        return cls(np.zeros((K, K)))

    @property
    def K(self) -> int:
        return self.M.shape[0]

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.M).copy()

    @property
    def B(self) -> np.ndarray:
        """``B[k, n] = B_{k,n}``; the diagonal is zero."""
        B = self.M.T.copy()
        np.fill_diagonal(B, 0.0)
        return B

    def a(self, k: int) -> float:
        return float(self.M[k, k])

    def b(self, k: int, n: int) -> float:
        if k == n:
            raise IndexError("B_{k,n} needs n != k")
        return float(self.M[n, k])


def as_matrix(M) -> np.ndarray:
    return M.M if isinstance(M, ReducedWeights) else np.asarray(M, dtype=float)


@dataclass
class AttentionProfile:
    """Per-feature attention ``Attn_1..Attn_K`` for a query on feature ``query``."""

    scores: np.ndarray
    query: int
    token_scores: np.ndarray | None = None


def embed(prompt: Prompt, basis: FeatureBasis) -> np.ndarray:
    """Stack tokens over labels; the query column carries a zero label."""
    if prompt.w is None:
        raise MissingTaskError("embedding needs a task vector w")
    if prompt.w.shape != (basis.d,):
        raise DimensionError(f"w must have length d={basis.d}")
    X = basis.V[:, np.append(prompt.tokens, prompt.query)]
    y = prompt.w @ X
    y[-1] = 0.0
    return np.vstack([X, y])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def token_scores(E: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Attention of the query column over the N (masked) prompt columns."""
    d = E.shape[0] - 1
    if Q.shape != (d, d):
        raise DimensionError(f"Q must be {d}x{d}, got {Q.shape}")
    Ex = E[:d]
    with np.errstate(invalid="ignore", over="ignore"):
        logits = Ex[:, :-1].T @ (Q @ Ex[:, -1])
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite attention logits")
    return softmax(logits)


def forward(E: np.ndarray, Q: np.ndarray) -> float:
    """Prediction for the query column of embedding ``E``."""
    attn = token_scores(E, Q)
    return float(E[-1, :-1] @ attn)


def profile_batch(counts: np.ndarray, k: int, M: np.ndarray) -> np.ndarray:
    """Feature attention for many count vectors at once, shape ``(S, K)``.

    Logits are ``log n_m + M[m, k]`` with the row maximum subtracted; features
    with ``n_m = 0`` get exactly zero attention.
    """
    n = np.asarray(counts, dtype=float)
    col = M[:, k]
    # fast path: one shift per column; rows that underflow are redone in log space
    W = n * np.exp(col - col.max())
    Z = W.sum(axis=-1, keepdims=True)
    bad = ~(Z[..., 0] > 1e-280)
    if np.any(bad):
        nb = n[bad]
        with np.errstate(divide="ignore"):
            lg = np.log(nb) + col
        lg = lg - lg.max(axis=-1, keepdims=True)
        Wb = np.exp(lg)
        W[bad] = Wb
        Z[bad] = Wb.sum(axis=-1, keepdims=True)
    return W / Z


def attention_profile(counts: PromptCounts, query_k: int, M) -> AttentionProfile:
    n = counts.n if isinstance(counts, PromptCounts) else np.asarray(counts)
    if n.sum() <= 0:
        raise InvalidPromptError("prompt has no tokens")
    M = as_matrix(M)
    if not np.all(np.isfinite(M[:, query_k])):
        raise NumericError("non-finite attention weights")
    return AttentionProfile(profile_batch(n[None, :], query_k, M)[0], query_k)


def predict_from_profile(profile: AttentionProfile, w: np.ndarray, basis: FeatureBasis) -> float:
    return float(profile.scores @ (basis.V.T @ np.asarray(w, dtype=float)))


def reduce(Q: np.ndarray, basis: FeatureBasis) -> ReducedWeights:
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (basis.d, basis.d):
        raise DimensionError(f"Q must be {basis.d}x{basis.d}")
    return ReducedWeights(basis.V.T @ Q @ basis.V)


def lift(M, basis: FeatureBasis) -> np.ndarray:
    """The matrix ``Q = V M V^T`` living in the feature span."""
    return basis.V @ as_matrix(M) @ basis.V.T
