"""Per-layer margin signatures of a trained classifier.

For every layer ``l`` (input ``0`` through output ``L+1``) the first-order
distance of each training point to the decision boundary is

    d = y f(x) / ((||df/dx^l|| + eps) * (sqrt(nu_l) + eps))

where ``nu_l`` is the total variation of the layer-``l`` activations over
the training set. Distances are squashed with ``lam * tanh(d / lam)`` and
summarised by their 5/25/50/75/95th percentiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gengap import tinynet

EPSILON = 1e-6
PERCENTILES = (5, 25, 50, 75, 95)
PERCENTILE_METHOD = "linear"


@dataclass(frozen=True)
class SignatureMatrix:
    """Rows ``theta_0 .. theta_{L+1}``, each the five percentiles of one layer."""

    rows: np.ndarray  # (L + 2, 5)
    lam: float

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64, copy=True)
        if rows.ndim != 2 or rows.shape[1] != len(PERCENTILES) or rows.shape[0] < 1:
            raise ValueError(f"signature must have shape (rows, 5), got {rows.shape}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def depth(self) -> int:
        return self.rows.shape[0] - 2

    def __len__(self) -> int:
        return self.rows.shape[0]

    def to_list(self) -> list[list[float]]:
        return self.rows.tolist()

    @classmethod
    def from_list(cls, rows, lam: float) -> "SignatureMatrix":
        return cls(np.asarray(rows, dtype=np.float64), lam)


def layer_distance(f_out, y, grad_norm, total_variation, lam: float):
    """Squashed, normalised first-order margin. Works on scalars or arrays."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    grad_norm = np.asarray(grad_norm, dtype=np.float64)
    total_variation = np.asarray(total_variation, dtype=np.float64)
    if np.any(grad_norm < 0) or np.any(total_variation < 0):
        raise ValueError("grad_norm and total_variation must be non-negative")
    scale = lam * (grad_norm + EPSILON) * (np.sqrt(total_variation) + EPSILON)
    with np.errstate(over="ignore"):
        out = lam * np.tanh(np.asarray(y, dtype=np.float64) * np.asarray(f_out) / scale)
    return float(out) if out.ndim == 0 else out


def total_variation(activations) -> float:
    """Sum over coordinates of the population variance across the set."""
    a = np.asarray(activations, dtype=np.float64)
    if a.size == 0 or a.shape[0] == 0:
        raise ValueError("total variation of an empty set is undefined")
    if a.ndim == 1:
        a = a[:, None]
    return float(np.sum(np.var(a, axis=0)))


def percentiles(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("percentiles of an empty list are undefined")
    return np.percentile(v, PERCENTILES, method=PERCENTILE_METHOD)


def layer_distances(net: tinynet.Network, X: np.ndarray, y: np.ndarray,
                    lam: float) -> list[np.ndarray]:
    """Per-point squashed distances for every layer, in layer order."""
    if not net.is_finite():
        raise tinynet.DivergedError("cannot extract margins from a diverged network")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("need at least one training point")
    trace = tinynet.forward(net, X, "inference")
    grads = tinynet.all_activation_grads(net, trace)
    f = trace.output
    out = []
    for act, grad in zip(trace.activations, grads):
        norms = np.linalg.norm(grad, axis=1)
        out.append(layer_distance(f, y, norms, total_variation(act), lam))
    return out


def extract_signature(net: tinynet.Network, X: np.ndarray, y: np.ndarray,
                      lam: float) -> SignatureMatrix:
    rows = [percentiles(d) for d in layer_distances(net, X, y, lam)]
    return SignatureMatrix(np.vstack(rows), lam)
