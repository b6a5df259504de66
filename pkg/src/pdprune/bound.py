"""First-order bound on the change of single-query attention output.

For ``A = softmax(q K^T / sqrt(d)) V`` and perturbed inputs the output error
``E`` obeys, to first order,

    ||E||_F <= L / sqrt(d) * (||dq||_2 ||K||_F + ||q||_2 ||dK||_F) * ||V||_F + ||dV||_F

where ``L`` is a Lipschitz constant of softmax. ``L = 1`` is conservative:
the softmax Jacobian has spectral norm at most 1/2, which leaves room for the
neglected second-order term at small perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import softmax


@dataclass
class PerturbationCase:
    q: np.ndarray      # [1, d]
    dq: np.ndarray
    K: np.ndarray      # [N, d]
    dK: np.ndarray
    V: np.ndarray      # [N, d_v]
    dV: np.ndarray
    d: int | None = None
    lipschitz: float = 1.0

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        self.dq = np.atleast_2d(np.asarray(self.dq, dtype=np.float64))
        for name in ("K", "dK", "V", "dV"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.d is None:
            self.d = self.q.shape[-1]
        if self.q.shape != self.dq.shape or self.K.shape != self.dK.shape or self.V.shape != self.dV.shape:
            raise ValueError("perturbations must match their base tensors in shape")
        if self.K.shape[0] != self.V.shape[0]:
            raise ValueError("K and V must hold the same number of entries")


def attention_output(q, K, V, d: int) -> np.ndarray:
    return softmax(q @ K.T / np.sqrt(d)) @ V


def error_bound(case: PerturbationCase) -> tuple[float, float]:
    """(empirical ||E||_F, first-order bound) for one perturbation case."""
    if case.d <= 0:
        raise ValueError(f"d must be positive, got {case.d}")
    base = attention_output(case.q, case.K, case.V, case.d)
    pert = attention_output(case.q + case.dq, case.K + case.dK, case.V + case.dV, case.d)
    err = float(np.linalg.norm(pert - base))
    spectral = lambda m: float(np.linalg.norm(m, 2))   # noqa: E731
    fro = lambda m: float(np.linalg.norm(m))       # noqa: E731
    bound = (case.lipschitz / np.sqrt(case.d)
             * (spectral(case.dq) * fro(case.K) + spectral(case.q) * fro(case.dK)) * fro(case.V)
             + fro(case.dV))
    return err, float(bound)


def random_case(rng: np.random.Generator, N: int = 16, d: int = 8, d_v: int | None = None,
                scale: float = 1e-3) -> PerturbationCase:
    """Gaussian base tensors with perturbations of relative size ``scale``."""
    d_v = d if d_v is None else d_v
    q, K, V = rng.standard_normal((1, d)), rng.standard_normal((N, d)), rng.standard_normal((N, d_v))
    return PerturbationCase(q, scale * rng.standard_normal(q.shape), K, scale * rng.standard_normal(K.shape),
                            V, scale * rng.standard_normal(V.shape))


def case_from_projections(x_t, X, W_q, W_k, W_v, dx_t=None, dX=None, dW_q=None, dW_k=None,
                          dW_v=None) -> PerturbationCase:
    """Case built from the current token ``x_t``, context ``X`` and projection weights.

    Keys and values cover the context followed by the current token.
    """
    x_t = np.atleast_2d(x_t)
    z = lambda a, like: np.zeros_like(like) if a is None else np.atleast_2d(a)  # noqa: E731
    dx_t, dX = z(dx_t, x_t), z(dX, X)
    dW_q, dW_k, dW_v = z(dW_q, W_q), z(dW_k, W_k), z(dW_v, W_v)
    ctx = np.vstack([X, x_t])
    ctx2 = np.vstack([X + dX, x_t + dx_t])
    q, K, V = x_t @ W_q, ctx @ W_k, ctx @ W_v
    return PerturbationCase(q, (x_t + dx_t) @ (W_q + dW_q) - q, K, ctx2 @ (W_k + dW_k) - K,
                            V, ctx2 @ (W_v + dW_v) - V, d=W_q.shape[1])
