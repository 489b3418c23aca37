"""Dense kernels, the global precision switch, seeded randomness and gradient checking.

Matrices are plain 2-D numpy arrays; the model itself runs on torch tensors and
uses :func:`causal_softmax_torch` for its attention rows.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np
import torch

from .errors import NumericError, ShapeError

_PRECISION = {32: (np.float32, torch.float32), 64: (np.float64, torch.float64)}
_bits = 64


def set_precision(bits: int) -> None:
    """Switch the package-wide float width (64 for analysis/tests, 32 allowed for training)."""
    global _bits
    if bits not in _PRECISION:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _bits = bits


def precision() -> int:
    return _bits


def np_dtype(bits: int | None = None):
    return _PRECISION[bits or _bits][0]


def torch_dtype(bits: int | None = None) -> torch.dtype:
    return _PRECISION[bits or _bits][1]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with shape validation.

    Backed by BLAS, which gives a fixed per-cell accumulation order for a given
    shape on a given machine.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    _check_finite(out, "matmul result")
    return out


def masked_row_softmax(scores: np.ndarray, causal: bool = False) -> np.ndarray:
    """Row-wise softmax; with ``causal`` every entry above the diagonal is exactly zero."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ShapeError(f"expected a 2-D score matrix, got shape {scores.shape}")
    _check_finite(scores, "softmax input")
    if causal:
        n, m = scores.shape
        if n != m:
            raise ShapeError(f"causal softmax needs a square matrix, got {scores.shape}")
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def causal_softmax_torch(scores: torch.Tensor) -> torch.Tensor:
    """Causal softmax over the last axis of ``(..., N, N)`` attention scores."""
    n = scores.shape[-1]
    mask = torch.ones(n, n, dtype=torch.bool, device=scores.device).triu(1)
    return torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)


class RngStream:
    """Seeded random stream on numpy's Philox4x64 counter-based generator.

    Philox output depends only on (key, counter), so a given seed yields the
    same draws on every platform. ``child(label)`` derives an independent
    stream whose key mixes the parent seed with a hash of the label.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, label: str) -> "RngStream":
        digest = hashlib.blake2b(f"{self.seed}:{label}".encode(), digest_size=8).digest()
        return RngStream(int.from_bytes(digest, "little"))

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)

    def shuffle(self, x) -> None:
        self.gen.shuffle(x)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm!r})"


def finite_diff_gradcheck(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    epsilon: float = 1e-5,
    max_coords: int = 256,
    rng: RngStream | None = None,
) -> float:
    """Compare an analytic gradient with central differences.

    ``loss_fn(p)`` returns ``(loss, grad)``. At most ``max_coords`` coordinates
    are sampled. Returns the max over sampled coordinates of
    ``|g - fd| / (|g| + |fd| + 1e-8)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    p = np.array(params, dtype=np.float64).ravel()
    loss0, grad = loss_fn(p.copy())
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the base point")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != p.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {p.shape}")

    if p.size <= max_coords:
        coords = np.arange(p.size)
    else:
        rng = rng or RngStream(0)
        coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))

    worst = 0.0
    for i in coords:
        orig = p[i]
        p[i] = orig + epsilon
        up, _ = loss_fn(p.copy())
        p[i] = orig - epsilon
        down, _ = loss_fn(p.copy())
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is not finite around coordinate {i}")
        fd = (up - down) / (2 * epsilon)
        rel = abs(grad[i] - fd) / (abs(grad[i]) + abs(fd) + 1e-8)
        worst = max(worst, rel)
    return float(worst)
