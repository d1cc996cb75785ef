"""Token (Re)Distribution: how much each input token feeds an intermediate token.

For block ``b`` and token ``i`` the scalar ``s = sum_k Z_b[i, k]`` is
differentiated (one vector-Jacobian product with a ones vector) with respect to
the token embedding taken *before* the positional encoding is added. The
per-input-token sensitivity is ``|sum_k ds/dX[j, k]|``; stacking these for every
``i`` gives the ``n x n`` matrix ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError
from .fields import GridField
from .model import SRViT, blocks_backward, encode, partition


@dataclass(frozen=True)
class TokenSelector:
    row: int
    col: int

    @classmethod
    def from_index(cls, index: int, grid: tuple[int, int]) -> "TokenSelector":
        if not 0 <= index < grid[0] * grid[1]:
            raise ConfigurationError(f"token {index} outside a {grid[0]}x{grid[1]} grid")
        return cls(*divmod(index, grid[1]))

    def index(self, grid: tuple[int, int]) -> int:
        gh, gw = grid
        if not (0 <= self.row < gh and 0 <= self.col < gw):
            raise ConfigurationError(f"token ({self.row}, {self.col}) outside a {gh}x{gw} grid")
        return self.row * gw + self.col


@dataclass(frozen=True)
class AttributionMatrix:
    U: np.ndarray
    block_ids: tuple[int, ...]
    patch_size: int
    image_shape: tuple[int, int]  # (h, w)
    transposed: bool = False
    reduction: str = "sum_abs"

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_shape
        return h // self.patch_size, w // self.patch_size


class _Trace:
    """One evaluation-mode forward pass kept for repeated VJPs."""

    def __init__(self, model: SRViT, image):
        cfg = model.config
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 4:
            if x.shape[0] != 1:
                raise ConfigurationError("attribution works on one image at a time")
            x = x[0]
        cfg.check_image(x.shape)
        p = cfg.patch_size
        self.model = model
        self.image_shape = x.shape[1:]
        self.grid = (x.shape[1] // p, x.shape[2] // p)
        tokens = partition(x[None], p)
        self.x_embed = tokens @ model.params["embed.w"] + model.params["embed.b"]
        self.outputs, self.caches = encode(model.params, self.x_embed, cfg, self.grid)

    @property
    def n(self) -> int:
        return self.x_embed.shape[1]

    def vjp(self, block_index: int, cotangent: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        if not 0 <= block_index < cfg.depth:
            raise ConfigurationError(f"block {block_index} outside 0..{cfg.depth - 1}")
        return blocks_backward(cotangent[None], self.caches[:block_index + 1],
                               self.model.params, cfg)[0]


def _reduce(D: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "sum_abs":
        return np.abs(D.sum(axis=-1))
    if reduction == "l1":
        return np.abs(D).sum(axis=-1)
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def _sensitivity(trace: _Trace, block_index: int, token_index: int, reduction: str):
    n, d = trace.x_embed.shape[1:]
    if not 0 <= token_index < n:
        raise ConfigurationError(f"token {token_index} outside 0..{n - 1}")
    cot = np.zeros((n, d))
    cot[token_index] = 1.0
    f = _reduce(trace.vjp(block_index, cot), reduction)
    if not np.all(np.isfinite(f)):
        raise NumericalError("non-finite token sensitivity", f"block{block_index}")
    return f


def token_sensitivity(model: SRViT, image, block_index: int, token_index: int,
                      reduction: str = "sum_abs") -> np.ndarray:
    """Sensitivity of intermediate token ``token_index`` (output of block
    ``block_index``, 0-based) to each of the ``n`` input tokens."""
    return _sensitivity(_Trace(model, image), block_index, token_index, reduction)


def _matrix(trace: _Trace, block_index: int, reduction: str) -> np.ndarray:
    return np.stack([_sensitivity(trace, block_index, i, reduction) for i in range(trace.n)])


def redistribution_matrix(model: SRViT, image, block_index: int, transpose: bool = False,
                          reduction: str = "sum_abs") -> AttributionMatrix:
    """Row ``i`` holds intermediate token ``i``'s sensitivity to every input token."""
    trace = _Trace(model, image)
    U = _matrix(trace, block_index, reduction)
    return AttributionMatrix(U.T if transpose else U, (block_index,), model.config.patch_size,
                             trace.image_shape, transpose, reduction)


def mean_redistribution(model: SRViT, image, blocks: Optional[Sequence[int]] = None,
                        transpose: bool = False, reduction: str = "sum_abs") -> AttributionMatrix:
    """Average of the per-block matrices (all blocks by default)."""
    trace = _Trace(model, image)
    blocks = tuple(range(model.config.depth)) if blocks is None else tuple(blocks)
    if not blocks:
        raise ConfigurationError("no blocks selected")
    U = np.mean([_matrix(trace, b, reduction) for b in blocks], axis=0)
    return AttributionMatrix(U.T if transpose else U, blocks, model.config.patch_size,
                             trace.image_shape, transpose, reduction)


def attribution_map(attr: AttributionMatrix, selector: TokenSelector) -> GridField:
    """Min-max normalized row of ``U`` laid out on the image grid.

    A constant row maps to all zeros. Each patch value is repeated over its
    ``p x p`` pixels.
    """
    grid = attr.grid
    row = attr.U[selector.index(grid)].astype(np.float64)
    lo, hi = row.min(), row.max()
    scaled = np.zeros_like(row) if hi == lo else (row - lo) / (hi - lo)
    p = attr.patch_size
    pixels = np.kron(scaled.reshape(grid), np.ones((p, p)))
    return GridField(pixels[None], ("TRD",), normalized=True)
