"""SRViT: patch tokens -> attention blocks -> linear decode -> conv smoothing head.

Everything is plain numpy in float64. Each layer has a ``*_forward`` returning
``(output, cache)`` and a matching ``*_backward``; :func:`forward` and
:func:`backward` chain them for the full network. The short public functions
(``msa``, ``fcn``, ``block``, ...) are cache-free conveniences.

Parameters live in a flat ``dict[str, ndarray]``:

    embed.w (d_in, d)           embed.b (d,)
    block{l}.wq/wk/wv (H, d, v) block{l}.wo (H*v, d)
    block{l}.ln_g/ln_b (d,)
    block{l}.wr (d, m)          block{l}.br (m,)
    block{l}.ws (m, d)          block{l}.bs (d,)
    decode.w (d, d_in)          decode.b (d_in,)
    conv{i}.w (out, in, 3, 3)   conv{i}.b (out,)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 12
    depth: int = 6
    heads: int = 12
    model_dim: int = 256
    inner_dim: int = 64
    fcn_dim: int = 512
    conv_hiddens: tuple[int, ...] = (32, 16)
    dropout_p: float = 0.2
    use_conv_head: bool = True
    in_channels: int = 4
    # switches for studying variants; defaults follow the architecture as written
    residual: bool = False
    attn_scale: str = "model_dim"  # or "inner_dim"
    pos_encoding: str = "2d"  # "1d", or "none" for diagnostics

    def __post_init__(self):
        object.__setattr__(self, "conv_hiddens", tuple(int(c) for c in self.conv_hiddens))
        for name in ("patch_size", "depth", "heads", "model_dim", "inner_dim", "fcn_dim",
                     "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.inner_dim < self.model_dim:
            raise ConfigurationError("inner_dim must be smaller than model_dim")
        if not self.fcn_dim > self.model_dim:
            raise ConfigurationError("fcn_dim must exceed model_dim")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if any(c <= 0 for c in self.conv_hiddens):
            raise ConfigurationError("conv_hiddens must be positive")
        if self.attn_scale not in ("model_dim", "inner_dim"):
            raise ConfigurationError(f"unknown attn_scale {self.attn_scale!r}")
        if self.pos_encoding not in ("1d", "2d", "none"):
            raise ConfigurationError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.pos_encoding == "2d" and self.model_dim % 4:
            raise ConfigurationError("2d positional encoding needs model_dim divisible by 4")
        if self.pos_encoding == "1d" and self.model_dim % 2:
            raise ConfigurationError("1d positional encoding needs an even model_dim")

    @property
    def token_dim(self) -> int:
        return self.patch_size ** 2 * self.in_channels

    def check_image(self, shape) -> None:
        c, h, w = shape[-3:]
        p = self.patch_size
        if c != self.in_channels:
            raise ConfigurationError(f"model expects {self.in_channels} channels, got {c}")
        if h % p or w % p:
            raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")


TABLE1 = ModelConfig()
SMOKE = ModelConfig(patch_size=4, depth=2, heads=4, model_dim=32, inner_dim=8, fcn_dim=64,
                    conv_hiddens=(8, 4))
TINY = ModelConfig(patch_size=2, depth=2, heads=2, model_dim=8, inner_dim=4, fcn_dim=16,
                   conv_hiddens=(4,))


def conv_channels(cfg: ModelConfig) -> list[tuple[int, int]]:
    chans = [cfg.in_channels, *cfg.conv_hiddens, 1]
    return list(zip(chans[:-1], chans[1:]))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, m, H, din = cfg.model_dim, cfg.inner_dim, cfg.fcn_dim, cfg.heads, cfg.token_dim
    shapes = {"embed.w": (din, d), "embed.b": (d,)}
    for l in range(cfg.depth):
        shapes.update({
            f"block{l}.wq": (H, d, v), f"block{l}.wk": (H, d, v), f"block{l}.wv": (H, d, v),
            f"block{l}.wo": (H * v, d),
            f"block{l}.ln_g": (d,), f"block{l}.ln_b": (d,),
            f"block{l}.wr": (d, m), f"block{l}.br": (m,),
            f"block{l}.ws": (m, d), f"block{l}.bs": (d,),
        })
    shapes.update({"decode.w": (d, din), "decode.b": (din,)})
    if cfg.use_conv_head:
        for i, (cin, cout) in enumerate(conv_channels(cfg)):
            shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.b"] = (cout,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count.

    ``(d_in+1)d + L[4Hdv + 2d + (d+1)m + (m+1)d] + (d+1)d_in + sum_i (9 c_in + 1) c_out``
    where the last sum runs over the conv layers (empty without the conv head).
    """
    d, v, m, H, din, L = (cfg.model_dim, cfg.inner_dim, cfg.fcn_dim, cfg.heads,
                          cfg.token_dim, cfg.depth)
    total = (din + 1) * d + L * (4 * H * d * v + 2 * d + (d + 1) * m + (m + 1) * d)
    total += (d + 1) * din
    if cfg.use_conv_head:
        total += sum((9 * cin + 1) * cout for cin, cout in conv_channels(cfg))
    return total


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization; biases zero, layer-norm scale one."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("ln_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1 or name.endswith("ln_b"):
            params[name] = np.zeros(shape)
        else:
            if name.endswith((".wq", ".wk", ".wv")):
                fan_in = shape[1]
            elif len(shape) == 4:
                fan_in = shape[1] * 9
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in parameter_shapes(cfg).items()}


def check_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = parameter_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigurationError(
                f"{name}: expected shape {shape}, got {params[name].shape}")


# ------------------------------------------------------------------ tokens

def partition(image: np.ndarray, p: int) -> np.ndarray:
    """``(..., c, h, w) -> (..., n, p*p*c)``; patches in row-major grid order,
    each flattened channel-major then row-major."""
    *lead, c, h, w = image.shape
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, c, gh, p, gw, p)
    k = len(lead)
    x = np.moveaxis(x, (k + 1, k + 3), (k, k + 1))  # (..., gh, gw, c, p, p)
    return x.reshape(*lead, gh * gw, c * p * p)


def reassemble(tokens: np.ndarray, p: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Exact inverse of :func:`partition` for an image of ``shape = (c, h, w)``."""
    c, h, w = shape
    gh, gw = h // p, w // p
    *lead, n, din = tokens.shape
    if n != gh * gw or din != c * p * p:
        raise ConfigurationError(f"tokens {tokens.shape} do not tile an image of shape {shape}")
    k = len(lead)
    x = tokens.reshape(*lead, gh, gw, c, p, p)
    x = np.moveaxis(x, (k, k + 1), (k + 1, k + 3))  # (..., c, gh, p, gw, p)
    return x.reshape(*lead, c, h, w)


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(dim // 2)
    angles = positions[:, None] / (10000.0 ** (2 * i / dim))[None, :]
    pe = np.empty((len(positions), dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def positional_encoding(grid: tuple[int, int], d: int, kind: str = "2d") -> np.ndarray:
    """Fixed sine-cosine encoding of shape ``(n, d)`` for a ``grid = (rows, cols)``
    patch grid. ``"2d"`` encodes the patch row in the first half of the
    dimensions and the patch column in the second."""
    gh, gw = grid
    if kind == "none":
        return np.zeros((gh * gw, d))
    if kind == "1d":
        return _sinusoid(np.arange(gh * gw, dtype=np.float64), d)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    half = d // 2
    return np.concatenate([_sinusoid(rows.astype(np.float64), half),
                           _sinusoid(cols.astype(np.float64), half)], axis=1)


def embed(tokens: np.ndarray, params, cfg: ModelConfig, grid: tuple[int, int]) -> np.ndarray:
    if tokens.shape[-1] != cfg.token_dim:
        raise ConfigurationError(
            f"token length {tokens.shape[-1]} != p*p*c = {cfg.token_dim}")
    pe = positional_encoding(grid, cfg.model_dim, cfg.pos_encoding)
    return tokens @ params["embed.w"] + params["embed.b"] + pe


# ------------------------------------------------------------------ primitives

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_forward(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _attn_scale(cfg: ModelConfig) -> float:
    return float(np.sqrt(cfg.model_dim if cfg.attn_scale == "model_dim" else cfg.inner_dim))


def attention_head(X, wq, wk, wv, scale: Optional[float] = None):
    """One head: ``O = softmax(Q K^T / scale) V``. Returns ``(O, A)``.

    ``scale`` defaults to ``sqrt(d)`` with ``d`` the embedding width of ``X``.
    """
    if scale is None:
        scale = np.sqrt(X.shape[-1])
    Q, K, V = X @ wq, X @ wk, X @ wv
    A = softmax(Q @ np.swapaxes(K, -1, -2) / scale)
    return A @ V, A


def msa_forward(X, lp, cfg: ModelConfig):
    """Multi-head self attention on ``X`` of shape ``(B, n, d)``."""
    scale = _attn_scale(cfg)
    Xh = X[:, None]  # (B, 1, n, d) against (H, d, v)
    Q, K, V = Xh @ lp["wq"], Xh @ lp["wk"], Xh @ lp["wv"]  # (B, H, n, v)
    A = softmax(Q @ np.swapaxes(K, -1, -2) / scale)
    O = A @ V
    B, H, n, v = O.shape
    cat = np.moveaxis(O, 1, 2).reshape(B, n, H * v)
    return cat @ lp["wo"], (X, Q, K, V, A, cat, scale)


def msa_backward(dout, cache, lp):
    X, Q, K, V, A, cat, scale = cache
    B, H, n, v = Q.shape
    dwo = np.einsum("bni,bnd->id", cat, dout)
    dO = np.moveaxis((dout @ lp["wo"].T).reshape(B, n, H, v), 2, 1)
    dA = dO @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / scale
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    grads = {
        "wq": np.einsum("bnd,bhnv->hdv", X, dQ),
        "wk": np.einsum("bnd,bhnv->hdv", X, dK),
        "wv": np.einsum("bnd,bhnv->hdv", X, dV),
        "wo": dwo,
    }
    dX = (dQ @ np.swapaxes(lp["wq"], -1, -2) + dK @ np.swapaxes(lp["wk"], -1, -2)
          + dV @ np.swapaxes(lp["wv"], -1, -2)).sum(axis=1)
    return dX, grads


def fcn_forward(Xbar, lp, cfg: ModelConfig, rng=None):
    """``GELU(Xbar W^R + b^R) W^S + b^S``; dropout on the GELU activations when
    ``rng`` is given (training mode)."""
    pre = Xbar @ lp["wr"] + lp["br"]
    act = gelu(pre)
    mask = None
    if rng is not None and cfg.dropout_p > 0:
        keep = 1.0 - cfg.dropout_p
        mask = (rng.random(act.shape) < keep) / keep
        act = act * mask
    return act @ lp["ws"] + lp["bs"], (Xbar, pre, act, mask)


def fcn_backward(dout, cache, lp):
    Xbar, pre, act, mask = cache
    grads = {"ws": np.einsum("bnm,bnd->md", act, dout), "bs": dout.sum(axis=(0, 1))}
    dact = dout @ lp["ws"].T
    if mask is not None:
        dact = dact * mask
    dpre = dact * gelu_grad(pre)
    grads["wr"] = np.einsum("bnd,bnm->dm", Xbar, dpre)
    grads["br"] = dpre.sum(axis=(0, 1))
    return dpre @ lp["wr"].T, grads


def layer_params(params, l: int) -> dict[str, np.ndarray]:
    prefix = f"block{l}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def block_forward(X, lp, cfg: ModelConfig, rng=None):
    """``FCN(LN(MSA(X)))``, optionally with residual connections around both."""
    M, c_msa = msa_forward(X, lp, cfg)
    if cfg.residual:
        M = X + M
    Xbar, c_ln = layer_norm_forward(M, lp["ln_g"], lp["ln_b"])
    F, c_fcn = fcn_forward(Xbar, lp, cfg, rng)
    if cfg.residual:
        F = M + F
    return F, (c_msa, c_ln, c_fcn)


def block_backward(dout, cache, lp, cfg: ModelConfig):
    c_msa, c_ln, c_fcn = cache
    dXbar, grads = fcn_backward(dout, c_fcn, lp)
    dM, grads["ln_g"], grads["ln_b"] = layer_norm_backward(dXbar, c_ln)
    if cfg.residual:
        dM = dM + dout
    dX, g_msa = msa_backward(dM, c_msa, lp)
    grads.update(g_msa)
    if cfg.residual:
        dX = dX + dM
    return dX, grads


def conv2d_forward(x, w, b):
    """3x3 zero-padded convolution keeping the spatial size. ``x``: (B, C, H, W)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)], axis=2)
    cols = cols.reshape(B, C * 9, H * W)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(B, -1, H, W), (cols, x.shape)


def conv2d_backward(dout, cache, w):
    cols, (B, C, H, W) = cache
    d = dout.reshape(B, w.shape[0], H * W)
    dw = np.einsum("bok,bik->oi", d, cols).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dcols = (w.reshape(w.shape[0], -1).T @ d).reshape(B, C, 3, 3, H, W)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, :, i, j]
    return dxp[:, :, 1:-1, 1:-1], dw, db


# ------------------------------------------------------------------ network

def encode(params, x_embed, cfg: ModelConfig, grid: tuple[int, int], rng=None):
    """Run the transformer blocks starting from the embedding *before* the
    positional encoding is added.

    ``x_embed`` is ``(B, n, d)``; returns the list of block outputs and caches.
    """
    X = x_embed + positional_encoding(grid, cfg.model_dim, cfg.pos_encoding)
    outputs, caches = [], []
    for l in range(cfg.depth):
        X, cache = block_forward(X, layer_params(params, l), cfg, rng)
        outputs.append(X)
        caches.append(cache)
    return outputs, caches


def blocks_backward(dout, caches, params, cfg: ModelConfig, grads=None):
    """Back-propagate ``dout`` from the output of block ``len(caches) - 1`` to the
    pre-encoding embedding. Parameter gradients land in ``grads`` when given."""
    dX = dout
    for l in reversed(range(len(caches))):
        dX, g = block_backward(dX, caches[l], layer_params(params, l), cfg)
        if grads is not None:
            for k, v in g.items():
                grads[f"block{l}.{k}"] = v
    return dX


def decode(XL, params, shape: tuple[int, int, int], p: int) -> np.ndarray:
    """Linear per-token decoding placed back onto the image grid (``z0``)."""
    return reassemble(XL @ params["decode.w"] + params["decode.b"], p, shape)


def conv_head_forward(z0, params, cfg: ModelConfig):
    z, caches = z0, []
    n_layers = len(cfg.conv_hiddens) + 1
    for i in range(n_layers):
        z, cache = conv2d_forward(z, params[f"conv{i}.w"], params[f"conv{i}.b"])
        relu = i < n_layers - 1  # final projection stays linear
        if relu:
            z = np.maximum(z, 0.0)
        caches.append((cache, z if relu else None))
    return z, caches


def conv_head_backward(dy, caches, params, grads):
    dz = dy
    for i in reversed(range(len(caches))):
        cache, activated = caches[i]
        if activated is not None:
            dz = dz * (activated > 0)
        dz, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(
            dz, cache, params[f"conv{i}.w"])
    return dz


def conv_head(z0, params, cfg: ModelConfig) -> np.ndarray:
    x, single = _as_batch(z0)
    y, _ = conv_head_forward(x, params, cfg)
    return y[0] if single else y


def msa(X, lp, cfg: ModelConfig) -> np.ndarray:
    out, _ = msa_forward(np.asarray(X, dtype=np.float64)[None], lp, cfg)
    return out[0]


def fcn(Xbar, lp, cfg: ModelConfig, rng=None) -> np.ndarray:
    out, _ = fcn_forward(np.asarray(Xbar, dtype=np.float64)[None], lp, cfg, rng)
    return out[0]


def block(X, lp, cfg: ModelConfig, rng=None) -> np.ndarray:
    out, _ = block_forward(np.asarray(X, dtype=np.float64)[None], lp, cfg, rng)
    return out[0]


def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def forward_cached(params, images, cfg: ModelConfig, rng=None):
    """Full forward pass on a batch ``(B, c, h, w)``; returns ``(y, cache)`` with
    ``y`` of shape ``(B, 1, h, w)``. Passing ``rng`` enables dropout."""
    cfg.check_image(images.shape)
    B, c, h, w = images.shape
    p = cfg.patch_size
    grid = (h // p, w // p)
    tokens = partition(images, p)
    x_embed = tokens @ params["embed.w"] + params["embed.b"]
    outputs, block_caches = encode(params, x_embed, cfg, grid, rng)
    XL = outputs[-1]
    z0 = decode(XL, params, (c, h, w), p)
    head_caches = None
    if cfg.use_conv_head:
        y, head_caches = conv_head_forward(z0, params, cfg)
    else:
        y = z0[:, :1]
    cache = {"tokens": tokens, "block_caches": block_caches, "XL": XL, "z0_shape": z0.shape,
             "head_caches": head_caches}
    return y, cache


def backward(params, cache, dy, cfg: ModelConfig):
    """Gradients of a scalar loss w.r.t. every parameter given ``dL/dy``.

    The gradient w.r.t. the pre-encoding embedding is returned under the key
    ``"input_embedding"``.
    """
    grads: dict[str, np.ndarray] = {}
    B, c, h, w = cache["z0_shape"]
    if cfg.use_conv_head:
        dz0 = conv_head_backward(dy, cache["head_caches"], params, grads)
    else:
        dz0 = np.zeros(cache["z0_shape"])
        dz0[:, :1] = dy
    dtok = partition(dz0, cfg.patch_size)
    grads["decode.w"] = np.einsum("bnd,bnk->dk", cache["XL"], dtok)
    grads["decode.b"] = dtok.sum(axis=(0, 1))
    dXL = dtok @ params["decode.w"].T
    dX = blocks_backward(dXL, cache["block_caches"], params, cfg, grads)
    grads["embed.w"] = np.einsum("bnk,bnd->kd", cache["tokens"], dX)
    grads["embed.b"] = dX.sum(axis=(0, 1))
    grads["input_embedding"] = dX
    return grads


def forward(params, image, cfg: ModelConfig, rng=None) -> np.ndarray:
    """Prediction for one ``(c, h, w)`` image or a batch ``(B, c, h, w)``."""
    x, single = _as_batch(image)
    y, _ = forward_cached(params, x, cfg, rng)
    return y[0] if single else y


@dataclass(frozen=True)
class SRViT:
    """A configuration bundled with its parameters."""

    config: ModelConfig
    params: dict

    def __post_init__(self):
        check_params(self.config, self.params)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "SRViT":
        return cls(config, init_params(config, seed))

    def __call__(self, images, rng=None) -> np.ndarray:
        return forward(self.params, images, self.config, rng)

    def predict(self, inputs) -> "GridField":
        from .fields import GridField

        y = self(inputs.values)
        return GridField(y, ("REFC",), normalized=True)
