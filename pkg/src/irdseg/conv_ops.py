"""Shape convolution, depth-aware convolution and their fusion, forward and backward.

Every operator is a bias-free cross-correlation whose per-tap weight is
built from three pieces:

* the kernel, optionally re-weighted through its base/shape decomposition
  (``compose_kernel``),
* a per-output-pixel, per-tap depth similarity ``exp(-alpha * |D(p0) - D(p0 + pn)|)``
  shared across input channels,
* the zero-padded input patch.

Inputs are H x W x C (or N x H x W x C); depth guidance is H x W (or N x H x W).
No gradient flows into the depth map or alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from irdseg.tensor import ConvGeometry, _batched, _check_kernel, col2im, im2col, windows

_TINY = np.finfo(np.float64).tiny


@dataclass
class GuidedConvParams:
    kernel: np.ndarray
    w_base: np.ndarray
    w_shape: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        kh, kw, cin, cout = self.kernel.shape
        if self.w_base.shape != (cin, cout):
            raise ValueError(f"w_base must be {cin}x{cout}, got {self.w_base.shape}")
        d = kh * kw
        if self.w_shape.shape != (d, d):
            raise ValueError(f"w_shape must be {d}x{d} for a {kh}x{kw} kernel, got {self.w_shape.shape}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")

    @classmethod
    def identity(cls, kernel: np.ndarray, alpha: float = 1.0) -> "GuidedConvParams":
        """Base weights 1 and shape weights I: composes back to ``kernel`` itself."""
        kh, kw, cin, cout = kernel.shape
        return cls(np.asarray(kernel, dtype=np.float64), np.ones((cin, cout)), np.eye(kh * kw), alpha)


@dataclass
class DepthGuidance:
    depth: np.ndarray
    validity: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.validity is None:
            self.validity = (self.depth > 0).astype(np.float64)
        if np.any(self.depth < 0):
            raise ValueError("guidance depth must be nonnegative")


def _depth_of(guide) -> np.ndarray:
    if isinstance(guide, DepthGuidance):
        return guide.depth
    return np.asarray(guide, dtype=np.float64)


def decompose_kernel(kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a kernel into its per-(c_in, c_out) spatial mean and the zero-mean remainder."""
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be rank 4, got shape {kernel.shape}")
    k_base = kernel.mean(axis=(0, 1))
    return k_base, kernel - k_base


def compose_kernel(params: GuidedConvParams) -> np.ndarray:
    kh, kw, cin, cout = params.kernel.shape
    d = kh * kw
    if params.w_shape.shape != (d, d):
        raise ValueError(f"w_shape {params.w_shape.shape} does not match {d} kernel taps")
    k_base, k_shape = decompose_kernel(params.kernel)
    mixed = params.w_shape @ k_shape.reshape(d, cin * cout)
    return (params.w_base * k_base) + mixed.reshape(kh, kw, cin, cout)


def compose_kernel_backward(params: GuidedConvParams, grad_composed: np.ndarray):
    """Pull a gradient on the composed kernel back to (kernel, w_base, w_shape)."""
    kh, kw, cin, cout = params.kernel.shape
    d = kh * kw
    k_base, k_shape = decompose_kernel(params.kernel)
    g = grad_composed.reshape(d, cin * cout)
    g_sum = g.sum(axis=0).reshape(cin, cout)
    grad_w_base = g_sum * k_base
    grad_w_shape = g @ k_shape.reshape(d, cin * cout).T
    grad_k_shape = params.w_shape.T @ g
    grad_k_base = (params.w_base * g_sum).reshape(1, cin * cout)
    # k_shape = K - mean(K) and k_base = mean(K): both route through the spatial mean
    grad_kernel = grad_k_shape - grad_k_shape.mean(axis=0, keepdims=True) + grad_k_base / d
    return grad_kernel.reshape(kh, kw, cin, cout), grad_w_base, grad_w_shape


def depth_similarity(guide, alpha: float, geom: ConvGeometry) -> np.ndarray:
    """Per output pixel and kernel tap, exp(-alpha * |D(center) - D(neighbor)|).

    Returns Ho x Wo x (Kh*Kw), or N x Ho x Wo x (Kh*Kw) for batched depth.
    Taps landing in the zero padding get similarity 1.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    depth, single = _batched(_depth_of(guide), 2)
    win = windows(depth[..., None], geom, pad_value=np.nan)[..., 0]
    n, ho, wo = win.shape[:3]
    win = win.reshape(n, ho, wo, -1)
    center = win[..., (geom.kernel_h // 2) * geom.kernel_w + geom.kernel_w // 2][..., None]
    diff = np.abs(center - win)
    with np.errstate(invalid="ignore"):
        sim = np.exp(-alpha * diff) if alpha else np.ones_like(diff)
    sim = np.where(np.isnan(diff), 1.0, np.maximum(sim, _TINY))
    return sim[0] if single else sim


def _guided_forward(x, kernel, sim, geom):
    """Returns (output, weighted patch matrix N x P x (D*C))."""
    xb, single = _batched(np.asarray(x, dtype=np.float64), 3)
    _check_kernel(xb, kernel, geom)
    n = xb.shape[0]
    ho, wo = geom.output_size(xb.shape[1], xb.shape[2])
    cols = im2col(xb, geom)
    if sim is not None:
        d, c = geom.taps, xb.shape[3]
        cols = (cols.reshape(n, ho * wo, d, c) * sim.reshape(n, ho * wo, d, 1)).reshape(n, ho * wo, d * c)
    out = (cols @ kernel.reshape(-1, kernel.shape[3])).reshape(n, ho, wo, -1)
    return (out[0] if single else out), cols


def _guided_backward(x, kernel, sim, geom, grad_out, cols=None):
    xb, single = _batched(np.asarray(x, dtype=np.float64), 3)
    n, c = xb.shape[0], xb.shape[3]
    cout = kernel.shape[3]
    if cols is None:
        _, cols = _guided_forward(xb, kernel, sim, geom)
    g = (grad_out[None] if single else grad_out).reshape(n, -1, cout)
    kmat = kernel.reshape(-1, cout)
    grad_kernel = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, cout)).reshape(kernel.shape)
    grad_cols = g @ kmat.T
    if sim is not None:
        p = grad_cols.shape[1]
        grad_cols = (grad_cols.reshape(n, p, geom.taps, c) * sim.reshape(n, p, geom.taps, 1)).reshape(n, p, -1)
    grad_x = col2im(grad_cols, xb.shape, geom)
    return (grad_x[0] if single else grad_x), grad_kernel


def _check_guide(x: np.ndarray, depth: np.ndarray) -> None:
    if x.shape[:-1] != depth.shape:
        raise ValueError(f"depth guidance {depth.shape} does not match input spatial extent {x.shape[:-1]}")


def shape_conv_forward(x, params: GuidedConvParams, geom: ConvGeometry) -> np.ndarray:
    return _guided_forward(x, compose_kernel(params), None, geom)[0]


def shape_conv_backward(x, params: GuidedConvParams, geom: ConvGeometry, grad_out):
    """Returns (grad_input, grad_kernel, grad_w_base, grad_w_shape)."""
    composed = compose_kernel(params)
    grad_x, grad_composed = _guided_backward(x, composed, None, geom, grad_out)
    return (grad_x, *compose_kernel_backward(params, grad_composed))


def depth_aware_conv_forward(x, kernel, guide, alpha: float, geom: ConvGeometry) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    depth = _depth_of(guide)
    _check_guide(x, depth)
    return _guided_forward(x, kernel, depth_similarity(depth, alpha, geom), geom)[0]


def depth_aware_conv_backward(x, kernel, guide, alpha: float, geom: ConvGeometry, grad_out):
    """Returns (grad_input, grad_kernel)."""
    x = np.asarray(x, dtype=np.float64)
    depth = _depth_of(guide)
    _check_guide(x, depth)
    return _guided_backward(x, kernel, depth_similarity(depth, alpha, geom), geom, grad_out)


def da_shape_conv_forward(x, params: GuidedConvParams, guide, geom: ConvGeometry) -> np.ndarray:
    return depth_aware_conv_forward(x, compose_kernel(params), guide, params.alpha, geom)


def da_shape_conv_backward(x, params: GuidedConvParams, guide, geom: ConvGeometry, grad_out):
    """Returns (grad_input, grad_kernel, grad_w_base, grad_w_shape)."""
    composed = compose_kernel(params)
    grad_x, grad_composed = depth_aware_conv_backward(x, composed, guide, params.alpha, geom, grad_out)
    return (grad_x, *compose_kernel_backward(params, grad_composed))
