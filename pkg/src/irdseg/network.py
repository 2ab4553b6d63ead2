"""Hard-parameter-sharing segmentation + depth-completion network.

Layout for ``encoder_channels = [c0, ..., c_{L-1}]``::

    a_i = relu(guided_conv3x3(e_i; guide_i) + b_i)     e_0 = input
    e_{i+1} = maxpool2x2(a_i)

and per task decoder, starting from h = e_L::

    h = relu(conv3x3(concat(upsample2x(h), a_i)) + b)  for i = L-1 .. 0
    out = conv1x1(h) + b

The segmentation head emits logits; the depth head is passed through a
softplus so predicted depth is nonnegative. Both decoders read the same
encoder activations, and the encoder weights live exactly once in
``Model.params``.

Guidance depth for stage i is the input depth map nearest-neighbor
downsampled by 2**i.

Every layer has a hand-written backward pass; activations are batched
N x H x W x C.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import tomli

from irdseg import tomlio
from irdseg.conv_ops import (
    GuidedConvParams,
    _guided_backward,
    _guided_forward,
    compose_kernel,
    compose_kernel_backward,
    depth_similarity,
)
from irdseg.preprocess import enhance_ir
from irdseg.rng import SplitMix64
from irdseg.tensor import ConvGeometry, tensor_from_bytes, tensor_to_bytes

CONV_MODES = ("standard", "shape", "depth-aware", "da-shape")
CHECKPOINT_MAGIC = b"IRDM"
CHECKPOINT_VERSION = 1
MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4


class NumericalError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    in_channels: int = 2
    n_classes: int = 6
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    conv_mode: str = "da-shape"
    alpha: float = 1.0
    kernel_size: int = 3
    batch_norm: bool = True
    # negative-side slope of the rectifier; 0 is a plain ReLU
    leak: float = 0.0
    depth_init: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be a nonempty list of positive counts")
        if self.conv_mode not in CONV_MODES:
            raise ValueError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0.0 <= self.leak < 1.0:
            raise ValueError("leak must lie in [0, 1)")
        if self.depth_init <= 0:
            raise ValueError("depth_init must be positive")

    @property
    def uses_shape(self) -> bool:
        return self.conv_mode in ("shape", "da-shape")

    @property
    def uses_depth(self) -> bool:
        return self.conv_mode in ("depth-aware", "da-shape")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PreprocessConfig:
    equalize: bool = False
    gamma: float = 0.8
    # fixed input centering; the guidance depth stays raw
    ir_center: float = 0.5
    depth_center: float = 2.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Model:
    config: NetworkConfig
    params: dict
    # batch-norm running statistics; not learnable
    buffers: dict = field(default_factory=dict)
    # input pipeline the weights were trained with
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @property
    def depth(self) -> int:
        return len(self.config.encoder_channels)

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("enc")]

    def task_params(self, task: str) -> dict:
        """Parameters reachable from one task head, encoder entries included (shared objects)."""
        return {k: v for k, v in self.params.items() if k.startswith("enc") or k.startswith(task + ".")}


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, learning_rate: float, **kw) -> "OptimizerState":
        opt = cls(learning_rate, **kw)
        opt.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
        return opt


def _decoder_layout(cfg: NetworkConfig) -> list[tuple[int, int]]:
    """(in_channels, out_channels) for decoder stages i = L-1 .. 0."""
    chans = cfg.encoder_channels
    layout = []
    prev = chans[-1]
    for i in range(len(chans) - 1, -1, -1):
        layout.append((prev + chans[i], chans[i]))
        prev = chans[i]
    return layout


def build_model(config: NetworkConfig) -> Model:
    """Kernels get He-normal draws from the config seed; W_B = 1, W_S = I, biases 0.

    With batch_norm every 3x3 conv is followed by a per-channel affine
    normalization (gamma 1, beta 0) and carries no bias of its own. The two 1x1 heads start at zero, and the depth head bias is set so the
    initial depth prediction is ``depth_init`` everywhere. Draw order does not
    depend on conv_mode, so the same seed gives the same kernels in every mode.
    """
    rng = SplitMix64(config.seed)
    k = config.kernel_size
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def kernel(name, kh, cin, cout):
        fan_in = kh * kh * cin
        params[name + ".kernel"] = rng.normal(kh * kh * cin * cout).reshape(kh, kh, cin, cout) * math.sqrt(2.0 / fan_in)
        if config.batch_norm:
            params[name + ".bn.gamma"] = np.ones(cout)
            params[name + ".bn.beta"] = np.zeros(cout)
            buffers[name + ".bn.mean"] = np.zeros(cout)
            buffers[name + ".bn.var"] = np.ones(cout)
        else:
            params[name + ".bias"] = np.zeros(cout)

    cin = config.in_channels
    for i, cout in enumerate(config.encoder_channels):
        kernel(f"enc{i}", k, cin, cout)
        if config.uses_shape:
            params[f"enc{i}.w_base"] = np.ones((cin, cout))
            params[f"enc{i}.w_shape"] = np.eye(k * k)
        cin = cout
    for task, n_out in (("seg", config.n_classes), ("depth", 1)):
        for j, (ci, co) in enumerate(_decoder_layout(config)):
            kernel(f"{task}.dec{j}", k, ci, co)
        params[f"{task}.head.kernel"] = np.zeros((1, 1, config.encoder_channels[0], n_out))
        params[f"{task}.head.bias"] = np.zeros(n_out)
    # inverse softplus
    params["depth.head.bias"][:] = config.depth_init + math.log(-math.expm1(-config.depth_init))
    return Model(config, params, buffers)


def count_params(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


# layers


def _relu(x, leak=0.0):
    return np.where(x > 0, x, leak * x)


def _relu_slope(x, leak=0.0):
    return np.where(x > 0, 1.0, leak)


def maxpool2(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool2_backward(grad, arg, shape):
    n, h, w, c = shape
    routed = np.zeros((*grad.shape, 4))
    np.put_along_axis(routed, arg[..., None], grad[..., None], axis=-1)
    return routed.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(grad):
    n, h, w, c = grad.shape
    return grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def downsample_nearest(depth, factor):
    return depth[:, ::factor, ::factor]


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class _Conv:
    """One convolution layer of the model, optionally guided; caches for backward."""

    def __init__(self, model: Model, name: str, guided: bool):
        self.model, self.name = model, name
        cfg = model.config
        self.shape = guided and cfg.uses_shape
        self.depth_mode = guided and cfg.uses_depth
        k = model.params[name + ".kernel"]
        self.geom = ConvGeometry(k.shape[0], k.shape[1], 1, k.shape[0] // 2)

    def _gparams(self):
        p = self.model.params
        return GuidedConvParams(p[self.name + ".kernel"], p[self.name + ".w_base"], p[self.name + ".w_shape"], self.model.config.alpha)

    def forward(self, x, depth=None):
        p = self.model.params
        kernel = compose_kernel(self._gparams()) if self.shape else p[self.name + ".kernel"]
        sim = depth_similarity(depth, self.model.config.alpha, self.geom) if self.depth_mode else None
        y, cols = _guided_forward(x, kernel, sim, self.geom)
        self.cache = (x, kernel, sim, cols)
        bias = p.get(self.name + ".bias")
        return y if bias is None else y + bias

    def backward(self, grad, grads: dict, need_input=True):
        x, kernel, sim, cols = self.cache
        if self.name + ".bias" in self.model.params:
            grads[self.name + ".bias"] = grad.sum(axis=(0, 1, 2))
        grad_x = None
        if need_input:
            grad_x, grad_kernel = _guided_backward(x, kernel, sim, self.geom, grad, cols=cols)
        else:
            cout = grad.shape[-1]
            grad_kernel = (cols.reshape(-1, cols.shape[-1]).T @ grad.reshape(-1, cout)).reshape(kernel.shape)
        if self.shape:
            gk, gwb, gws = compose_kernel_backward(self._gparams(), grad_kernel)
            grads[self.name + ".kernel"] = gk
            grads[self.name + ".w_base"] = gwb
            grads[self.name + ".w_shape"] = gws
        else:
            grads[self.name + ".kernel"] = grad_kernel
        self.cache = None
        return grad_x


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class _BatchNorm:
    """Per-channel normalization over N, H, W; batch statistics when training."""

    def __init__(self, model: Model, name: str, training: bool):
        self.model, self.name, self.training = model, name + ".bn", training

    def forward(self, x):
        p, b = self.model.params, self.model.buffers
        if self.training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.stats = (mean, var)
        else:
            mean, var = b[self.name + ".mean"], b[self.name + ".var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        self.cache = (xhat, inv)
        return p[self.name + ".gamma"] * xhat + p[self.name + ".beta"]

    def backward(self, grad, grads: dict):
        xhat, inv = self.cache
        gamma = self.model.params[self.name + ".gamma"]
        grads[self.name + ".beta"] = grad.sum(axis=(0, 1, 2))
        grads[self.name + ".gamma"] = (grad * xhat).sum(axis=(0, 1, 2))
        if not self.training:
            return grad * gamma * inv
        gm = grad.mean(axis=(0, 1, 2))
        gxm = (grad * xhat).mean(axis=(0, 1, 2))
        self.cache = None
        return gamma * inv * (grad - gm - xhat * gxm)

    def update_running(self):
        if not self.training:
            return
        b = self.model.buffers
        mean, var = self.stats
        for key, value in ((".mean", mean), (".var", var)):
            b[self.name + key] *= 1.0 - BN_MOMENTUM
            b[self.name + key] += BN_MOMENTUM * value


def _check_input(model: Model, x: np.ndarray, depth: np.ndarray):
    cfg = model.config
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected N x H x W x {cfg.in_channels} input, got {x.shape}")
    if depth.shape != x.shape[:3]:
        raise ValueError(f"guidance depth {depth.shape} does not match input {x.shape[:3]}")
    f = 2 ** model.depth
    if x.shape[1] % f or x.shape[2] % f:
        raise ValueError(f"spatial size {x.shape[1]}x{x.shape[2]} not divisible by {f}")


class _Pass:
    """Forward pass that remembers what backward needs."""

    def __init__(self, model: Model, training: bool = True):
        self.model, self.training = model, training
        self.norms = []

    def _block(self, conv, x, depth=None):
        """conv [-> batch norm] -> rectifier; returns (activation, rectifier slope)."""
        z = conv.forward(x, depth)
        if self.model.config.batch_norm:
            bn = _BatchNorm(self.model, conv.name, self.training)
            self.norms.append(bn)
            conv.norm = bn
            z = bn.forward(z)
        leak = self.model.config.leak
        return _relu(z, leak), _relu_slope(z, leak)

    def _unblock(self, conv, grad, grads, need_input=True):
        norm = getattr(conv, "norm", None)
        if norm is not None:
            grad = norm.backward(grad, grads)
        return conv.backward(grad, grads, need_input)

    def update_running(self):
        for bn in self.norms:
            bn.update_running()

    def forward(self, x, depth):
        model = self.model
        _check_input(model, x, depth)
        self.enc, self.acts, self.pools = [], [], []
        e = x
        guide = depth
        for i in range(model.depth):
            conv = _Conv(model, f"enc{i}", guided=True)
            a, slope = self._block(conv, e, guide)
            self.enc.append((conv, slope))
            self.acts.append(a)
            e_next, arg = maxpool2(a)
            self.pools.append((arg, a.shape))
            e = e_next
            guide = downsample_nearest(guide, 2)
        self.bottom = e
        outputs = {}
        self.dec = {}
        for task in ("seg", "depth"):
            h = e
            layers = []
            for j, i in enumerate(range(model.depth - 1, -1, -1)):
                up = upsample2(h)
                cat = np.concatenate([up, self.acts[i]], axis=-1)
                conv = _Conv(model, f"{task}.dec{j}", guided=False)
                h, slope = self._block(conv, cat)
                layers.append((conv, slope, up.shape[-1]))
            head = _Conv(model, f"{task}.head", guided=False)
            out = head.forward(h)
            self.dec[task] = (layers, head)
            outputs[task] = out
        self.depth_pre = outputs["depth"][..., 0]
        return outputs["seg"], _softplus(self.depth_pre)

    def backward(self, grad_seg, grad_depth):
        model = self.model
        grads: dict[str, np.ndarray] = {}
        grad_acts = [np.zeros_like(a) for a in self.acts]
        grad_bottom = np.zeros_like(self.bottom)
        head_grads = {"seg": grad_seg, "depth": (grad_depth * _sigmoid(self.depth_pre))[..., None]}
        for task in ("seg", "depth"):
            layers, head = self.dec[task]
            g = head.backward(head_grads[task], grads)
            # decoder stages ran j = 0 .. L-1; unwind in reverse
            for j in range(len(layers) - 1, -1, -1):
                conv, active, up_ch = layers[j]
                g = self._unblock(conv, g * active, grads)
                i = model.depth - 1 - j
                grad_acts[i] += g[..., up_ch:]
                g = upsample2_backward(g[..., :up_ch])
            grad_bottom += g
        g = grad_bottom
        for i in range(model.depth - 1, -1, -1):
            arg, shape = self.pools[i]
            ga = maxpool2_backward(g, arg, shape) + grad_acts[i]
            conv, active = self.enc[i]
            g = self._unblock(conv, ga * active, grads, need_input=i > 0)
        return {k: grads[k] for k in model.params}


def forward_batch(model: Model, x: np.ndarray, depth: np.ndarray, training: bool = False):
    """Batched forward: N x H x W x C_in, N x H x W -> (logits N x H x W x K, depth N x H x W).

    Inference mode (running batch-norm statistics) unless ``training``.
    """
    return _Pass(model, training).forward(np.asarray(x, dtype=np.float64), np.asarray(depth, dtype=np.float64))


def forward(model: Model, sample: np.ndarray, guide) -> tuple[np.ndarray, np.ndarray]:
    """Single image: H x W x C_in with H x W guidance -> (H x W x K logits, H x W depth)."""
    depth = guide.depth if hasattr(guide, "depth") else np.asarray(guide, dtype=np.float64)
    seg, dense = forward_batch(model, sample[None], depth[None])
    return seg[0], dense[0]


# losses


def seg_loss(logits: np.ndarray, labels: np.ndarray, ignore_id: int | None = None, return_grad: bool = False,
             weights: np.ndarray | None = None):
    """Mean softmax cross-entropy over non-ignored pixels.

    With per-class ``weights`` each pixel counts ``weights[label]`` times and
    the mean divides by the total weight.
    """
    c = logits.shape[-1]
    labels = np.asarray(labels).astype(np.int64)
    keep = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
    bad = keep & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label {labels[bad][0]} outside [0, {c})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    safe = np.where(keep, labels, 0)
    picked = np.take_along_axis(shifted, safe[..., None], axis=-1)[..., 0]
    if weights is None:
        wpix = keep.astype(np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (c,) or np.any(weights < 0):
            raise ValueError(f"weights must be {c} nonnegative values")
        wpix = np.where(keep, weights[safe], 0.0)
    count = float(wpix.sum())
    if count == 0:
        loss = 0.0
        return (loss, np.zeros_like(logits)) if return_grad else loss
    loss = float(np.sum(((logz - picked) * wpix)[keep]) / count)
    if not return_grad:
        return loss
    grad = np.exp(shifted - logz[..., None])
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    grad *= wpix[..., None] / count
    return loss, grad


def balanced_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Median-frequency balancing: median(freq) / freq[c]; 1 for absent classes."""
    freq = np.bincount(np.asarray(labels).reshape(-1).astype(np.int64), minlength=n_classes)[:n_classes].astype(np.float64)
    present = freq > 0
    w = np.ones(n_classes)
    w[present] = np.median(freq[present]) / freq[present]
    return w


def masked_depth_loss(pred: np.ndarray, gt_filled: np.ndarray, mask: np.ndarray, return_grad: bool = False):
    """Mean absolute error over pixels with mask == 1; 0 when nothing is missing."""
    if not (pred.shape == gt_filled.shape == np.shape(mask)):
        raise ValueError("pred, gt and mask must share a shape")
    sel = np.asarray(mask) > 0
    count = int(sel.sum())
    if count == 0:
        loss = 0.0
        return (loss, np.zeros_like(pred)) if return_grad else loss
    diff = pred[sel] - gt_filled[sel]
    loss = float(np.abs(diff).sum() / count)
    if not return_grad:
        return loss
    grad = np.zeros_like(pred)
    grad[sel] = np.sign(diff) / count
    return loss, grad


def total_loss(seg: float, depth: float, lambda_depth: float = 1.0) -> float:
    if lambda_depth < 0:
        raise ValueError("lambda_depth must be nonnegative")
    return seg + lambda_depth * depth


def composite_depth(pred: np.ndarray, raw_depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep predictions only where depth was missing; observed depth elsewhere."""
    if not (np.shape(pred) == np.shape(raw_depth) == np.shape(mask)):
        raise ValueError("pred, raw depth and mask must share a shape")
    return np.where(np.asarray(mask) > 0, pred, raw_depth)


# training


def sgd_step(params: dict, grads: dict, opt: OptimizerState) -> None:
    """v <- momentum * v + (g + wd * theta); theta <- theta - lr * v, in place."""
    for name, theta in params.items():
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        v *= opt.momentum
        v += grads[name] + opt.weight_decay * theta
        theta -= opt.learning_rate * v


def prepare_batch(samples, pre: PreprocessConfig | None = None, in_channels: int = 2):
    """Stack ImageSamples into network tensors.

    Channels are [enhanced IR / 255 - ir_center, raw depth - depth_center];
    a 4-channel layout repeats the IR channel three times before depth.
    Holes stay at raw 0 before the shift. Returns a dict with x, depth (the
    raw guidance map), labels, gt and mask.
    """
    pre = pre or PreprocessConfig()
    irs = np.stack([enhance_ir(s.ir, pre.equalize, pre.gamma) / 255.0 for s in samples]) - pre.ir_center
    depth = np.stack([s.depth_raw for s in samples]).astype(np.float64)
    if in_channels == 2:
        x = np.stack([irs, depth - pre.depth_center], axis=-1)
    elif in_channels == 4:
        x = np.stack([irs, irs, irs, depth - pre.depth_center], axis=-1)
    else:
        raise ValueError("in_channels must be 2 or 4")
    return {
        "x": x,
        "depth": depth,
        "labels": np.stack([s.labels for s in samples]),
        "gt": np.stack([s.depth_filled_gt for s in samples]).astype(np.float64),
        "mask": np.stack([s.mask_missing for s in samples]).astype(np.float64),
    }


def loss_and_grads(model: Model, batch: dict, lambda_depth: float = 1.0, ignore_id: int | None = None, class_weights=None):
    report, grads, _ = _loss_pass(model, batch, lambda_depth, ignore_id, class_weights)
    return report, grads


def _loss_pass(model, batch, lambda_depth, ignore_id, class_weights=None):
    run = _Pass(model, training=True)
    logits, dense = run.forward(batch["x"], batch["depth"])
    ls, g_seg = seg_loss(logits, batch["labels"], ignore_id, return_grad=True, weights=class_weights)
    ld, g_depth = masked_depth_loss(dense, batch["gt"], batch["mask"], return_grad=True)
    report = {"seg_loss": ls, "depth_loss": ld, "total": total_loss(ls, ld, lambda_depth)}
    grads = run.backward(g_seg, lambda_depth * g_depth)
    return report, grads, run


def train_step(model: Model, batch, opt: OptimizerState, lambda_depth: float = 1.0, pre: PreprocessConfig | None = None,
               class_weights=None):
    """One SGD update on a batch (list of ImageSample or a prepared batch dict).

    Raises NumericalError without touching the parameters if the loss is not finite.
    """
    if not isinstance(batch, dict):
        if len(batch) == 0:
            raise ValueError("empty batch")
        batch = prepare_batch(batch, pre, model.config.in_channels)
    report, grads, run = _loss_pass(model, batch, lambda_depth, None, class_weights)
    if not all(math.isfinite(v) for v in report.values()):
        raise NumericalError(f"non-finite loss {report}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradients in {', '.join(bad)} (loss {report})")
    sgd_step(model.params, grads, opt)
    run.update_running()
    return model, opt, report


def predict_labels(model: Model, x: np.ndarray, depth: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    for s in range(0, x.shape[0], batch_size):
        logits, _ = forward_batch(model, x[s : s + batch_size], depth[s : s + batch_size])
        out.append(logits.argmax(axis=-1))
    return np.concatenate(out)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample permutation for one epoch, a pure function of (seed, epoch)."""
    keys = SplitMix64(seed).spawn(epoch).u64(n)
    return np.argsort(keys, kind="stable")


SCHEDULES = ("constant", "cosine")


def step_learning_rate(base: float, step: int, total: int, schedule: str = "constant") -> float:
    """Learning rate for update ``step`` (0-based) out of ``total``."""
    if schedule == "constant" or total <= 1:
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / total))
    raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")


def _flip(batch: dict, rng: SplitMix64) -> dict:
    """Independent horizontal and vertical flips per sample."""
    n = batch["x"].shape[0]
    flips = rng.uniform(2 * n).reshape(n, 2) < 0.5
    out = {}
    for key, v in batch.items():
        v = v.copy()
        for i in range(n):
            if flips[i, 0]:
                v[i] = v[i][:, ::-1]
            if flips[i, 1]:
                v[i] = v[i][::-1]
        out[key] = v
    return out


def train(model: Model, samples, epochs: int, batch_size: int, learning_rate: float, lambda_depth: float = 1.0,
          seed: int = 0, pre: PreprocessConfig | None = None, on_step=None, opt: OptimizerState | None = None,
          schedule: str = "constant", flip: bool = False, balance: bool = False):
    """Momentum SGD over shuffled mini-batches; a ragged final batch is kept.

    Shuffling and flips draw from streams keyed on (seed, epoch). With
    ``balance`` the segmentation loss uses median-frequency class weights
    computed once over the training labels.
    ``on_step(step, report)`` is called after every update. Returns the
    optimizer state.
    """
    if batch_size < 1 or epochs < 0:
        raise ValueError("batch_size must be >= 1 and epochs >= 0")
    step_learning_rate(learning_rate, 0, 2, schedule)
    data = prepare_batch(samples, pre, model.config.in_channels)
    opt = opt or OptimizerState.for_model(model, learning_rate)
    weights = balanced_class_weights(data["labels"], model.config.n_classes) if balance else None
    per_epoch = -(-len(samples) // batch_size)
    total = per_epoch * epochs
    step = 0
    for epoch in range(epochs):
        order = epoch_order(len(samples), seed, epoch)
        flip_rng = SplitMix64(seed).spawn(1_000_000 + epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = {k: v[idx] for k, v in data.items()}
            if flip:
                batch = _flip(batch, flip_rng)
            opt.learning_rate = step_learning_rate(learning_rate, step, total, schedule)
            _, _, report = train_step(model, batch, opt, lambda_depth, class_weights=weights)
            step += 1
            if on_step is not None:
                on_step(step, report)
    return opt


def evaluate(model: Model, samples, pre: PreprocessConfig | None = None, ignore_id: int | None = None, batch_size: int = 8):
    from irdseg.metrics import ConfusionMatrix

    data = prepare_batch(samples, pre or model.preprocess, model.config.in_channels)
    pred = predict_labels(model, data["x"], data["depth"], batch_size)
    return ConfusionMatrix(model.config.n_classes, ignore_id).accumulate(pred, data["labels"])


# checkpoints


def save_checkpoint(path, model: Model) -> None:
    doc = {**model.config.to_dict(), "preprocess": model.preprocess.to_dict()}
    text = tomlio.dumps(doc).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    for group in (model.params, model.buffers):
        buf.write(struct.pack("<I", len(group)))
        for name, value in group.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(tensor_to_bytes(value))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Model:

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    try:
        version, n_text = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} at byte 4")
        pos = 12
        doc = tomli.loads(buf[pos : pos + n_text].decode("utf-8"))
        pre = PreprocessConfig(**doc.pop("preprocess", {}))
        cfg = NetworkConfig(**doc)
        pos += n_text
        groups = []
        for _ in range(2):
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            group = {}
            for _ in range(count):
                (n_name,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos : pos + n_name].decode("utf-8")
                pos += n_name
                group[name], pos = tensor_from_bytes(buf, pos)
            groups.append(group)
        if pos != len(buf):
            raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    except (struct.error, ValueError, TypeError, tomli.TOMLDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: {exc}") from None
    model = Model(cfg, *groups, preprocess=pre)
    ref = build_model(cfg)
    for have, want in ((model.params, ref.params), (model.buffers, ref.buffers)):
        if list(have) != list(want) or any(have[k].shape != want[k].shape for k in want):
            raise CheckpointError(f"{path}: parameter set does not match its config")
    return model


def history_line(step: int, report: dict) -> str:
    return json.dumps(
        {"step": step, "seg_loss": report["seg_loss"], "depth_loss": report["depth_loss"], "total": report["total"]},
        separators=(",", ":"),
    )
