"""Small convolutional encoder with stage taps, projector and predictor.

Everything is plain numpy in NHWC layout. The forward pass keeps the
activations it needs in a cache so :func:`backward` can return exact
reverse-mode gradients for every parameter and for the input, with upstream
gradients allowed on any subset of the tapped outputs.

Layout::

    stem     conv3x3/2 -> BN -> ReLU                      (S/2)
    stage k  conv3x3/2 -> BN -> ReLU -> conv3x3/1 -> BN -> ReLU   (S/2^(k+1))
    taps     f2, f3, f4 = outputs of stages 2, 3, 4
    rep      spatial mean of f4
    proj     Linear -> ReLU -> Linear
    pred     Linear -> ReLU -> Linear   (online branch only)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TAPS = ("f2", "f3", "f4")


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    rep_dim: int = 128
    proj_dim: int = 64
    predictor_init: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != 4 or min(self.stage_channels) <= 0:
            raise ValueError("stage_channels must be 4 positive integers")
        if self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32")
        if self.input_size // 16 < 4:
            raise ValueError("layer-3 side input_size/16 must be at least 4")
        if self.rep_dim != self.stage_channels[3]:
            raise ValueError("rep_dim is the pooled stage-4 width and must equal stage_channels[3]")
        if not 0 < self.proj_dim < self.rep_dim:
            raise ValueError("proj_dim must be positive and smaller than rep_dim")
        if self.predictor_init not in ("identity", "he"):
            raise ValueError(f"unknown predictor_init {self.predictor_init!r}")

    @property
    def tap_shapes(self) -> dict[str, tuple[int, int, int]]:
        s, c = self.input_size, self.stage_channels
        return {
            "f2": (s // 8, s // 8, c[1]),
            "f3": (s // 16, s // 16, c[2]),
            "f4": (s // 32, s // 32, c[3]),
        }


def _conv_names():
    # (name, stride) in execution order, with the stage each block closes
    names = [("stem", 2)]
    for k in range(1, 5):
        names += [(f"s{k}.c1", 2), (f"s{k}.c2", 1)]
    return names


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c = config.stage_channels
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for name, _ in _conv_names():
        cout = c[0] if name == "stem" else c[int(name[1]) - 1]
        shapes[f"{name}.w"] = (3, 3, cin, cout)
        shapes[f"{name}.g"] = (cout,)
        shapes[f"{name}.b"] = (cout,)
        cin = cout
    p, h = config.proj_dim, 2 * config.proj_dim
    hp = 2 * config.proj_dim
    shapes.update({
        "proj.w1": (config.rep_dim, h), "proj.b1": (h,),
        "proj.w2": (h, p), "proj.b2": (p,),
        "pred.w1": (p, hp), "pred.b1": (hp,),
        "pred.w2": (hp, p), "pred.b2": (p,),
    })
    return shapes


def fan_in(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-1]))


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, unit BN scale, zero biases. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in(shape))
    if config.predictor_init == "identity":
        # relu(z) - relu(-z) == z, so the untrained predictor passes projections through
        p = config.proj_dim
        eye = np.eye(p)
        params["pred.w1"] = np.concatenate([eye, -eye], axis=1)
        params["pred.w2"] = np.concatenate([eye, -eye], axis=0)
    return {k: v.astype(dtype) for k, v in params.items()}


def init_buffers(config: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    bufs = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            base = name[:-2]
            bufs[f"{base}.mean"] = np.zeros(shape, dtype)
            bufs[f"{base}.var"] = np.ones(shape, dtype)
    return bufs


def ema_blend(online: dict, target: dict, momentum: float) -> dict:
    """Return ``momentum * target + (1 - momentum) * online`` per tensor."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if online.keys() != target.keys():
        raise ValueError("branches hold different tensors")
    out = {}
    for k, xi in target.items():
        theta = online[k]
        if theta.shape != xi.shape:
            raise ValueError(f"shape mismatch for {k}: {theta.shape} vs {xi.shape}")
        out[k] = (momentum * xi + (1.0 - momentum) * theta).astype(xi.dtype)
    return out


# -- layers -----------------------------------------------------------------

def conv_forward(x, w, stride):
    n, h, wd, cin = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # win: (n, ho, wo, cin, k, k) -> cols ordered (kh, kw, cin) to match w
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, -1)
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride, k)


def conv_backward(dout, w, cache):
    cols, xshape, stride, k = cache
    n, h, wd, cin = xshape
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, cin)
    pad = k // 2
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dout.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcols[:, :, :, a, b]
    return dxp[:, pad:pad + h, pad:pad + wd], dw


def bn_forward(x, g, b, train, mean=None, var=None):
    if train:
        mu = x.mean(axis=(0, 1, 2))
        sig2 = x.var(axis=(0, 1, 2))
    else:
        mu, sig2 = mean, var
    inv = 1.0 / np.sqrt(sig2 + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, train), (mu, sig2)


def bn_backward(dout, g, cache):
    xhat, inv, train = cache
    dg = (dout * xhat).sum(axis=(0, 1, 2))
    db = dout.sum(axis=(0, 1, 2))
    dxhat = dout * g
    if not train:
        return dxhat * inv, dg, db
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dg, db


# -- network ----------------------------------------------------------------

@dataclass
class FeaturePyramid:
    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray
    rep: np.ndarray
    proj: np.ndarray
    pred: np.ndarray | None = None
    cache: dict = field(default=None, repr=False)

    def taps(self) -> dict[str, np.ndarray]:
        return {"f2": self.f2, "f3": self.f3, "f4": self.f4}


def _mlp_forward(params, prefix, x):
    h = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    a = np.maximum(h, 0)
    return a @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"], (x, h, a)


def _mlp_backward(params, prefix, dout, cache, grads):
    x, h, a = cache
    grads[f"{prefix}.w2"] = a.T @ dout
    grads[f"{prefix}.b2"] = dout.sum(axis=0)
    dh = (dout @ params[f"{prefix}.w2"].T) * (h > 0)
    grads[f"{prefix}.w1"] = x.T @ dh
    grads[f"{prefix}.b1"] = dh.sum(axis=0)
    return dh @ params[f"{prefix}.w1"].T


def _run_convs(params, x, names, train, buffers):
    """Run conv/BN/ReLU blocks ``names``; returns output, layer caches, taps."""
    layers = []
    taps = {}
    for name, stride in names:
        w = params[f"{name}.w"]
        y, ccache = conv_forward(x, w, stride)
        mean = var = None
        if not train:
            mean, var = buffers[f"{name}.mean"], buffers[f"{name}.var"]
        z, bcache, (mu, sig2) = bn_forward(y, params[f"{name}.g"], params[f"{name}.b"],
                                          train, mean, var)
        if train and buffers is not None:
            m = y.shape[0] * y.shape[1] * y.shape[2]
            unbiased = sig2 * (m / max(m - 1, 1))
            buffers[f"{name}.mean"] = ((1 - BN_MOMENTUM) * buffers[f"{name}.mean"]
                                       + BN_MOMENTUM * mu).astype(w.dtype)
            buffers[f"{name}.var"] = ((1 - BN_MOMENTUM) * buffers[f"{name}.var"]
                                      + BN_MOMENTUM * unbiased).astype(w.dtype)
        x = np.maximum(z, 0)
        layers.append((name, ccache, bcache, z))
        if name.endswith("c2") and int(name[1]) >= 2:
            taps[f"f{name[1]}"] = x
    return x, layers, taps


def _convs_backward(params, layers, dx, taps_grad, grads):
    for name, ccache, bcache, z in reversed(layers):
        if name.endswith("c2") and int(name[1]) >= 2:
            tap = taps_grad.get(f"f{name[1]}")
            if tap is not None:
                dx = dx + tap
        dz = dx * (z > 0)
        dy, grads[f"{name}.g"], grads[f"{name}.b"] = bn_backward(dz, params[f"{name}.g"], bcache)
        dx, grads[f"{name}.w"] = conv_backward(dy, params[f"{name}.w"], ccache)
    return dx


STAGE4 = [("s4.c1", 2), ("s4.c2", 1)]


def stage4_forward(params, f3, *, train=True, buffers=None):
    """Run only stage 4 on precomputed stage-3 maps; returns ``(f4, cache)``."""
    f4, layers, _ = _run_convs(params, f3.astype(params["s4.c1.w"].dtype, copy=False),
                               STAGE4, train, buffers)
    return f4, layers


def stage4_backward(params, cache, grad_f4) -> dict:
    grads = {}
    _convs_backward(params, cache, grad_f4, {}, grads)
    return grads


def forward(params, images, *, train=True, predictor=True, buffers=None) -> FeaturePyramid:
    """Run the encoder on a batch ``(N, S, S, 3)``.

    In training mode BN uses batch statistics and, when ``buffers`` is given,
    updates its running estimates in place. In eval mode BN reads ``buffers``.
    """
    x = np.asarray(images)
    if x.ndim != 4 or x.shape[-1] != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected a (N, S, S, 3) batch, got {x.shape}")
    if x.shape[1] % 32:
        raise ValueError(f"image side {x.shape[1]} does not fit the encoder")
    if not train and buffers is None:
        raise ValueError("eval mode needs running statistics")
    x = x.astype(params["stem.w"].dtype, copy=False)
    _, layers, taps = _run_convs(params, x, _conv_names(), train, buffers)
    rep = taps["f4"].mean(axis=(1, 2))
    cache = {"layers": layers}
    proj, cache["proj"] = _mlp_forward(params, "proj", rep)
    pred = None
    if predictor:
        pred, cache["pred"] = _mlp_forward(params, "pred", proj)
    return FeaturePyramid(taps["f2"], taps["f3"], taps["f4"], rep, proj, pred, cache)


def backward(params, pyramid: FeaturePyramid, upstream: dict) -> tuple[dict, np.ndarray]:
    """Gradients of a scalar w.r.t. every parameter and the input images.

    ``upstream`` maps any of ``f2, f3, f4, rep, proj, pred`` to the gradient of
    the scalar w.r.t. that output; contributions along different paths add.
    """
    expected = {"f2": pyramid.f2, "f3": pyramid.f3, "f4": pyramid.f4,
                "rep": pyramid.rep, "proj": pyramid.proj, "pred": pyramid.pred}
    for k, g in upstream.items():
        if k not in expected:
            raise ValueError(f"unknown output {k!r}")
        if expected[k] is None or np.shape(g) != expected[k].shape:
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    cache = pyramid.cache
    dproj = upstream.get("proj")
    if "pred" in upstream:
        d = _mlp_backward(params, "pred", upstream["pred"], cache["pred"], grads)
        dproj = d if dproj is None else dproj + d
    drep = upstream.get("rep")
    if dproj is not None:
        d = _mlp_backward(params, "proj", dproj, cache["proj"], grads)
        drep = d if drep is None else drep + d
    f4 = pyramid.f4
    dx = np.zeros_like(f4)
    if drep is not None:
        dx = dx + drep[:, None, None, :] / (f4.shape[1] * f4.shape[2])
    dx = _convs_backward(params, cache["layers"], dx, upstream, grads)
    return grads, dx
