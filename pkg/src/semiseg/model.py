"""Small convolutional segmentation network with handwritten backprop.

Architecture: conv3x3 -> ReLU -> conv3x3 -> ReLU -> two 1x1 heads, a C-way
classifier producing per-pixel logits and a d-dim projection head whose
output is L2-normalized per pixel.  No downsampling: outputs keep the input
resolution.  All arithmetic is float64.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ModelError, OptimizerError

NORM_EPS = 1e-12

PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b",
               "cls.w", "cls.b", "proj.w", "proj.b")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 100


@dataclass
class ForwardTrace:
    params: dict           # parameters the trace was produced with
    x: np.ndarray          # input (3,H,W)
    cols1: np.ndarray      # im2col of x
    pre1: np.ndarray       # conv1 output before ReLU
    a1: np.ndarray
    cols2: np.ndarray      # im2col of a1
    pre2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray     # (C,H,W)
    raw_proj: np.ndarray   # (d,H,W) before normalization
    norms: np.ndarray      # (H,W) L2 norms of raw_proj
    embeddings: np.ndarray  # (d,H,W), unit per pixel (zero where raw is zero)


def init_params(width, num_classes, embed_dim, seed):
    """He-style scaled uniform initialization, zero biases."""
    if width < 1:
        raise ModelError("width must be >= 1")
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "conv1.w": uni((width, 3, 3, 3), 3 * 9),
        "conv1.b": np.zeros(width),
        "conv2.w": uni((width, width, 3, 3), width * 9),
        "conv2.b": np.zeros(width),
        "cls.w": uni((num_classes, width, 1, 1), width),
        "cls.b": np.zeros(num_classes),
        "proj.w": uni((embed_dim, width, 1, 1), width),
        "proj.b": np.zeros(embed_dim),
    }


def num_parameters(params):
    return sum(int(np.asarray(v).size) for v in params.values())


def _im2col(x):
    """(C,H,W) -> (C*9, H*W) patches of the zero-padded 3x3 neighborhoods."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # (C,H,W,3,3) -> (C,3,3,H,W) -> (C*9, H*W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def _col2im(dcols, c, h, w):
    """Adjoint of _im2col: scatter column gradients back to (C,H,W)."""
    dxp = np.zeros((c, h + 2, w + 2))
    d = dcols.reshape(c, 3, 3, h, w)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w] += d[:, ky, kx]
    return dxp[:, 1:h + 1, 1:w + 1]


def forward(params, frame):
    """Run the network on one frame; caches activations for backward."""
    x = np.asarray(frame, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ModelError("frame must be (3,H,W), got %r" % (x.shape,))
    _, h, w = x.shape
    if h < 3 or w < 3:
        raise ModelError("frame spatial size must be >= 3x3")

    cols1 = _im2col(x)
    w1 = params["conv1.w"].reshape(params["conv1.w"].shape[0], -1)
    pre1 = (w1 @ cols1 + params["conv1.b"][:, None]).reshape(-1, h, w)
    a1 = np.maximum(pre1, 0.0)

    cols2 = _im2col(a1)
    w2 = params["conv2.w"].reshape(params["conv2.w"].shape[0], -1)
    pre2 = (w2 @ cols2 + params["conv2.b"][:, None]).reshape(-1, h, w)
    a2 = np.maximum(pre2, 0.0)

    a2f = a2.reshape(a2.shape[0], -1)
    wc = params["cls.w"].reshape(params["cls.w"].shape[0], -1)
    logits = (wc @ a2f + params["cls.b"][:, None]).reshape(-1, h, w)
    wp = params["proj.w"].reshape(params["proj.w"].shape[0], -1)
    raw = (wp @ a2f + params["proj.b"][:, None]).reshape(-1, h, w)

    norms = np.sqrt(np.sum(raw * raw, axis=0))
    emb = raw / np.maximum(norms, NORM_EPS)[None]
    return ForwardTrace(params, x, cols1, pre1, a1, cols2, pre2, a2,
                        logits, raw, norms, emb)


def backward(trace, d_logits, d_embeddings):
    """Gradients of a scalar loss w.r.t. every parameter.

    d_logits / d_embeddings are the upstream gradients w.r.t. the logits and
    the normalized embeddings; either may be None (treated as zero).  The
    normalization Jacobian of the projection head is included.
    """
    params = trace.params
    _, h, w = trace.x.shape
    n_cls = trace.logits.shape[0]
    n_emb = trace.raw_proj.shape[0]
    if d_logits is None:
        d_logits = np.zeros((n_cls, h, w))
    if d_embeddings is None:
        d_embeddings = np.zeros((n_emb, h, w))
    d_logits = np.asarray(d_logits, dtype=np.float64)
    d_embeddings = np.asarray(d_embeddings, dtype=np.float64)
    if d_logits.shape != trace.logits.shape or d_embeddings.shape != trace.raw_proj.shape:
        raise ModelError("upstream gradient shape mismatch")

    # Normalization backward: z = raw / max(|raw|, eps); exact-zero raw maps
    # to the zero vector, whose gradient we define as zero.
    safe = np.maximum(trace.norms, NORM_EPS)
    dot = np.sum(trace.embeddings * d_embeddings, axis=0)
    d_raw = (d_embeddings - trace.embeddings * dot[None]) / safe[None]
    d_raw[:, trace.norms <= NORM_EPS] = 0.0

    grads = {}
    a2f = trace.a2.reshape(trace.a2.shape[0], -1)
    dlog = d_logits.reshape(n_cls, -1)
    draw = d_raw.reshape(n_emb, -1)
    grads["cls.w"] = (dlog @ a2f.T).reshape(params["cls.w"].shape)
    grads["cls.b"] = dlog.sum(axis=1)
    grads["proj.w"] = (draw @ a2f.T).reshape(params["proj.w"].shape)
    grads["proj.b"] = draw.sum(axis=1)

    wc = params["cls.w"].reshape(n_cls, -1)
    wp = params["proj.w"].reshape(n_emb, -1)
    da2 = (wc.T @ dlog + wp.T @ draw).reshape(trace.a2.shape)
    dpre2 = np.where(trace.pre2 > 0.0, da2, 0.0)

    w2 = params["conv2.w"].reshape(params["conv2.w"].shape[0], -1)
    dp2 = dpre2.reshape(dpre2.shape[0], -1)
    grads["conv2.w"] = (dp2 @ trace.cols2.T).reshape(params["conv2.w"].shape)
    grads["conv2.b"] = dp2.sum(axis=1)
    da1 = _col2im(w2.T @ dp2, trace.a1.shape[0], h, w)
    dpre1 = np.where(trace.pre1 > 0.0, da1, 0.0)

    dp1 = dpre1.reshape(dpre1.shape[0], -1)
    grads["conv1.w"] = (dp1 @ trace.cols1.T).reshape(params["conv1.w"].shape)
    grads["conv1.b"] = dp1.sum(axis=1)
    return grads


def softmax(logits, axis=0):
    """Numerically stable softmax along `axis`."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def predict_probs(params, frame):
    """Forward pass followed by per-pixel softmax; returns (C,H,W) probs."""
    return softmax(forward(params, frame).logits, axis=0)


def zero_like_params(params):
    return {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def init_optimizer(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=0.05, warmup_steps=100):
    return OptimizerState(m=zero_like_params(params), v=zero_like_params(params),
                          t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                          weight_decay=weight_decay, warmup_steps=warmup_steps)


def adamw_step(params, grads, state):
    """One AdamW update with decoupled weight decay and linear warmup.

    Effective lr = lr * min(1, (t+1)/warmup_steps); decay is applied to the
    parameters before the Adam update.  Returns (new_params, new_state); the
    inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient for parameter %r" % name)

    t_next = state.t + 1
    if state.warmup_steps > 0:
        lr_eff = state.lr * min(1.0, t_next / state.warmup_steps)
    else:
        lr_eff = state.lr
    bc1 = 1.0 - state.beta1 ** t_next
    bc2 = 1.0 - state.beta2 ** t_next

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.asarray(p).shape:
            raise OptimizerError("gradient shape mismatch for %r" % name)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p_new = p * (1.0 - lr_eff * state.weight_decay)
        p_new = p_new - lr_eff * mhat / (np.sqrt(vhat) + state.eps)
        new_params[name], new_m[name], new_v[name] = p_new, m, v

    new_state = OptimizerState(m=new_m, v=new_v, t=t_next, lr=state.lr,
                               beta1=state.beta1, beta2=state.beta2,
                               eps=state.eps, weight_decay=state.weight_decay,
                               warmup_steps=state.warmup_steps)
    return new_params, new_state
