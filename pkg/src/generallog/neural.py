"""GRU + attention feature extractor, linear heads and BCE losses in float64 numpy.

Gradients are derived by hand, layer by layer (backprop through time for the
GRU), over right-padded batches.  Padded steps carry the previous hidden state
forward and get zero attention weight, so a padded batch computes exactly the
per-sequence quantities.

Parameters live in a flat ``dict[str, np.ndarray]``:

====================  ==========  =========================================
name                  shape       role
====================  ==========  =========================================
``gru.W_z`` etc.      (h, d)      input weights for update/reset/candidate
``gru.U_z`` etc.      (h, h)      recurrent weights
``gru.b_z`` etc.      (h,)        gate biases
``attn.W_a``          (h, h)      attention projection
``attn.b_a``          (h,)        attention bias
``attn.w_a``          (h,)        attention scoring vector
``anomaly.w/b``       (h,)/(1,)   anomaly head
``domain.w/b``        (h,)/(1,)   domain head
====================  ==========  =========================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatch

Params = dict[str, np.ndarray]

GATES = ("z", "r", "h")
EXTRACTOR_NAMES = tuple(
    [f"gru.{k}_{g}" for g in GATES for k in ("W", "U", "b")] + ["attn.W_a", "attn.b_a", "attn.w_a"]
)
ANOMALY_NAMES = ("anomaly.w", "anomaly.b")
DOMAIN_NAMES = ("domain.w", "domain.b")
PARAM_NAMES = EXTRACTOR_NAMES + ANOMALY_NAMES + DOMAIN_NAMES


def param_shapes(d: int, h: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for g in GATES:
        shapes[f"gru.W_{g}"] = (h, d)
        shapes[f"gru.U_{g}"] = (h, h)
        shapes[f"gru.b_{g}"] = (h,)
    shapes["attn.W_a"] = (h, h)
    shapes["attn.b_a"] = (h,)
    shapes["attn.w_a"] = (h,)
    shapes["anomaly.w"] = (h,)
    shapes["anomaly.b"] = (1,)
    shapes["domain.w"] = (h,)
    shapes["domain.b"] = (1,)
    return shapes


def init_params(d: int, h: int, seed: int) -> Params:
    """Weights ~ U(-1/sqrt(h), 1/sqrt(h)) from a seeded generator; biases zero."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(h)
    params = {}
    for name, shape in param_shapes(d, h).items():
        if name.split(".")[1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zeros_like_params(params: Mapping[str, np.ndarray], names=None) -> Params:
    names = params.keys() if names is None else names
    return {n: np.zeros_like(params[n]) for n in names}


def dims(params: Mapping[str, np.ndarray]) -> tuple[int, int]:
    h, d = params["gru.W_z"].shape
    return d, h


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)


def check_shapes(params: Mapping[str, np.ndarray]) -> None:
    d, h = dims(params)
    for name, shape in param_shapes(d, h).items():
        if name in params and params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(z, y):
    """max(z,0) - z*y + log(1 + exp(-|z|)), elementwise."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def bce_with_logits_grad(z, y):
    return sigmoid(z) - y


def head_logit(weight, bias, rep) -> float:
    weight = np.asarray(weight, dtype=np.float64)
    rep = np.asarray(rep, dtype=np.float64)
    if weight.shape != rep.shape:
        raise ShapeMismatch(f"head weight {weight.shape} vs representation {rep.shape}")
    return float(weight @ rep + float(np.asarray(bias).reshape(-1)[0]))


@dataclass
class Batch:
    """Right-padded inputs ``x`` (B, T, d) with a 0/1 step ``mask`` (B, T)."""

    x: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]


def make_batch(sequences: Sequence[np.ndarray]) -> Batch:
    if not sequences:
        raise ValueError("empty batch")
    lengths = [len(s) for s in sequences]
    if min(lengths) == 0:
        raise ValueError("sequences must be non-empty")
    d = sequences[0].shape[1]
    x = np.zeros((len(sequences), max(lengths), d))
    mask = np.zeros((len(sequences), max(lengths)))
    for i, s in enumerate(sequences):
        x[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return Batch(x, mask)


class _Trace:
    """Everything the backward pass needs from one batched forward pass."""

    __slots__ = ("steps", "H", "A", "alpha", "rep", "batch")


# tanh rounds to exactly +-1 in float64 once |a| > ~19; keep states strictly inside (-1, 1).
_OPEN_ONE = float(np.nextafter(1.0, 0.0))


def _forward(params: Mapping[str, np.ndarray], batch: Batch) -> _Trace:
    x, mask = batch.x, batch.mask
    B, T, d = x.shape
    if params["gru.W_z"].shape[1] != d:
        raise ShapeMismatch(f"inputs have d={d}, extractor expects {params['gru.W_z'].shape[1]}")
    h_dim = params["gru.U_z"].shape[0]
    Wz, Uz, bz = params["gru.W_z"], params["gru.U_z"], params["gru.b_z"]
    Wr, Ur, br = params["gru.W_r"], params["gru.U_r"], params["gru.b_r"]
    Wh, Uh, bh = params["gru.W_h"], params["gru.U_h"], params["gru.b_h"]

    h = np.zeros((B, h_dim))
    H = np.zeros((B, T, h_dim))
    steps = []
    for t in range(T):
        xt = x[:, t]
        m = mask[:, t : t + 1]
        z = sigmoid(xt @ Wz.T + h @ Uz.T + bz)
        r = sigmoid(xt @ Wr.T + h @ Ur.T + br)
        hc = np.clip(np.tanh(xt @ Wh.T + (r * h) @ Uh.T + bh), -_OPEN_ONE, _OPEN_ONE)
        hn = np.clip((1.0 - z) * h + z * hc, -_OPEN_ONE, _OPEN_ONE)
        steps.append((xt, h, z, r, hc, m))
        h = m * hn + (1.0 - m) * h
        H[:, t] = h
    check_finite("gru hidden states", H)

    A = np.tanh(H @ params["attn.W_a"].T + params["attn.b_a"])
    scores = A @ params["attn.w_a"]
    scores = np.where(mask > 0, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    alpha = e / e.sum(axis=1, keepdims=True)
    rep = np.einsum("bt,bth->bh", alpha, H)
    check_finite("attention output", rep)

    tr = _Trace()
    tr.steps, tr.H, tr.A, tr.alpha, tr.rep, tr.batch = steps, H, A, alpha, rep, batch
    return tr


def gru_forward(params: Mapping[str, np.ndarray], inputs) -> np.ndarray:
    """Hidden states (T, h) for one sequence of inputs (T, d), starting from h_0 = 0."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ShapeMismatch("inputs must be a non-empty (T, d) array")
    return _forward(params, make_batch([inputs])).H[0]


def attention_pool(params: Mapping[str, np.ndarray], hiddens) -> tuple[np.ndarray, np.ndarray]:
    """Additive attention: score_t = w_a . tanh(W_a h_t + b_a), softmax over t."""
    H = np.asarray(hiddens, dtype=np.float64)
    if H.ndim != 2 or len(H) == 0:
        raise ShapeMismatch("hiddens must be a non-empty (T, h) array")
    if H.shape[1] != params["attn.W_a"].shape[0]:
        raise ShapeMismatch(f"hidden size {H.shape[1]} vs attention {params['attn.W_a'].shape[0]}")
    A = np.tanh(H @ params["attn.W_a"].T + params["attn.b_a"])
    s = A @ params["attn.w_a"]
    e = np.exp(s - s.max())
    w = e / e.sum()
    return w @ H, w


def features(params: Mapping[str, np.ndarray], batch: Batch) -> np.ndarray:
    return _forward(params, batch).rep


def logits(params: Mapping[str, np.ndarray], batch: Batch, head: str = "anomaly") -> np.ndarray:
    rep = features(params, batch)
    return rep @ params[f"{head}.w"] + params[f"{head}.b"][0]


@dataclass
class LossValue:
    total: float
    class_loss: float
    domain_loss: float


def objective(
    params: Mapping[str, np.ndarray],
    batch: Batch,
    class_labels,
    domain_labels,
    class_weight: float,
    domain_weight: float,
    wrt: Sequence[str] | None = None,
    domain_cap: float | None = None,
) -> tuple[LossValue, Params]:
    """Value and gradients of ``class_weight * L_c + domain_weight * L_ad``.

    ``class_labels`` holds 0/1 for labelled items and -1 for unlabelled ones;
    ``L_c`` is the mean anomaly-head BCE over labelled items and ``L_ad`` the
    mean domain-head BCE over all items.  ``wrt`` restricts which gradients are
    returned (all parameters by default).  With ``domain_cap`` the domain term
    uses ``min(L_ad, domain_cap)``: once the batch loss reaches the cap it
    contributes a constant and no gradient.
    """
    wrt = tuple(PARAM_NAMES if wrt is None else wrt)
    y = np.asarray(class_labels, dtype=np.float64)
    yd = np.asarray(domain_labels, dtype=np.float64)
    tr = _forward(params, batch)
    rep = tr.rep
    B = batch.size

    labelled = y >= 0
    n_lab = int(labelled.sum())
    zc = rep @ params["anomaly.w"] + params["anomaly.b"][0]
    zd = rep @ params["domain.w"] + params["domain.b"][0]
    yc = np.where(labelled, y, 0.0)
    L_c = float(bce_with_logits(zc[labelled], yc[labelled]).mean()) if n_lab else 0.0
    L_ad = float(bce_with_logits(zd, yd).mean())
    capped = domain_cap is not None and L_ad >= domain_cap
    if capped:
        domain_weight_eff = 0.0
        total = class_weight * L_c + domain_weight * domain_cap
    else:
        domain_weight_eff = domain_weight
        total = class_weight * L_c + domain_weight * L_ad
    value = LossValue(total, L_c, L_ad)
    if not math.isfinite(total):
        raise NonFiniteError("loss")

    dzc = np.zeros(B)
    if n_lab:
        dzc[labelled] = class_weight * bce_with_logits_grad(zc[labelled], yc[labelled]) / n_lab
    dzd = domain_weight_eff * bce_with_logits_grad(zd, yd) / B

    grads: Params = {}
    if "anomaly.w" in wrt:
        grads["anomaly.w"] = dzc @ rep
    if "anomaly.b" in wrt:
        grads["anomaly.b"] = np.array([dzc.sum()])
    if "domain.w" in wrt:
        grads["domain.w"] = dzd @ rep
    if "domain.b" in wrt:
        grads["domain.b"] = np.array([dzd.sum()])

    if any(n in EXTRACTOR_NAMES for n in wrt):
        drep = np.outer(dzc, params["anomaly.w"]) + np.outer(dzd, params["domain.w"])
        ext = _extractor_backward(params, tr, drep)
        for n in EXTRACTOR_NAMES:
            if n in wrt:
                grads[n] = ext[n]

    for n, g in grads.items():
        check_finite(f"gradient of {n}", g)
    return value, grads


def _extractor_backward(params, tr: _Trace, drep: np.ndarray) -> Params:
    H, A, alpha = tr.H, tr.A, tr.alpha
    g = zeros_like_params(params, EXTRACTOR_NAMES)

    # attention pooling
    dalpha = np.einsum("bth,bh->bt", H, drep)
    dH = alpha[:, :, None] * drep[:, None, :]
    ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    g["attn.w_a"] = np.einsum("bt,bth->h", ds, A)
    du = ds[:, :, None] * params["attn.w_a"] * (1.0 - A * A)
    g["attn.W_a"] = np.einsum("bti,btj->ij", du, H)
    g["attn.b_a"] = du.sum(axis=(0, 1))
    dH = dH + du @ params["attn.W_a"]

    # backprop through time
    Uz, Ur, Uh = params["gru.U_z"], params["gru.U_r"], params["gru.U_h"]
    carry = np.zeros_like(drep)
    for t in range(H.shape[1] - 1, -1, -1):
        xt, hprev, z, r, hc, m = tr.steps[t]
        dh = dH[:, t] + carry
        dhn = m * dh
        carry = (1.0 - m) * dh + dhn * (1.0 - z)
        dz = dhn * (hc - hprev)
        da_h = dhn * z * (1.0 - hc * hc)
        g["gru.W_h"] += da_h.T @ xt
        g["gru.U_h"] += da_h.T @ (r * hprev)
        g["gru.b_h"] += da_h.sum(axis=0)
        drh = da_h @ Uh
        carry += drh * r
        da_r = drh * hprev * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        g["gru.W_r"] += da_r.T @ xt
        g["gru.U_r"] += da_r.T @ hprev
        g["gru.b_r"] += da_r.sum(axis=0)
        g["gru.W_z"] += da_z.T @ xt
        g["gru.U_z"] += da_z.T @ hprev
        g["gru.b_z"] += da_z.sum(axis=0)
        carry += da_z @ Uz + da_r @ Ur
    return g


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """Return new parameters ``p - lr * g`` for every name in ``grads``; others are shared."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = dict(params)
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise ShapeMismatch(f"{name}: parameter {params[name].shape} vs gradient {np.shape(g)}")
        out[name] = params[name] - lr * g
    return out


def add_grads(acc: Params | None, grads: Mapping[str, np.ndarray]) -> Params:
    if acc is None:
        return {n: g.copy() for n, g in grads.items()}
    for n, g in grads.items():
        acc[n] = acc[n] + g
    return acc


CKPT_HEADER = "GENERALLOG-CKPT v1"


def write_checkpoint(path, params: Mapping[str, np.ndarray], seed: int, extra: Mapping[str, np.ndarray] | None = None) -> None:
    tensors = dict(params)
    tensors.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CKPT_HEADER + "\n")
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(f"{name} {arr.ndim} {' '.join(str(s) for s in arr.shape)}\n")
            fh.write(" ".join(format(float(v), ".17g") for v in arr.ravel()) + "\n")
        fh.write(f"seed {seed}\n")


def read_checkpoint(path) -> tuple[Params, int]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CKPT_HEADER:
        raise ValueError(f"{path}: not a checkpoint")
    tensors: Params = {}
    seed = None
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "seed":
            seed = int(parts[1])
            break
        name, ndims = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2 : 2 + ndims])
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        tensors[name] = values.reshape(shape)
        i += 2
    if seed is None:
        raise ValueError(f"{path}: missing seed line")
    return tensors, seed
