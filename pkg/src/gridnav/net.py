"""Goal-conditioned recurrent policy with exact backpropagation through time.

Architecture, applied at every step ``t`` to an input row ``x_t``::

    e_t = tanh(... tanh(x_t W_1 + b_1) ... W_L + b_L)        encoder MLP
    z_t = sigmoid(e_t Wx_z + h_{t-1} Wh_z + b_z)             update gate
    r_t = sigmoid(e_t Wx_r + h_{t-1} Wh_r + b_r)             reset gate
    n_t = tanh(e_t Wx_n + (r_t * h_{t-1}) Wh_n + b_n)        candidate
    h_t = (1 - z_t) * n_t + z_t * h_{t-1}
    logits_t = h_t W_pi + b_pi
    value_t  = h_t W_v + b_v                                 (actor-critic only)

``h_0 = 0`` at the start of every episode. All parameters live in one flat
float array; :class:`ParamLayout` maps named segments onto views of it.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gridnav.features import input_dim

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss, gradient or network output contained NaN or inf."""


@dataclass(frozen=True)
class NetworkSpec:
    patch_size: int = 5
    encoder_widths: tuple[int, ...] = (64,)
    hidden_size: int = 64
    n_actions: int = 4
    value_head: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.patch_size < 1 or self.hidden_size < 1 or self.n_actions < 1:
            raise ValueError("all widths must be >= 1")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be >= 1")

    @property
    def input_dim(self) -> int:
        return input_dim(self.patch_size)

    @property
    def heads(self) -> tuple[str, ...]:
        return ("policy", "value") if self.value_head else ("policy",)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "encoder_widths": tuple(d["encoder_widths"])})


def param_count(spec: NetworkSpec) -> int:
    """Closed form: encoder + GRU (3 gates) + policy head [+ value head]."""
    widths = (spec.input_dim,) + spec.encoder_widths
    enc = sum(a * b + b for a, b in zip(widths, widths[1:]))
    e, h, a = widths[-1], spec.hidden_size, spec.n_actions
    gru = 3 * (e * h + h * h + h)
    pi = h * a + a
    value = h + 1 if spec.value_head else 0
    return enc + gru + pi + value


class ParamLayout:
    """Named segments of the flat parameter vector for one :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        widths = (spec.input_dim,) + spec.encoder_widths
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            shapes += [(f"enc{i}_W", (a, b)), (f"enc{i}_b", (b,))]
        e, h, na = widths[-1], spec.hidden_size, spec.n_actions
        shapes += [("gru_Wx", (e, 3 * h)), ("gru_Wh", (h, 3 * h)), ("gru_b", (3 * h,))]
        shapes += [("pi_W", (h, na)), ("pi_b", (na,))]
        if spec.value_head:
            shapes += [("v_W", (h, 1)), ("v_b", (1,))]
        self.shapes = dict(shapes)
        self.slices: dict[str, slice] = {}
        offset = 0
        for name, shape in shapes:
            size = math.prod(shape)
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset
        self.n_encoder = len(spec.encoder_widths)

    def views(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        if theta.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {theta.shape}, expected ({self.size},)")
        return {name: theta[sl].reshape(self.shapes[name]) for name, sl in self.slices.items()}


_LAYOUTS: dict[NetworkSpec, ParamLayout] = {}


def layout(spec: NetworkSpec) -> ParamLayout:
    lay = _LAYOUTS.get(spec)
    if lay is None:
        lay = _LAYOUTS[spec] = ParamLayout(spec)
    return lay


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, policy head scaled by 0.01."""
    lay = layout(spec)
    theta = np.zeros(lay.size, dtype=dtype)
    p = lay.views(theta)
    for name, shape in lay.shapes.items():
        if name.endswith("_b"):
            continue
        bound = 1.0 / math.sqrt(shape[0])
        if name == "pi_W":
            bound *= 0.01
        p[name][...] = rng.uniform(-bound, bound, size=shape)
    return theta


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def log_prob(logits: np.ndarray, action) -> np.ndarray | float:
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    if lp.ndim == 1:
        return float(lp[int(action)])
    return np.take_along_axis(lp, np.asarray(action)[..., None], axis=-1)[..., 0]


def entropy(logits: np.ndarray) -> np.ndarray | float:
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    h = -(np.exp(lp) * lp).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    return int(actions_from_uniform(np.asarray(logits)[None, :], np.array([rng.random()]))[0])


def actions_from_uniform(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical sampling: one uniform draw per row."""
    cdf = np.cumsum(softmax(logits), axis=-1)
    return (cdf[:, :-1] <= u[:, None]).sum(axis=-1)


# ------------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    logits: np.ndarray
    value: np.ndarray | None
    next_hidden: np.ndarray


def initial_state(spec: NetworkSpec, batch: int | None = None, dtype=np.float64) -> np.ndarray:
    shape = (spec.hidden_size,) if batch is None else (batch, spec.hidden_size)
    return np.zeros(shape, dtype=dtype)


def _encode(p: dict, n_layers: int, x: np.ndarray) -> np.ndarray:
    a = x
    for i in range(n_layers):
        a = np.tanh(a @ p[f"enc{i}_W"] + p[f"enc{i}_b"])
    return a


def _gru_cell(p: dict, hs: int, gx: np.ndarray, h: np.ndarray) -> np.ndarray:
    wh = p["gru_Wh"]
    zr = sigmoid(gx[..., : 2 * hs] + h @ wh[:, : 2 * hs])
    z, r = zr[..., :hs], zr[..., hs:]
    n = np.tanh(gx[..., 2 * hs :] + (r * h) @ wh[:, 2 * hs :])
    return n + z * (h - n)


def forward(theta: np.ndarray, spec: NetworkSpec, x: np.ndarray, hidden: np.ndarray) -> ForwardOutput:
    """One recurrent step for a single input row ``(D,)`` or a batch ``(B, D)``."""
    lay = layout(spec)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != {spec.input_dim}")
    p = lay.views(theta)
    e = _encode(p, lay.n_encoder, x)
    h = _gru_cell(p, spec.hidden_size, e @ p["gru_Wx"] + p["gru_b"], hidden)
    logits = h @ p["pi_W"] + p["pi_b"]
    value = (h @ p["v_W"] + p["v_b"])[..., 0] if spec.value_head else None
    return ForwardOutput(logits, value, h)


@dataclass
class Unroll:
    """Activations of a full sequence forward pass, kept for the backward pass."""

    enc: list[np.ndarray]  # encoder activations, index 0 is the input
    h_prev: np.ndarray  # (T, B, H) hidden state entering each step
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    hidden: np.ndarray  # (T, B, H) output hidden state
    logits: np.ndarray  # (T, B, A)
    values: np.ndarray | None  # (T, B)


def unroll(theta: np.ndarray, spec: NetworkSpec, x: np.ndarray, h0: np.ndarray | None = None) -> Unroll:
    """Forward a padded batch of sequences ``x`` with shape (T, B, D)."""
    lay = layout(spec)
    p = lay.views(theta)
    T, B, D = x.shape
    if D != spec.input_dim:
        raise ValueError(f"input dimension {D} != {spec.input_dim}")
    hs = spec.hidden_size
    enc = [x]
    for i in range(lay.n_encoder):
        enc.append(np.tanh(enc[-1] @ p[f"enc{i}_W"] + p[f"enc{i}_b"]))
    gx = enc[-1] @ p["gru_Wx"] + p["gru_b"]
    wh_zr = p["gru_Wh"][:, : 2 * hs]
    wh_n = p["gru_Wh"][:, 2 * hs :]
    h_prev = np.empty((T, B, hs), dtype=theta.dtype)
    zs = np.empty_like(h_prev)
    rs = np.empty_like(h_prev)
    ns = np.empty_like(h_prev)
    out = np.empty_like(h_prev)
    h = np.zeros((B, hs), dtype=theta.dtype) if h0 is None else h0
    for t in range(T):
        h_prev[t] = h
        zr = sigmoid(gx[t, :, : 2 * hs] + h @ wh_zr)
        z, r = zr[:, :hs], zr[:, hs:]
        n = np.tanh(gx[t, :, 2 * hs :] + (r * h) @ wh_n)
        h = n + z * (h - n)
        zs[t], rs[t], ns[t], out[t] = z, r, n, h
    logits = out @ p["pi_W"] + p["pi_b"]
    values = (out @ p["v_W"] + p["v_b"])[..., 0] if spec.value_head else None
    return Unroll(enc, h_prev, zs, rs, ns, out, logits, values)


def backward(theta: np.ndarray, spec: NetworkSpec, u: Unroll, dlogits: np.ndarray, dvalues: np.ndarray | None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameters, given its
    gradients w.r.t. every step's logits (T, B, A) and values (T, B)."""
    lay = layout(spec)
    p = lay.views(theta)
    grad = np.zeros_like(theta)
    g = lay.views(grad)
    T, B, hs = u.hidden.shape
    flat_h = u.hidden.reshape(T * B, hs)

    g["pi_W"][...] = flat_h.T @ dlogits.reshape(T * B, -1)
    g["pi_b"][...] = dlogits.reshape(T * B, -1).sum(axis=0)
    dh_out = dlogits @ p["pi_W"].T
    if spec.value_head and dvalues is not None:
        dv = dvalues.reshape(T * B, 1)
        g["v_W"][...] = flat_h.T @ dv
        g["v_b"][...] = dv.sum(axis=0)
        dh_out = dh_out + dvalues[..., None] * p["v_W"][:, 0]

    wh_zr = p["gru_Wh"][:, : 2 * hs]
    wh_n = p["gru_Wh"][:, 2 * hs :]
    dgx = np.empty((T, B, 3 * hs), dtype=theta.dtype)
    dh_next = np.zeros((B, hs), dtype=theta.dtype)
    for t in range(T - 1, -1, -1):
        z, r, n, hp = u.z[t], u.r[t], u.n[t], u.h_prev[t]
        dh = dh_out[t] + dh_next
        dan = dh * (1.0 - z) * (1.0 - n * n)
        dhr = dan @ wh_n.T
        daz = dh * (hp - n) * z * (1.0 - z)
        dar = dhr * hp * r * (1.0 - r)
        dgx[t, :, :hs] = daz
        dgx[t, :, hs : 2 * hs] = dar
        dgx[t, :, 2 * hs :] = dan
        dh_next = dh * z + dhr * r + dgx[t, :, : 2 * hs] @ wh_zr.T

    flat_hp = u.h_prev.reshape(T * B, hs)
    g["gru_Wh"][:, : 2 * hs] = flat_hp.T @ dgx[..., : 2 * hs].reshape(T * B, 2 * hs)
    g["gru_Wh"][:, 2 * hs :] = (u.r * u.h_prev).reshape(T * B, hs).T @ dgx[..., 2 * hs :].reshape(T * B, hs)
    flat_dgx = dgx.reshape(T * B, 3 * hs)
    e_last = u.enc[-1]
    g["gru_Wx"][...] = e_last.reshape(T * B, -1).T @ flat_dgx
    g["gru_b"][...] = flat_dgx.sum(axis=0)

    da = dgx @ p["gru_Wx"].T
    for i in range(lay.n_encoder - 1, -1, -1):
        a_out, a_in = u.enc[i + 1], u.enc[i]
        dpre = (da * (1.0 - a_out * a_out)).reshape(T * B, -1)
        g[f"enc{i}_W"][...] = a_in.reshape(T * B, -1).T @ dpre
        g[f"enc{i}_b"][...] = dpre.sum(axis=0)
        if i:
            da = (dpre @ p[f"enc{i}_W"].T).reshape(T, B, -1)
    return grad


# -------------------------------------------------------------------- losses


@dataclass
class SequenceBatch:
    """Padded episodes, time-major. ``weights`` is 0 on padding."""

    features: np.ndarray  # (T, B, D)
    actions: np.ndarray  # (T, B) int
    weights: np.ndarray  # (T, B)
    old_logp: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def from_episodes(cls, features: list[np.ndarray], actions: list[np.ndarray], **per_step) -> "SequenceBatch":
        T = max(len(a) for a in actions)
        B = len(actions)
        D = features[0].shape[-1]
        x = np.zeros((T, B, D))
        act = np.zeros((T, B), dtype=np.int64)
        w = np.zeros((T, B))
        extra = {k: np.zeros((T, B)) for k, v in per_step.items() if v is not None}
        for b, (f, a) in enumerate(zip(features, actions)):
            n = len(a)
            x[:n, b] = f[:n]
            act[:n, b] = a
            w[:n, b] = 1.0
            for k in extra:
                extra[k][:n, b] = per_step[k][b]
        return cls(x, act, w, **extra)


@dataclass(frozen=True)
class BCLoss:
    """Mean negative log-likelihood of the demonstrated actions."""

    def evaluate(self, logits, values, batch: SequenceBatch):
        w = batch.weights
        norm = w.sum() or 1.0
        lp = log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(lp)
        np.put_along_axis(onehot, batch.actions[..., None], 1.0, axis=-1)
        logp_a = (lp * onehot).sum(axis=-1)
        loss = -(w * logp_a).sum() / norm
        dlogits = (w / norm)[..., None] * (p - onehot)
        return loss, dlogits, None, {"nll": loss}


@dataclass(frozen=True)
class PPOLoss:
    """Negated clipped surrogate plus value regression minus entropy bonus."""

    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01

    def evaluate(self, logits, values, batch: SequenceBatch):
        w = batch.weights
        norm = w.sum() or 1.0
        lp = log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(lp)
        np.put_along_axis(onehot, batch.actions[..., None], 1.0, axis=-1)
        logp_a = (lp * onehot).sum(axis=-1)
        ratio = np.exp(logp_a - batch.old_logp)
        adv = batch.advantages
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - self.clip, 1.0 + self.clip) * adv
        surr = np.minimum(unclipped, clipped)
        ent = -(p * lp).sum(axis=-1)
        verr = values - batch.returns

        surrogate = (w * surr).sum() / norm
        value_mse = (w * verr * verr).sum() / norm
        mean_ent = (w * ent).sum() / norm
        loss = -surrogate + self.value_coef * value_mse - self.entropy_coef * mean_ent

        scale = w / norm
        # d surr / d logp is ratio*adv on the unclipped branch, 0 when clipped
        dlogp = -scale * np.where(unclipped <= clipped, unclipped, 0.0)
        dlogits = dlogp[..., None] * (onehot - p)
        dlogits += (self.entropy_coef * scale)[..., None] * p * (lp + ent[..., None])
        dvalues = 2.0 * self.value_coef * scale * verr
        stats = {
            "surrogate": surrogate,
            "value_mse": value_mse,
            "entropy": mean_ent,
            "clip_frac": float((w * (np.abs(ratio - 1.0) > self.clip)).sum() / norm),
            "approx_kl": float((w * (batch.old_logp - logp_a)).sum() / norm),
            "clip_dominance": bool(np.all(surr <= unclipped + 0.0) and np.all(surr <= clipped + 0.0)),
            "max_ratio_dev": float(np.max(np.abs(ratio - 1.0) * (w > 0))) if w.size else 0.0,
        }
        return loss, dlogits, dvalues, stats


def sequence_gradient(theta: np.ndarray, spec: NetworkSpec, batch: SequenceBatch, loss_spec):
    """Loss and exact gradient over full unrolled sequences.

    Returns ``(loss, grad, stats)``. Raises :class:`NonFiniteError` when the
    loss or gradient is not finite.
    """
    if isinstance(loss_spec, PPOLoss) and not spec.value_head:
        raise ValueError("PPO loss needs a value head")
    # overflow is reported as NonFiniteError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        u = unroll(theta, spec, batch.features)
        loss, dlogits, dvalues, stats = loss_spec.evaluate(u.logits, u.values, batch)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss}")
        grad = backward(theta, spec, u, dlogits, dvalues)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return float(loss), grad, stats


# ------------------------------------------------------------------ optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamConfig = AdamConfig()):
    """Bias-corrected Adam; returns new ``(theta, state)`` without mutating inputs."""
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    new_theta = theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_theta, AdamState(m, v, t)


def clip_by_global_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


# ---------------------------------------------------------------- checkpoints


def _pack(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unpack(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


@dataclass
class Checkpoint:
    spec: NetworkSpec
    theta: np.ndarray
    adam: AdamState | None = None
    global_step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        lay = layout(self.spec)
        d = {
            "format": "gridnav.checkpoint",
            "version": CHECKPOINT_VERSION,
            "network": self.spec.to_dict(),
            "segments": {name: _pack(self.theta[sl]) for name, sl in lay.slices.items()},
            "global_step": self.global_step,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }
        if self.adam is not None:
            d["adam"] = {"m": _pack(self.adam.m), "v": _pack(self.adam.v), "step": self.adam.step}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != "gridnav.checkpoint" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 gridnav checkpoint")
        spec = NetworkSpec.from_dict(d["network"])
        lay = layout(spec)
        theta = np.zeros(lay.size)
        for name, sl in lay.slices.items():
            seg = _unpack(d["segments"][name])
            if seg.size != sl.stop - sl.start:
                raise ValueError(f"segment {name} has {seg.size} values, expected {sl.stop - sl.start}")
            theta[sl] = seg
        adam = None
        if "adam" in d:
            adam = AdamState(_unpack(d["adam"]["m"]), _unpack(d["adam"]["v"]), int(d["adam"]["step"]))
        return cls(spec, theta, adam, int(d.get("global_step", 0)), d.get("rng_state"), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
