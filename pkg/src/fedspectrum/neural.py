"""Small numpy neural-network kernel: LSTM encoder with dueling-Q, softmax-actor or
critic heads, exact backpropagation, SGD/Adam, federated averaging and
low-precision parameter quantization.

All trainable parameters live in one flat float64 vector.  The layout is fixed
by :func:`layout` and is the checkpoint/exchange order:

``lstm.W`` (input_width + hidden, 4 * hidden), ``lstm.b`` (4 * hidden), gates in
the column order input, forget, output, candidate; then the head layers in the
order listed by :func:`layout`, each as ``W`` (fan_in, fan_out) followed by ``b``.
Every matrix is stored row-major.
"""
from __future__ import annotations

import functools
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numba
import numpy as np

from .errors import InvalidParameterError

HEADS = ("dueling", "actor", "critic", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of one network.

    ``head`` is ``"dueling"`` (Q-values), ``"actor"`` (softmax action scores),
    ``"critic"`` (scalar state value) or ``"linear"`` (bias-free Q-table on the
    most recent observation, no LSTM; handy as a tabular baseline).
    """

    input_width: int
    seq_len: int
    head: str = "dueling"
    n_actions: int = 1
    lstm_hidden: int = 20
    adv_width: int = 10
    val_width: int = 10
    actor_width: int = 10
    critic_width: int = 5

    def __post_init__(self):
        if self.head not in HEADS:
            raise InvalidParameterError(f"unknown head {self.head!r}")
        widths = [self.input_width, self.seq_len, self.n_actions]
        if self.head != "linear":
            widths.append(self.lstm_hidden)
        if self.head == "dueling":
            widths += [self.adv_width, self.val_width]
        if self.head == "critic":
            widths.append(self.critic_width)
        if min(widths) < 1 or (self.head == "actor" and self.actor_width < 0):
            raise InvalidParameterError("all network widths must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 1 if self.head == "critic" else self.n_actions

    def digest(self) -> bytes:
        text = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(text).digest()


def dqn_spec(input_width, seq_len, n_actions, **kw) -> NetworkSpec:
    return NetworkSpec(input_width, seq_len, "dueling", n_actions, **kw)


def actor_spec(input_width, seq_len, n_actions, **kw) -> NetworkSpec:
    return NetworkSpec(input_width, seq_len, "actor", n_actions, **kw)


def critic_spec(input_width, seq_len, **kw) -> NetworkSpec:
    return NetworkSpec(input_width, seq_len, "critic", 1, **kw)


def layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    if spec.head == "linear":
        return [("lin.W", (spec.input_width, spec.n_actions))]
    H = spec.lstm_hidden
    out = [("lstm.W", (spec.input_width + H, 4 * H)), ("lstm.b", (4 * H,))]

    def dense(name, n_in, n_out):
        out.extend([(f"{name}.W", (n_in, n_out)), (f"{name}.b", (n_out,))])

    if spec.head == "dueling":
        dense("adv1", H, spec.adv_width)
        dense("val1", H, spec.val_width)
        dense("adv2", spec.adv_width, spec.n_actions)
        dense("val2", spec.val_width, 1)
    elif spec.head == "actor":
        if spec.actor_width:
            dense("hid", H, spec.actor_width)
            dense("out", spec.actor_width, spec.n_actions)
        else:
            dense("out", H, spec.n_actions)
    else:
        dense("hid", H, spec.critic_width)
        dense("out", spec.critic_width, 1)
    return out


@functools.lru_cache(maxsize=None)
def _slices(spec: NetworkSpec):
    out, i = [], 0
    for name, shape in layout(spec):
        n = int(np.prod(shape))
        out.append((name, i, i + n, shape))
        i += n
    return tuple(out), i


def param_count(spec: NetworkSpec) -> int:
    return _slices(spec)[1]


def unpack(spec: NetworkSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into a flat parameter (or gradient) vector."""
    slices, n = _slices(spec)
    if flat.shape != (n,):
        raise InvalidParameterError(
            f"parameter vector has shape {flat.shape}, expected ({n},)")
    return {name: flat[a:b].reshape(shape) for name, a, b, shape in slices}


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included."""
    flat = np.empty(param_count(spec))
    views = unpack(spec, flat)
    for name, shape in layout(spec):
        layer = name.split(".")[0]
        fan_in = layout_fan_in(spec, layer)
        bound = 1.0 / np.sqrt(fan_in)
        views[name][...] = rng.uniform(-bound, bound, shape)
    return flat


def layout_fan_in(spec: NetworkSpec, layer: str) -> int:
    for name, shape in layout(spec):
        if name == f"{layer}.W":
            return shape[0]
    raise KeyError(layer)


# ---------------------------------------------------------------- forward/backward

def _as_batch(spec: NetworkSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (spec.seq_len, spec.input_width):
        raise InvalidParameterError(
            f"state batch has shape {X.shape}, expected (B, {spec.seq_len}, {spec.input_width})")
    return X


@numba.njit(cache=True)
def _lstm_recur(XW, Wh):
    # XW: (T, B, 4H) input projections plus bias; returns per-step states and activations.
    # tanh is evaluated through exp, which is much cheaper than the scalar libm tanh here.
    T, B, H4 = XW.shape
    H = H4 // 4
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    acts = np.empty((T, B, H4))
    tcs = np.empty((T, B, H))
    for t in range(T):
        z = hs[t] @ Wh
        for b in range(B):
            for j in range(H4):
                v = z[b, j] + XW[t, b, j]
                if j < 3 * H:
                    acts[t, b, j] = 1.0 / (1.0 + np.exp(-v))
                else:
                    acts[t, b, j] = 2.0 / (1.0 + np.exp(-2.0 * v)) - 1.0
            for j in range(H):
                c = acts[t, b, H + j] * cs[t, b, j] + acts[t, b, j] * acts[t, b, 3 * H + j]
                tc = 2.0 / (1.0 + np.exp(-2.0 * c)) - 1.0
                cs[t + 1, b, j] = c
                tcs[t, b, j] = tc
                hs[t + 1, b, j] = acts[t, b, 2 * H + j] * tc
    return hs, cs, acts, tcs


@numba.njit(cache=True)
def _lstm_recur_grad(WhT, hs, cs, acts, tcs, dh_last):
    T, B, H4 = acts.shape
    H = H4 // 4
    dZ = np.empty((T, B, H4))
    dWh = np.zeros((H, H4))
    dc = np.zeros((B, H))
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                i = acts[t, b, j]
                f = acts[t, b, H + j]
                o = acts[t, b, 2 * H + j]
                g = acts[t, b, 3 * H + j]
                tc = tcs[t, b, j]
                d = dc[b, j] + dh[b, j] * o * (1.0 - tc * tc)
                dZ[t, b, j] = d * g * i * (1.0 - i)
                dZ[t, b, H + j] = d * cs[t, b, j] * f * (1.0 - f)
                dZ[t, b, 2 * H + j] = dh[b, j] * tc * o * (1.0 - o)
                dZ[t, b, 3 * H + j] = d * i * (1.0 - g * g)
                dc[b, j] = d * f
        dWh += np.ascontiguousarray(hs[t].T) @ dZ[t]
        dh = dZ[t] @ WhT
    return dZ, dWh


def _lstm_forward(p, X, H):
    B, T, D = X.shape
    W, b = p["lstm.W"], p["lstm.b"]
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(T * B, D)
    XW = (Xt @ W[:D] + b).reshape(T, B, 4 * H)
    hs, cs, acts, tcs = _lstm_recur(XW, np.ascontiguousarray(W[D:]))
    return hs[T], (Xt, hs, cs, acts, tcs)


def _lstm_backward(p, g, cache, dh, H):
    Xt, hs, cs, acts, tcs = cache
    D = Xt.shape[1]
    WhT = np.ascontiguousarray(p["lstm.W"][D:].T)
    dZ, dWh = _lstm_recur_grad(WhT, hs, cs, acts, tcs, np.ascontiguousarray(dh))
    dZf = dZ.reshape(-1, 4 * H)
    g["lstm.W"][:D] = Xt.T @ dZf
    g["lstm.W"][D:] = dWh
    g["lstm.b"][...] = dZf.sum(axis=0)


class Cache(NamedTuple):
    lstm: tuple
    feat: np.ndarray
    hidden: tuple
    out: np.ndarray


def forward(spec: NetworkSpec, params: np.ndarray, X, return_cache: bool = False):
    """Evaluate the network on a batch of state windows ``X`` of shape ``(B, T, D)``.

    Returns Q-values ``(B, n_actions)`` for ``dueling``/``linear``, action
    probabilities ``(B, n_actions)`` for ``actor`` and values ``(B,)`` for
    ``critic``.  A single window ``(T, D)`` is treated as a batch of one.
    """
    X = _as_batch(spec, X)
    p = unpack(spec, params)
    if spec.head == "linear":
        feat = X[:, -1]
        out = feat @ p["lin.W"]
        return (out, Cache((), feat, (), out)) if return_cache else out

    h, lc = _lstm_forward(p, X, spec.lstm_hidden)
    if spec.head == "dueling":
        ah = np.tanh(h @ p["adv1.W"] + p["adv1.b"])
        vh = np.tanh(h @ p["val1.W"] + p["val1.b"])
        A = ah @ p["adv2.W"] + p["adv2.b"]
        V = vh @ p["val2.W"] + p["val2.b"]
        out = V + A - A.mean(axis=1, keepdims=True)
        hidden = (ah, vh)
    elif spec.head == "actor":
        if spec.actor_width:
            hh = np.tanh(h @ p["hid.W"] + p["hid.b"])
        else:
            hh = h
        logits = hh @ p["out.W"] + p["out.b"]
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)
        hidden = (hh,)
    else:
        hh = np.tanh(h @ p["hid.W"] + p["hid.b"])
        out = (hh @ p["out.W"] + p["out.b"])[:, 0]
        hidden = (hh,)
    if return_cache:
        return out, Cache(lc, h, hidden, out)
    return out


def backward_from_output(spec: NetworkSpec, params: np.ndarray, cache: Cache,
                         dout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameters given ``dL/d(output)``.

    ``dout`` is w.r.t. Q-values for ``dueling``/``linear``, the pre-softmax
    logits for ``actor`` and the value for ``critic``.
    """
    p = unpack(spec, params)
    grad = np.zeros_like(params)
    g = unpack(spec, grad)
    if spec.head == "linear":
        g["lin.W"][...] = cache.feat.T @ dout
        return grad

    h = cache.feat
    if spec.head == "dueling":
        ah, vh = cache.hidden
        dV = dout.sum(axis=1, keepdims=True)
        dA = dout - dout.mean(axis=1, keepdims=True)
        g["adv2.W"][...] = ah.T @ dA
        g["adv2.b"][...] = dA.sum(axis=0)
        g["val2.W"][...] = vh.T @ dV
        g["val2.b"][...] = dV.sum(axis=0)
        dah = (dA @ p["adv2.W"].T) * (1.0 - ah * ah)
        dvh = (dV @ p["val2.W"].T) * (1.0 - vh * vh)
        g["adv1.W"][...] = h.T @ dah
        g["adv1.b"][...] = dah.sum(axis=0)
        g["val1.W"][...] = h.T @ dvh
        g["val1.b"][...] = dvh.sum(axis=0)
        dh = dah @ p["adv1.W"].T + dvh @ p["val1.W"].T
    else:
        (hh,) = cache.hidden
        d = dout[:, None] if spec.head == "critic" else dout
        g["out.W"][...] = hh.T @ d
        g["out.b"][...] = d.sum(axis=0)
        dhh = d @ p["out.W"].T
        if spec.head == "critic" or spec.actor_width:
            dpre = dhh * (1.0 - hh * hh)
            g["hid.W"][...] = h.T @ dpre
            g["hid.b"][...] = dpre.sum(axis=0)
            dh = dpre @ p["hid.W"].T
        else:
            dh = dhh
    _lstm_backward(p, g, cache.lstm, dh, spec.lstm_hidden)
    return grad


# ---------------------------------------------------------------- losses

class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray


class LossSpec(NamedTuple):
    """``kind`` is ``"dqn_td"``, ``"critic_lstd"`` or ``"actor_pg"``.

    ``delta`` is only used by ``actor_pg`` (the critic's TD errors, held constant).
    """

    kind: str
    gamma: float = 0.9
    delta: np.ndarray | None = None


def dqn_td_loss_grad(spec, params, batch: Batch, gamma: float, target_params=None):
    """Mean of ``0.5 (Q(s,a) - y)^2`` with ``y = r + gamma max_a' Q(s', a')`` held constant."""
    s = _as_batch(spec, batch.s)
    B = s.shape[0]
    if target_params is None:
        # one pass over s and s'; rows of s' get zero output gradient
        out, cache = forward(spec, params, np.concatenate([s, _as_batch(spec, batch.s_next)]),
                             return_cache=True)
        q, q_next = out[:B], out[B:]
    else:
        q_next = forward(spec, target_params, batch.s_next)
        out, cache = forward(spec, params, s, return_cache=True)
        q = out
    y = np.asarray(batch.r, dtype=float) + gamma * q_next.max(axis=1)
    idx = np.arange(B)
    err = q[idx, batch.a] - y
    dout = np.zeros_like(out)
    dout[idx, batch.a] = err / B
    return 0.5 * float(np.mean(err**2)), backward_from_output(spec, params, cache, dout)


def td_errors(spec, params, batch: Batch, gamma: float) -> np.ndarray:
    """``delta = r + gamma V(s') - V(s)`` for a critic network."""
    return (np.asarray(batch.r, dtype=float) + gamma * forward(spec, params, batch.s_next)
            - forward(spec, params, batch.s))


def critic_loss_grad(spec, params, batch: Batch, gamma: float):
    """Mean of ``0.5 delta^2`` with ``V(s')`` held constant; returns ``(loss, grad, delta)``."""
    v_next = forward(spec, params, batch.s_next)
    v, cache = forward(spec, params, batch.s, return_cache=True)
    delta = np.asarray(batch.r, dtype=float) + gamma * v_next - v
    B = len(v)
    grad = backward_from_output(spec, params, cache, -delta / B)
    return 0.5 * float(np.mean(delta**2)), grad, delta


def actor_loss_grad(spec, params, batch: Batch, delta):
    """Mean of ``-log pi(a|s) * delta`` with ``delta`` held constant."""
    probs, cache = forward(spec, params, batch.s, return_cache=True)
    B = probs.shape[0]
    idx = np.arange(B)
    delta = np.asarray(delta, dtype=float)
    logp = np.log(probs[idx, batch.a])
    onehot = np.zeros_like(probs)
    onehot[idx, batch.a] = 1.0
    dlogits = -(onehot - probs) * delta[:, None] / B
    return -float(np.mean(logp * delta)), backward_from_output(spec, params, cache, dlogits)


def loss_value(spec, params, batch: Batch, loss: LossSpec) -> float:
    """Loss without the gradient; the constants (bootstrap target, delta) use ``params``."""
    if loss.kind == "dqn_td":
        y = np.asarray(batch.r, dtype=float) + loss.gamma * forward(spec, params, batch.s_next).max(1)
        q = forward(spec, params, batch.s)
        return 0.5 * float(np.mean((q[np.arange(len(q)), batch.a] - y) ** 2))
    if loss.kind == "critic_lstd":
        return 0.5 * float(np.mean(td_errors(spec, params, batch, loss.gamma) ** 2))
    if loss.kind == "actor_pg":
        probs = forward(spec, params, batch.s)
        return -float(np.mean(np.log(probs[np.arange(len(probs)), batch.a]) * loss.delta))
    raise InvalidParameterError(f"unknown loss {loss.kind!r}")


def backward(spec: NetworkSpec, params: np.ndarray, batch: Batch, loss: LossSpec) -> np.ndarray:
    """Exact gradient of the mean batch loss."""
    if len(batch.a) == 0:
        raise InvalidParameterError("empty batch")
    if loss.kind == "dqn_td":
        return dqn_td_loss_grad(spec, params, batch, loss.gamma)[1]
    if loss.kind == "critic_lstd":
        return critic_loss_grad(spec, params, batch, loss.gamma)[1]
    if loss.kind == "actor_pg":
        return actor_loss_grad(spec, params, batch, loss.delta)[1]
    raise InvalidParameterError(f"unknown loss {loss.kind!r}")


# ---------------------------------------------------------------- optimizers

def sgd_step(params: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise InvalidParameterError("parameter and gradient layouts differ")
    return params - alpha * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, alpha: float):
    if not (state.m.shape == params.shape == grad.shape):
        raise InvalidParameterError("optimizer state does not match the parameter layout")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, b1, b2, state.eps), new


# ---------------------------------------------------------------- federation

def fedavg(params_list) -> np.ndarray:
    """Elementwise mean of parameter vectors with identical layout."""
    params_list = [np.asarray(p, dtype=float) for p in params_list]
    if not params_list:
        raise InvalidParameterError("fedavg needs at least one parameter vector")
    shape = params_list[0].shape
    if any(p.shape != shape for p in params_list):
        raise InvalidParameterError("parameter layouts differ")
    return np.mean(np.stack(params_list), axis=0)


class QuantRecord(NamedTuple):
    bits: int
    scale: float
    offset: float


def quantize_params(params: np.ndarray, bits: int):
    """Uniform affine quantization of the vector's [min, max] range onto ``2**bits`` levels."""
    if not 2 <= bits <= 16:
        raise InvalidParameterError(f"bits={bits} must lie in [2, 16]")
    x = np.asarray(params, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("cannot quantize non-finite parameters")
    lo, hi = float(x.min()), float(x.max())
    scale = (hi - lo) / (2**bits - 1)
    if scale == 0.0:
        q = np.zeros(x.shape, dtype=np.uint16)
    else:
        q = np.clip(np.rint((x - lo) / scale), 0, 2**bits - 1).astype(np.uint16)
    return q, QuantRecord(bits, scale, lo)


def dequantize_params(q: np.ndarray, record: QuantRecord) -> np.ndarray:
    return record.offset + record.scale * np.asarray(q, dtype=float)


def pack_quantized(q: np.ndarray, record: QuantRecord) -> bytes:
    """Exchange format: ``<B bits><d scale><d offset><Q count>`` then big-endian bit-packed values."""
    q = np.asarray(q, dtype=np.uint16)
    header = struct.pack("<BddQ", record.bits, record.scale, record.offset, q.size)
    shifts = np.arange(record.bits - 1, -1, -1, dtype=np.uint16)
    bitplane = ((q[:, None] >> shifts) & 1).astype(np.uint8)
    return header + np.packbits(bitplane.ravel()).tobytes()


def unpack_quantized(blob: bytes):
    bits, scale, offset, n = struct.unpack_from("<BddQ", blob)
    body = np.frombuffer(blob, dtype=np.uint8, offset=struct.calcsize("<BddQ"))
    flat = np.unpackbits(body)[:n * bits].reshape(n, bits).astype(np.uint16)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.uint16)
    return (flat * weights).sum(axis=1).astype(np.uint16), QuantRecord(bits, scale, offset)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FSPECNN\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sH32sQ")


def dump_params(spec: NetworkSpec, params: np.ndarray) -> bytes:
    """Checkpoint bytes: magic, version, sha256 of the NetworkSpec, count, then float64 LE values."""
    if params.shape != (param_count(spec),):
        raise InvalidParameterError("parameter vector does not match spec")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec.digest(), params.size)
    return header + np.asarray(params, dtype="<f8").tobytes()


def load_params(spec: NetworkSpec, blob: bytes) -> np.ndarray:
    magic, version, digest, n = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise InvalidParameterError("not a parameter checkpoint")
    if version != CHECKPOINT_VERSION:
        raise InvalidParameterError(f"unsupported checkpoint version {version}")
    if digest != spec.digest() or n != param_count(spec):
        raise InvalidParameterError("checkpoint was written for a different network spec")
    return np.frombuffer(blob, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)


def save_checkpoint(path, spec: NetworkSpec, params: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(dump_params(spec, params))


def load_checkpoint(path, spec: NetworkSpec) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_params(spec, fh.read())
