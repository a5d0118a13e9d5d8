"""Weight-dropped LSTM language model in numpy with an explicit BPTT backward pass.

Gate blocks inside every stacked ``W``/``U``/``b`` tensor are ordered
``[input, forget, output, candidate]``. Arrays are float64 throughout.

Parameter names, in checkpoint order::

    embedding                 (vocab_size, embed_dim)
    lstm.{l}.W                (4 * h_l, in_l)   input-to-hidden
    lstm.{l}.U                (4 * h_l, h_l)    hidden-to-hidden, DropConnect target
    lstm.{l}.b                (4 * h_l,)
    decoder.weight            (vocab_size, h_last)   absent when tied to embedding
    decoder.bias              (vocab_size,)

``h_l = hidden_dim`` except the last layer, which uses ``embed_dim`` when
weights are tied.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit, log_softmax

Params = dict[str, np.ndarray]
LSTMState = list[tuple[np.ndarray, np.ndarray]]

CHECKPOINT_MAGIC = b"SWLMCKPT"
CHECKPOINT_VERSION = 1

DROPOUT_FIELDS = ("weight_drop_p", "embed_drop_p", "input_drop_p", "hidden_drop_p", "output_drop_p")


@dataclass
class NeuralLMConfig:
    """Model shape and regularization.

    The five ``*_drop_p`` values are base probabilities; the probability
    actually applied is ``dropout_multiplier * base``.
    """

    vocab_size: int = 30000
    embed_dim: int = 400
    hidden_dim: int = 1150
    num_layers: int = 3
    bptt_len: int = 70
    batch_size: int = 32
    dropout_multiplier: float = 0.5
    weight_decay: float = 0.1
    weight_drop_p: float = 0.5
    embed_drop_p: float = 0.1
    input_drop_p: float = 0.6
    hidden_drop_p: float = 0.5
    output_drop_p: float = 0.4
    tie_weights: bool = True
    variable_bptt: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "bptt_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dropout_multiplier < 0:
            raise ValueError("dropout_multiplier must be >= 0")
        for name in DROPOUT_FIELDS:
            p = self.dropout(name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"effective {name} = {p} must be in [0, 1)")

    def dropout(self, name: str) -> float:
        return self.dropout_multiplier * getattr(self, name)

    def layer_dims(self) -> list[tuple[int, int]]:
        """``(input_dim, hidden_dim)`` per layer."""
        dims = []
        for l in range(self.num_layers):
            d_in = self.embed_dim if l == 0 else self.hidden_dim
            d_h = self.embed_dim if (l == self.num_layers - 1 and self.tie_weights) else self.hidden_dim
            dims.append((d_in, d_h))
        return dims

    @property
    def output_dim(self) -> int:
        return self.layer_dims()[-1][1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralLMConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NeuralLMConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_names(config: NeuralLMConfig) -> list[str]:
    names = ["embedding"]
    for l in range(config.num_layers):
        names += [f"lstm.{l}.W", f"lstm.{l}.U", f"lstm.{l}.b"]
    if not config.tie_weights:
        names.append("decoder.weight")
    names.append("decoder.bias")
    return names


def param_shapes(config: NeuralLMConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, config.embed_dim)}
    for l, (d_in, d_h) in enumerate(config.layer_dims()):
        shapes[f"lstm.{l}.W"] = (4 * d_h, d_in)
        shapes[f"lstm.{l}.U"] = (4 * d_h, d_h)
        shapes[f"lstm.{l}.b"] = (4 * d_h,)
    if not config.tie_weights:
        shapes["decoder.weight"] = (config.vocab_size, config.output_dim)
    shapes["decoder.bias"] = (config.vocab_size,)
    return {name: shapes[name] for name in param_names(config)}


def init_params(config: NeuralLMConfig, seed: int) -> Params:
    """Uniform(-1/sqrt(hidden_dim), +1/sqrt(hidden_dim)) for every tensor."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.hidden_dim)
    return {
        name: rng.uniform(-bound, bound, size=shape)
        for name, shape in param_shapes(config).items()
    }


def decoder_weight(params: Params) -> np.ndarray:
    return params["decoder.weight"] if "decoder.weight" in params else params["embedding"]


def zero_state(config: NeuralLMConfig, batch_size: int) -> LSTMState:
    return [(np.zeros((batch_size, d_h)), np.zeros((batch_size, d_h))) for _, d_h in config.layer_dims()]


# --------------------------------------------------------------------------
# dropout masks


@dataclass
class DropMasks:
    """Inverted-scaled masks for one batch; entries are 0 or 1/keep_prob."""

    weight: list[np.ndarray]  # per layer, shape of U
    embed_rows: np.ndarray  # (vocab_size,), whole embedding rows
    input: np.ndarray  # (batch, embed_dim), reused at every time step
    hidden: list[np.ndarray]  # per non-final layer output, (batch, h_l)
    output: np.ndarray  # (batch, h_last)


def _bernoulli_mask(rng: np.random.Generator, p: float, shape) -> np.ndarray:
    if p == 0.0:
        return np.ones(shape)
    keep = 1.0 - p
    return (rng.random(shape) < keep) / keep


def sample_masks(config: NeuralLMConfig, rng: np.random.Generator | int, batch_size: int | None = None) -> DropMasks:
    """Fresh DropConnect, embedding-row and variational masks for one batch."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    batch = config.batch_size if batch_size is None else batch_size
    dims = config.layer_dims()
    weight = [_bernoulli_mask(rng, config.dropout("weight_drop_p"), (4 * d_h, d_h)) for _, d_h in dims]
    embed_rows = _bernoulli_mask(rng, config.dropout("embed_drop_p"), (config.vocab_size,))
    inp = _bernoulli_mask(rng, config.dropout("input_drop_p"), (batch, config.embed_dim))
    hidden = [_bernoulli_mask(rng, config.dropout("hidden_drop_p"), (batch, d_h)) for _, d_h in dims[:-1]]
    output = _bernoulli_mask(rng, config.dropout("output_drop_p"), (batch, dims[-1][1]))
    return DropMasks(weight, embed_rows, inp, hidden, output)


# --------------------------------------------------------------------------
# forward


def lstm_cell(x, h_prev, c_prev, W, U, b, u_mask=None):
    """One LSTM step for a batch (or a single vector); returns ``(h, c)``."""
    Ue = U if u_mask is None else U * u_mask
    g = x @ W.T + h_prev @ Ue.T + b
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite LSTM pre-activation")
    d = U.shape[1]
    i = expit(g[..., :d])
    f = expit(g[..., d:2 * d])
    o = expit(g[..., 2 * d:3 * d])
    c_tilde = np.tanh(g[..., 3 * d:])
    c = i * c_tilde + f * c_prev
    h = o * np.tanh(c)
    return h, c


@dataclass
class _LayerCache:
    inp: np.ndarray  # (T, B, in) layer input after dropout
    Ue: np.ndarray  # effective (masked) U
    acts: np.ndarray  # (T, B, 4h) post-activation gates
    hs: np.ndarray  # (T+1, B, h); hs[0] is the carried-in state
    cs: np.ndarray
    tc: np.ndarray  # tanh(c_t), (T, B, h)


@dataclass
class ForwardCache:
    ids: np.ndarray  # (T, B)
    masks: DropMasks | None
    layers: list[_LayerCache]
    y: np.ndarray  # (T, B, h_last), decoder input


def forward(
    params: Params,
    config: NeuralLMConfig,
    ids: np.ndarray,
    state: LSTMState,
    masks: DropMasks | None = None,
    keep_cache: bool = False,
):
    """Run one window. ``ids`` is ``(batch, T)``.

    Returns ``(logits, new_state, cache)`` with logits shaped
    ``(batch, T, vocab_size)``. ``masks=None`` is evaluation mode. The new
    state is a copy, so nothing links it to this window (truncation).
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be (batch, T)")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    X = ids.T
    T, B = X.shape
    emb = params["embedding"][X]
    if masks is not None:
        emb = emb * masks.embed_rows[X][..., None] * masks.input[None]
    inp = emb
    layer_caches = []
    new_state: LSTMState = []
    n_layers = config.num_layers
    for l in range(n_layers):
        W, U, b = params[f"lstm.{l}.W"], params[f"lstm.{l}.U"], params[f"lstm.{l}.b"]
        d = U.shape[1]
        Ue = U if masks is None else U * masks.weight[l]
        UeT = Ue.T
        xw = (inp.reshape(T * B, -1) @ W.T + b).reshape(T, B, 4 * d)
        hs = np.empty((T + 1, B, d))
        cs = np.empty((T + 1, B, d))
        acts = np.empty((T, B, 4 * d))
        hs[0], cs[0] = state[l]
        for t in range(T):
            g = xw[t] + hs[t] @ UeT
            a = acts[t]
            a[:, :3 * d] = expit(g[:, :3 * d])
            a[:, 3 * d:] = np.tanh(g[:, 3 * d:])
            cs[t + 1] = a[:, :d] * a[:, 3 * d:] + a[:, d:2 * d] * cs[t]
            hs[t + 1] = a[:, 2 * d:3 * d] * np.tanh(cs[t + 1])
        tc = np.tanh(cs[1:])
        if not np.isfinite(hs[T]).all():
            raise FloatingPointError(f"non-finite hidden state in layer {l}")
        new_state.append((hs[T].copy(), cs[T].copy()))
        if keep_cache:
            layer_caches.append(_LayerCache(inp, Ue, acts, hs, cs, tc))
        out = hs[1:]
        if l < n_layers - 1:
            inp = out if masks is None else out * masks.hidden[l][None]
        else:
            y = out if masks is None else out * masks.output[None]
    dec = decoder_weight(params)
    logits = (y.reshape(T * B, -1) @ dec.T + params["decoder.bias"]).reshape(T, B, -1)
    cache = ForwardCache(X, masks, layer_caches, y) if keep_cache else None
    return logits.transpose(1, 0, 2), new_state, cache


forward_sequence = forward


# --------------------------------------------------------------------------
# loss


def _valid_mask(targets: np.ndarray, ignore_index: int | None) -> np.ndarray:
    if ignore_index is None:
        return np.ones(targets.shape, dtype=bool)
    return targets != ignore_index


def cross_entropy_loss(logits: np.ndarray, targets: np.ndarray, ignore_index: int | None = None) -> float:
    """Mean over all (batch x time) positions of ``-log softmax(logits)[target]``."""
    loss, _ = cross_entropy_with_grad(logits, targets, ignore_index, need_grad=False)
    return loss


def cross_entropy_with_grad(logits, targets, ignore_index=None, need_grad=True):
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    tgt = np.asarray(targets).reshape(-1)
    valid = _valid_mask(tgt, ignore_index)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no predicted positions in batch")
    logp = log_softmax(flat, axis=1)
    rows = np.flatnonzero(valid)
    loss = -float(logp[rows, tgt[rows]].sum()) / n
    if not need_grad:
        return loss, None
    grad = np.exp(logp)
    grad[rows, tgt[rows]] -= 1.0
    grad[~valid] = 0.0
    grad /= n
    return loss, grad.reshape(logits.shape)


def token_nll(logits, targets, ignore_index=None) -> tuple[float, int]:
    """Summed NLL and the number of predicted positions."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    tgt = np.asarray(targets).reshape(-1)
    rows = np.flatnonzero(_valid_mask(tgt, ignore_index))
    logp = log_softmax(flat[rows], axis=1)
    return -math.fsum(logp[np.arange(rows.size), tgt[rows]].tolist()), int(rows.size)


# --------------------------------------------------------------------------
# backward


def backward(params: Params, config: NeuralLMConfig, cache: ForwardCache, dlogits: np.ndarray) -> Params:
    """Exact gradients of the loss whose logit gradient is ``dlogits`` (batch, T, V).

    No gradient flows into the carried-in state and masks are constants.
    """
    X = cache.ids
    T, B = X.shape
    masks = cache.masks
    dlog = np.ascontiguousarray(dlogits.transpose(1, 0, 2)).reshape(T * B, -1)
    grads: Params = {}
    dec = decoder_weight(params)
    y = cache.y.reshape(T * B, -1)
    grads["decoder.bias"] = dlog.sum(axis=0)
    d_dec = dlog.T @ y
    dout = (dlog @ dec).reshape(T, B, -1)
    if masks is not None:
        dout = dout * masks.output[None]
    for l in range(config.num_layers - 1, -1, -1):
        lc = cache.layers[l]
        W = params[f"lstm.{l}.W"]
        d = lc.Ue.shape[1]
        dG = np.empty((T, B, 4 * d))
        dh_next = np.zeros((B, d))
        dc_next = np.zeros((B, d))
        Ue = lc.Ue
        for t in range(T - 1, -1, -1):
            a = lc.acts[t]
            i, f, o, ct = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
            tc = lc.tc[t]
            dh = dout[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            g = dG[t]
            g[:, :d] = dc * ct * i * (1.0 - i)
            g[:, d:2 * d] = dc * lc.cs[t] * f * (1.0 - f)
            g[:, 2 * d:3 * d] = dh * tc * o * (1.0 - o)
            g[:, 3 * d:] = dc * i * (1.0 - ct * ct)
            dc_next = dc * f
            dh_next = g @ Ue
        dGf = dG.reshape(T * B, 4 * d)
        dU = dGf.T @ lc.hs[:-1].reshape(T * B, d)
        if masks is not None:
            dU *= masks.weight[l]
        inp = lc.inp.reshape(T * B, -1)
        grads[f"lstm.{l}.W"] = dGf.T @ inp
        grads[f"lstm.{l}.U"] = dU
        grads[f"lstm.{l}.b"] = dGf.sum(axis=0)
        dinp = (dGf @ W).reshape(T, B, -1)
        if l > 0:
            dout = dinp if masks is None else dinp * masks.hidden[l - 1][None]
        else:
            demb = dinp
    if masks is not None:
        demb = demb * masks.input[None] * masks.embed_rows[X][..., None]
    d_embed = np.zeros_like(params["embedding"])
    np.add.at(d_embed, X.reshape(-1), demb.reshape(T * B, -1))
    if config.tie_weights:
        d_embed += d_dec
    else:
        grads["decoder.weight"] = d_dec
    grads["embedding"] = d_embed
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    return {name: grads[name] for name in param_names(config)}


def loss_and_grads(params, config, ids, targets, state, masks=None, ignore_index=None):
    """Forward + backward on one window; returns ``(loss, grads, new_state)``."""
    logits, new_state, cache = forward(params, config, ids, state, masks, keep_cache=True)
    loss, dlogits = cross_entropy_with_grad(logits, targets, ignore_index)
    return loss, backward(params, config, cache, dlogits), new_state


# --------------------------------------------------------------------------
# finite-difference oracle


def numerical_gradients(loss_fn: Callable[[Params], float], params: Params, eps: float = 1e-5) -> Params:
    """Central differences of ``loss_fn`` w.r.t. every entry of every tensor."""
    out: Params = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_fn(params)
            flat[k] = orig - eps
            down = loss_fn(params)
            flat[k] = orig
            gf[k] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / (||a|| + ||b||)``, 0 when both vanish."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------------------------
# batching


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Split a stream into ``batch_size`` contiguous lanes, dropping the remainder."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size // batch_size
    if n < 2:
        raise ValueError(f"stream of {ids.size} tokens too short for {batch_size} lanes")
    return ids[: n * batch_size].reshape(batch_size, n)


def iter_windows(
    data: np.ndarray, bptt_len: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Consecutive ``(inputs, targets)`` windows over lanes ``data`` (batch, n).

    With ``rng`` the window length varies per window: ``bptt_len`` with
    probability 0.95, else half of it, then jittered by N(0, 5), min 5.
    """
    n = data.shape[1]
    pos = 0
    while pos < n - 1:
        if rng is None:
            seq = bptt_len
        else:
            base = bptt_len if rng.random() < 0.95 else bptt_len / 2
            seq = max(5, int(rng.normal(base, 5)))
        seq = min(seq, n - 1 - pos)
        yield data[:, pos:pos + seq], data[:, pos + 1:pos + 1 + seq]
        pos += seq


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class NeuralLM:
    config: NeuralLMConfig
    params: Params
    meta: dict


def save_checkpoint(path: str | Path, config: NeuralLMConfig, params: Params, meta: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, then named float64 tensors.

    Layout (all little-endian)::

        b"SWLMCKPT" | u32 version | u32 header_len | header JSON (utf-8)
        u32 n_tensors | n_tensors * (u16 name_len | name | u8 ndim | u64 dims... | f64 data)
    """
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    names = param_names(config)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> NeuralLM:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    params: Params = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    config = NeuralLMConfig.from_dict(header["config"])
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ValueError(f"{path}: tensor names {sorted(params)} do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return NeuralLM(config, {k: params[k] for k in expected}, header.get("meta", {}))
