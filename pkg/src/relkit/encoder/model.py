"""A small pre-norm transformer encoder with exact reverse-mode gradients.

Parameters live in a flat, ordered ``dict`` keyed by dotted names, which is
what the optimizer and the checkpoint format operate on. ``forward`` can
record the activations needed by ``backward``; ``backward`` takes the
gradient of a scalar loss with respect to the final hidden states and returns
gradients for every parameter.

The same code runs in float32 (training) and in float64 / longdouble (gradient
checking): all arithmetic follows the dtype of the parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .vocab import Vocabulary

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 64
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len) < 1:
            raise ValueError("encoder sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "mlm.bias": (cfg.vocab_size,)})
    return shapes


def init_parameters(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf.startswith("b") or name == "mlm.bias":
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = value.astype(dtype)
    return params


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


class EncoderModel:
    """Token + learned position embeddings, ``n_layers`` pre-norm blocks, final norm.

    The masked-token head is tied to the token embedding matrix and only adds
    an output bias.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, params=None, seed: int = 0,
                 dtype=np.float32, model_id: str | None = None):
        if config.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size={config.vocab_size} but vocabulary has {len(vocab)} tokens")
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else init_parameters(config, seed, dtype)
        expected = parameter_shapes(config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.model_id = model_id or f"encoder-seed{seed}"
        self._cache = None

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()},
                            model_id=self.model_id)

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, self.vocab, {k: v.astype(dtype) for k, v in self.params.items()},
                            model_id=self.model_id)

    # -- forward ---------------------------------------------------------

    def _check_inputs(self, ids, pad_mask):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"expected a (batch, seq) id array, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")
        if pad_mask is None:
            pad_mask = ids != self.vocab.pad_id
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != ids.shape:
            raise ValueError("pad_mask shape does not match ids")
        if not pad_mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one non-pad token")
        return ids, pad_mask

    def forward(self, ids, pad_mask=None, record: bool = False) -> np.ndarray:
        """Hidden states of shape (batch, seq, d_model).

        ``pad_mask`` is True at real tokens; padded keys get -inf attention
        scores. With ``record=True`` the activations are kept for ``backward``.
        """
        ids, pad_mask = self._check_inputs(ids, pad_mask)
        x = self.embed_tokens(ids)
        caches = []
        for i in range(self.config.n_layers):
            x, cache = self.block(i, x, pad_mask)
            if record:
                caches.append(cache)
        out, lnf = self.final_norm(x)
        if record:
            self._cache = (ids, caches, lnf)
        return out

    # The three stages below compose ``forward``; they are public so callers can
    # re-run a suffix of the network (gradient checking does this).

    def embed_tokens(self, ids) -> np.ndarray:
        P = self.params
        return P["tok_emb"][ids] + P["pos_emb"][: ids.shape[1]][None]

    def block(self, i: int, x: np.ndarray, pad_mask: np.ndarray):
        cfg, P = self.config, self.params
        B, T, _ = x.shape
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = self.dtype.type(1.0 / math.sqrt(dh))
        p = f"blocks.{i}."
        y, ln1 = _layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)
        q = (y @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (y @ P[p + "attn.wk"] + P[p + "attn.bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (y @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = np.where(pad_mask[:, None, None, :], (q @ k.transpose(0, 1, 3, 2)) * scale, self.dtype.type(-np.inf))
        probs = _softmax(scores)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
        z, ln2 = _layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
        a = z @ P[p + "ffn.w1"] + P[p + "ffn.b1"]
        act = gelu(a)
        x = x + act @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        return x, (y, ln1, q, k, v, probs, ctx, z, ln2, a, act)

    def final_norm(self, x: np.ndarray):
        return _layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"], self.config.ln_eps)

    def mlm_logprobs(self, ids, pad_mask=None) -> np.ndarray:
        """Log-probabilities of the tied masked-token head, (batch, seq, vocab)."""
        h = self.forward(ids, pad_mask)
        logits = h @ self.params["tok_emb"].T + self.params["mlm.bias"]
        logits = logits - logits.max(axis=-1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))

    # -- backward --------------------------------------------------------

    def backward(self, d_hidden) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. every parameter, given dLoss/dHidden.

        Consumes the activations recorded by the last ``forward(record=True)``.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        ids, caches, lnf = self._cache
        self._cache = None
        cfg, P = self.config, self.params
        B, T = ids.shape
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = self.dtype.type(1.0 / math.sqrt(dh))
        d_hidden = np.asarray(d_hidden, dtype=self.dtype)
        if d_hidden.shape != (B, T, cfg.d_model):
            raise ValueError(f"upstream gradient shape {d_hidden.shape} != {(B, T, cfg.d_model)}")

        grads = {name: np.zeros_like(value) for name, value in P.items()}
        dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_backward(d_hidden, lnf)

        for i in reversed(range(cfg.n_layers)):
            p = f"blocks.{i}."
            y, ln1, q, k, v, probs, ctx, z, ln2, a, act = caches[i]
            # feed-forward branch
            grads[p + "ffn.b2"] = dx.sum(axis=(0, 1))
            grads[p + "ffn.w2"] = act.reshape(-1, cfg.d_ff).T @ dx.reshape(-1, cfg.d_model)
            da = (dx @ P[p + "ffn.w2"].T) * _gelu_grad(a)
            grads[p + "ffn.b1"] = da.sum(axis=(0, 1))
            grads[p + "ffn.w1"] = z.reshape(-1, cfg.d_model).T @ da.reshape(-1, cfg.d_ff)
            dz = da @ P[p + "ffn.w1"].T
            dln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_backward(dz, ln2)
            dx = dx + dln
            # attention branch
            grads[p + "attn.bo"] = dx.sum(axis=(0, 1))
            grads[p + "attn.wo"] = ctx.reshape(-1, cfg.d_model).T @ dx.reshape(-1, cfg.d_model)
            dctx = (dx @ P[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            dprobs = dctx @ v.transpose(0, 1, 3, 2)
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dq = (dscores @ k) * scale
            dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
            dy = np.zeros_like(y)
            y2 = y.reshape(-1, cfg.d_model)
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dproj = dproj.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
                grads[p + f"attn.b{name}"] = dproj.sum(axis=(0, 1))
                grads[p + f"attn.w{name}"] = y2.T @ dproj.reshape(-1, cfg.d_model)
                dy += dproj @ P[p + f"attn.w{name}"].T
            dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_backward(dy, ln1)
            dx = dx + dln

        grads["pos_emb"][:T] = dx.sum(axis=0)
        np.add.at(grads["tok_emb"], ids, dx)
        return grads


def pad_batch(sequences, pad_id: int, max_len: int | None = None):
    """Right-pad token-id sequences into an id array and a real-token mask."""
    width = max(len(s) for s in sequences)
    if max_len is not None and width > max_len:
        raise ValueError(f"sequence length {width} exceeds max_len={max_len}")
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask
