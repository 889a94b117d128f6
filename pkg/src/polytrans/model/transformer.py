"""Pre-LN Transformer encoder-decoder in numpy with hand-written backprop.

The token embedding is a single array used for the encoder lookup, the
decoder lookup and (transposed) as the output projection, so its gradient
accumulates all three paths.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..subword import BOS, EOS, PAD
from . import layers as L


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    dropout_rate: float = 0.1
    max_positions: int = 128
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "enc_layers", "dec_layers", "heads", "d_model", "d_ff",
                     "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def parameter_count(cfg: ModelConfig) -> int:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = 4 * (D * D + D)
    ln = 2 * D
    ffn = D * F + F + F * D + D
    enc = cfg.enc_layers * (attn + ffn + 2 * ln) + ln
    dec = cfg.dec_layers * (2 * attn + ffn + 3 * ln) + ln
    return V * D + enc + dec


def _param_shapes(cfg: ModelConfig):
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"embed": (cfg.vocab_size, D)}

    def attn(prefix):
        for n in "qkvo":
            shapes[f"{prefix}w{n}"] = (D, D)
            shapes[f"{prefix}b{n}"] = (D,)

    def ln(prefix):
        shapes[prefix + "g"] = (D,)
        shapes[prefix + "b"] = (D,)

    def ffn(prefix):
        shapes.update({prefix + "w1": (D, F), prefix + "b1": (F,),
                       prefix + "w2": (F, D), prefix + "b2": (D,)})

    for i in range(cfg.enc_layers):
        ln(f"enc{i}.ln1.")
        attn(f"enc{i}.attn.")
        ln(f"enc{i}.ln2.")
        ffn(f"enc{i}.ffn.")
    ln("enc.lnf.")
    for i in range(cfg.dec_layers):
        ln(f"dec{i}.ln1.")
        attn(f"dec{i}.self.")
        ln(f"dec{i}.ln2.")
        attn(f"dec{i}.cross.")
        ln(f"dec{i}.ln3.")
        ffn(f"dec{i}.ffn.")
    ln("dec.lnf.")
    return shapes


class TransformerModel:
    """Parameters plus forward/backward passes.

    ``params`` maps names to arrays; the model never copies them, so callers
    (the optimizer) may update them in place.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self.dtype = np.dtype(config.dtype)
        self._pe = L.sinusoidal_positions(config.max_positions, config.d_model, self.dtype)
        self._emb_scale = np.sqrt(config.d_model)
        causal = np.triu(np.ones((config.max_positions, config.max_positions), bool), k=1)
        self._causal = np.where(causal, L.NEG_INF, 0.0).astype(self.dtype)

    @property
    def embed(self):
        return self.params["embed"]

    def output_projection(self):
        """The output projection is the embedding matrix itself."""
        return self.params["embed"]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    # -- helpers -------------------------------------------------------------
    def _check_ids(self, ids):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range for vocab_size "
                             f"{self.config.vocab_size}")
        if ids.shape[-1] > self.config.max_positions:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_positions "
                             f"{self.config.max_positions}")

    def _embed(self, ids, rng):
        T = ids.shape[1]
        x = self.params["embed"][ids] * self._emb_scale + self._pe[:T]
        return L.dropout_forward(x, self.config.dropout_rate, rng)

    def _src_mask(self, src):
        return np.where(src == PAD, L.NEG_INF, 0.0).astype(self.dtype)[:, None, None, :]

    # -- forward -------------------------------------------------------------
    def encode(self, src, rng=None):
        """Encoder pass. ``src`` is an int array (B, S) padded with PAD."""
        src = np.asarray(src)
        self._check_ids(src)
        p, cfg = self.params, self.config
        mask = self._src_mask(src)
        x, drop0 = self._embed(src, rng)
        caches = []
        for i in range(cfg.enc_layers):
            h, c_ln1 = L.layer_norm_forward(x, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
            a, c_att = L.attention_forward(p, f"enc{i}.attn.", h, h, mask, cfg.heads)
            a, d_att = L.dropout_forward(a, cfg.dropout_rate, rng)
            x = x + a
            h, c_ln2 = L.layer_norm_forward(x, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
            f, c_ffn = L.ffn_forward(p, f"enc{i}.ffn.", h)
            f, d_ffn = L.dropout_forward(f, cfg.dropout_rate, rng)
            x = x + f
            caches.append((c_ln1, c_att, d_att, c_ln2, c_ffn, d_ffn))
        mem, c_lnf = L.layer_norm_forward(x, p["enc.lnf.g"], p["enc.lnf.b"])
        return mem, mask, (src, drop0, caches, c_lnf)

    def decode(self, tgt_in, mem, mask, rng=None):
        """Decoder pass returning logits (B, T, V)."""
        tgt_in = np.asarray(tgt_in)
        self._check_ids(tgt_in)
        p, cfg = self.params, self.config
        T = tgt_in.shape[1]
        causal = self._causal[:T, :T][None, None]
        y, drop0 = self._embed(tgt_in, rng)
        caches = []
        for i in range(cfg.dec_layers):
            h, c_ln1 = L.layer_norm_forward(y, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            a, c_self = L.attention_forward(p, f"dec{i}.self.", h, h, causal, cfg.heads)
            a, d_self = L.dropout_forward(a, cfg.dropout_rate, rng)
            y = y + a
            h, c_ln2 = L.layer_norm_forward(y, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            c, c_cross = L.attention_forward(p, f"dec{i}.cross.", h, mem, mask, cfg.heads)
            c, d_cross = L.dropout_forward(c, cfg.dropout_rate, rng)
            y = y + c
            h, c_ln3 = L.layer_norm_forward(y, p[f"dec{i}.ln3.g"], p[f"dec{i}.ln3.b"])
            f, c_ffn = L.ffn_forward(p, f"dec{i}.ffn.", h)
            f, d_ffn = L.dropout_forward(f, cfg.dropout_rate, rng)
            y = y + f
            caches.append((c_ln1, c_self, d_self, c_ln2, c_cross, d_cross, c_ln3, c_ffn, d_ffn))
        out, c_lnf = L.layer_norm_forward(y, p["dec.lnf.g"], p["dec.lnf.b"])
        logits = out @ p["embed"].T
        return logits, (tgt_in, drop0, caches, c_lnf, out)

    def forward_batch(self, src, tgt_in, rng=None):
        mem, mask, enc_cache = self.encode(src, rng)
        logits, dec_cache = self.decode(tgt_in, mem, mask, rng)
        return logits, (enc_cache, dec_cache, mask)

    # -- backward ------------------------------------------------------------
    def backward(self, dlogits, cache):
        """Gradients of a scalar loss given ``dloss/dlogits``."""
        enc_cache, dec_cache, mask = cache
        p, cfg = self.params, self.config
        grads = {k: np.zeros_like(v) for k, v in p.items()}

        def acc(d):
            for k, v in d.items():
                grads[k] += v

        tgt_in, drop0, caches, c_lnf, out = dec_cache
        grads["embed"] += dlogits.reshape(-1, dlogits.shape[-1]).T @ out.reshape(-1, out.shape[-1])
        dout = dlogits @ p["embed"]
        dy, grads["dec.lnf.g"], grads["dec.lnf.b"] = L.layer_norm_backward(dout, c_lnf)
        dmem = 0.0
        for i in reversed(range(cfg.dec_layers)):
            c_ln1, c_self, d_self, c_ln2, c_cross, d_cross, c_ln3, c_ffn, d_ffn = caches[i]
            df = L.dropout_backward(dy, d_ffn)
            dh, g = L.ffn_backward(df, c_ffn, p, f"dec{i}.ffn.")
            acc(g)
            dx, dg, db = L.layer_norm_backward(dh, c_ln3)
            grads[f"dec{i}.ln3.g"] += dg
            grads[f"dec{i}.ln3.b"] += db
            dy = dy + dx
            dc = L.dropout_backward(dy, d_cross)
            dh, dm, g = L.attention_backward(dc, c_cross, p, f"dec{i}.cross.", cfg.heads)
            acc(g)
            dmem = dmem + dm
            dx, dg, db = L.layer_norm_backward(dh, c_ln2)
            grads[f"dec{i}.ln2.g"] += dg
            grads[f"dec{i}.ln2.b"] += db
            dy = dy + dx
            da = L.dropout_backward(dy, d_self)
            dq, dkv, g = L.attention_backward(da, c_self, p, f"dec{i}.self.", cfg.heads)
            acc(g)
            dx, dg, db = L.layer_norm_backward(dq + dkv, c_ln1)
            grads[f"dec{i}.ln1.g"] += dg
            grads[f"dec{i}.ln1.b"] += db
            dy = dy + dx
        self._embed_backward(grads, tgt_in, L.dropout_backward(dy, drop0))

        src, drop0, caches, c_lnf = enc_cache
        dx_, grads["enc.lnf.g"], grads["enc.lnf.b"] = L.layer_norm_backward(dmem, c_lnf)
        dx = dx_
        for i in reversed(range(cfg.enc_layers)):
            c_ln1, c_att, d_att, c_ln2, c_ffn, d_ffn = caches[i]
            df = L.dropout_backward(dx, d_ffn)
            dh, g = L.ffn_backward(df, c_ffn, p, f"enc{i}.ffn.")
            acc(g)
            dh, dg, db = L.layer_norm_backward(dh, c_ln2)
            grads[f"enc{i}.ln2.g"] += dg
            grads[f"enc{i}.ln2.b"] += db
            dx = dx + dh
            da = L.dropout_backward(dx, d_att)
            dq, dkv, g = L.attention_backward(da, c_att, p, f"enc{i}.attn.", cfg.heads)
            acc(g)
            dh, dg, db = L.layer_norm_backward(dq + dkv, c_ln1)
            grads[f"enc{i}.ln1.g"] += dg
            grads[f"enc{i}.ln1.b"] += db
            dx = dx + dh
        self._embed_backward(grads, src, L.dropout_backward(dx, drop0))
        return grads

    def _embed_backward(self, grads, ids, dx):
        d = dx * self._emb_scale
        np.add.at(grads["embed"], ids.reshape(-1), d.reshape(-1, d.shape[-1]))

    # -- decoding support ------------------------------------------------------
    def prefix_scorer(self, src_ids):
        """Return ``f(prefixes) -> (N, V)`` next-token log-probs for one source.

        ``src_ids`` carries no specials (EOS is appended here, as in
        :func:`make_batch`); prefixes start with BOS.
        """
        src = np.asarray([list(src_ids) + [EOS]], dtype=np.int64)
        mem, mask, _ = self.encode(src)

        def score(prefixes):
            prefixes = np.asarray(prefixes, dtype=np.int64)
            n = prefixes.shape[0]
            m = np.broadcast_to(mem, (n,) + mem.shape[1:])
            mk = np.broadcast_to(mask, (n,) + mask.shape[1:])
            logits, _ = self.decode(prefixes, m, mk)
            return L.log_softmax(logits[:, -1, :]).astype(np.float64)

        return score

    def copy(self):
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Fan-based uniform initialization; deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name == "embed":
            a = np.sqrt(3.0 / config.d_model)
            params[name] = rng.uniform(-a, a, shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, shape)
        params[name] = params[name].astype(dtype)
    return TransformerModel(config, params)


# -- loss ------------------------------------------------------------------------

def smoothed_targets(target_ids, vocab_size, smoothing, pad_id=PAD, dtype=np.float64):
    """Target distribution: (1-eps) one-hot plus eps spread over non-pad tokens."""
    q = np.full(target_ids.shape + (vocab_size,), smoothing / (vocab_size - 1), dtype=dtype)
    q[..., pad_id] = 0.0
    np.put_along_axis(q, target_ids[..., None],
                      np.take_along_axis(q, target_ids[..., None], -1) + (1 - smoothing), -1)
    return q


def label_smoothed_loss(logits, target_ids, smoothing=0.1, pad_id=PAD, return_grad=False):
    """Mean over non-pad positions of the cross-entropy against smoothed targets."""
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must lie in [0, 1)")
    logits = np.asarray(logits)
    target_ids = np.asarray(target_ids)
    live = target_ids != pad_id
    n = int(live.sum())
    if n == 0:
        raise ValueError("all target positions are padding")
    V = logits.shape[-1]
    logp = L.log_softmax(logits)
    q = smoothed_targets(target_ids, V, smoothing, pad_id, logits.dtype)
    per_pos = -(q * logp).sum(axis=-1)
    loss = float((per_pos * live).sum() / n)
    if not return_grad:
        return loss
    dlogits = (np.exp(logp) - q) * (live[..., None] / n)
    return loss, dlogits.astype(logits.dtype)


def smoothing_floor(vocab_size, smoothing, pad_id_excluded=True):
    """Minimum achievable label-smoothed loss: the entropy of the smoothed target."""
    k = vocab_size - 1 if pad_id_excluded else vocab_size
    if smoothing == 0:
        return 0.0
    hi = 1 - smoothing + smoothing / k
    lo = smoothing / k
    return float(-(hi * np.log(hi) + (k - 1) * lo * np.log(lo)))


# -- batching / gradients ------------------------------------------------------

def pad_batch(seqs, pad_id=PAD):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs):
    """``pairs`` of (src_ids, tgt_ids) without specials -> (src, tgt_in, tgt_out)."""
    if not pairs:
        raise ValueError("empty batch")
    src = pad_batch([list(s) + [EOS] for s, _ in pairs])
    tgt_in = pad_batch([[BOS] + list(t) for _, t in pairs])
    tgt_out = pad_batch([list(t) + [EOS] for _, t in pairs])
    return src, tgt_in, tgt_out


def batch_loss(model, batch, smoothing=0.1, rng=None):
    src, tgt_in, tgt_out = batch
    logits, _ = model.forward_batch(src, tgt_in, rng)
    return label_smoothed_loss(logits, tgt_out, smoothing)


def gradients(model, batch, smoothing=0.1, rng=None):
    """Exact gradients of the mean label-smoothed loss; returns (loss, grads)."""
    src, tgt_in, tgt_out = batch
    if len(src) == 0:
        raise ValueError("empty batch")
    logits, cache = model.forward_batch(src, tgt_in, rng)
    loss, dlogits = label_smoothed_loss(logits, tgt_out, smoothing, return_grad=True)
    return loss, model.backward(dlogits, cache)


@dataclass
class ForwardOutput:
    logits: np.ndarray


def forward(model, src_ids, tgt_ids, train_mode=False, seed=None) -> ForwardOutput:
    """Teacher-forced logits for one sequence pair.

    ``src_ids`` is the full encoder input and ``tgt_ids`` the decoder input
    (typically BOS followed by the target prefix).
    """
    rng = np.random.default_rng(seed) if train_mode else None
    src = np.asarray([list(src_ids)], dtype=np.int64)
    tgt = np.asarray([list(tgt_ids)], dtype=np.int64)
    logits, _ = model.forward_batch(src, tgt, rng)
    return ForwardOutput(logits[0])


def config_dict(cfg: ModelConfig):
    return asdict(cfg)
