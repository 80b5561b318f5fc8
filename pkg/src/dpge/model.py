"""A small post-LN transformer encoder with hand-written reverse-mode gradients.

Heads: masked-LM (decoder tied to the word embeddings), next-sentence
prediction and sequence classification, the latter two on a tanh-pooled [CLS]
vector.

The backward pass can keep the batch axis on every parameter gradient, which
yields per-example gradients in one vectorised sweep. All batched products go
through ``np.matmul`` over stacked per-example slices, so the gradient row of
an example does not depend on which other examples share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .data import Batch
from .params import ParamVector

PRETRAIN = "pretrain"
CLASSIFY = "classify"
MODES = (PRETRAIN, CLASSIFY)

LN_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class BatchError(ValueError):
    pass


@dataclass
class ForwardOutput:
    losses: np.ndarray                   # (B,) float64
    mlm_logits: Optional[np.ndarray] = None     # (B, K, V) over gathered slots
    mlm_targets: Optional[np.ndarray] = None    # (B, K), -1 on padding slots
    mlm_losses: Optional[np.ndarray] = None     # (B,)
    nsp_logits: Optional[np.ndarray] = None     # (B, 2)
    nsp_losses: Optional[np.ndarray] = None     # (B,)
    class_logits: Optional[np.ndarray] = None   # (B, num_labels)

    @property
    def logits(self):
        return self.class_logits if self.class_logits is not None else self.mlm_logits

    def __iter__(self):
        yield self.losses
        yield self.logits


@dataclass
class PerSampleGradMatrix:
    rows: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.rows.shape[0]

    @property
    def param_count(self) -> int:
        return self.rows.shape[1]


def check_batch(batch: Batch, mode: str, max_seq_len: int) -> None:
    if mode not in MODES:
        raise BatchError(f"unknown mode {mode!r}")
    B, L = batch.token_ids.shape
    if L > max_seq_len:
        raise BatchError(f"sequence length {L} exceeds max_seq_len {max_seq_len}")
    for name in ("segment_ids", "attention_mask"):
        if getattr(batch, name).shape != (B, L):
            raise BatchError(f"{name} shape {getattr(batch, name).shape} != {(B, L)}")
    if mode == PRETRAIN:
        if batch.mlm_targets is None or batch.class_labels is not None:
            raise BatchError("pretrain mode needs mlm_targets and no class_labels")
        if batch.mlm_targets.shape != (B, L):
            raise BatchError("mlm_targets shape mismatch")
        if np.any((batch.mlm_targets >= 0) & (batch.attention_mask == 0)):
            raise BatchError("masked position outside the attention mask")
        if batch.nsp_labels is not None and batch.nsp_labels.shape != (B,):
            raise BatchError("nsp_labels shape mismatch")
    else:
        if batch.class_labels is None or batch.mlm_targets is not None:
            raise BatchError("classify mode needs class_labels and no mlm_targets")
        if batch.class_labels.shape != (B,):
            raise BatchError("class_labels shape mismatch")


# -- primitives -------------------------------------------------------------

def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dy, cache, gain):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate <= 0.0:
        return None
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


class _Grads:
    """Accumulates parameter gradients either per example or weighted-summed."""

    def __init__(self, params: ParamVector, batch_size: int, weights: np.ndarray,
                 per_example: bool):
        self.B = batch_size
        self.per_example = per_example
        dtype = params.dtype
        self.w = weights.astype(dtype)
        if per_example:
            self.flat = np.zeros((batch_size, len(params)), dtype=dtype)
            self.g = params.views(self.flat, batch_size)
        else:
            self.flat = np.zeros(len(params), dtype=dtype)
            self.g = params.views(self.flat)

    def linear(self, name, x, dy):
        """y = x @ W + b with x (B, ..., in) and dy (B, ..., out), dy unweighted."""
        B = self.B
        x3 = x.reshape(B, -1, x.shape[-1])
        dy3 = dy.reshape(B, -1, dy.shape[-1])
        if self.per_example:
            self.g[name + ".weight"] += np.matmul(x3.transpose(0, 2, 1), dy3)
            self.g[name + ".bias"] += dy3.sum(axis=1)
        else:
            dyw = dy3 * self.w[:, None, None]
            self.g[name + ".weight"] += (x3.reshape(-1, x3.shape[-1]).T
                                         @ dyw.reshape(-1, dyw.shape[-1]))
            self.g[name + ".bias"] += dyw.reshape(-1, dyw.shape[-1]).sum(axis=0)

    def ln(self, name, xhat, dy):
        B = self.B
        gx = (dy * xhat).reshape(B, -1, dy.shape[-1])
        gb = dy.reshape(B, -1, dy.shape[-1])
        if self.per_example:
            self.g[name + ".gain"] += gx.sum(axis=1)
            self.g[name + ".bias"] += gb.sum(axis=1)
        else:
            self.g[name + ".gain"] += (gx * self.w[:, None, None]).sum(axis=(0, 1))
            self.g[name + ".bias"] += (gb * self.w[:, None, None]).sum(axis=(0, 1))

    def scatter(self, name, index, dy):
        """Embedding-style gradient: rows `index` (B, L) receive dy (B, L, H)."""
        if self.per_example:
            b = np.arange(self.B)[:, None]
            np.add.at(self.g[name], (np.broadcast_to(b, index.shape), index), dy)
        else:
            np.add.at(self.g[name], index, dy * self.w[:, None, None])

    def dense(self, name, dy_per_example):
        """Add an already per-example gradient (B, *shape)."""
        if self.per_example:
            self.g[name] += dy_per_example
        else:
            w = self.w.reshape((-1,) + (1,) * (dy_per_example.ndim - 1))
            self.g[name] += (dy_per_example * w).sum(axis=0)


def _rowmm(x, w):
    # (B, in) @ (in, out) as B independent products; a single 2-D product
    # would switch BLAS kernels with B and change the per-example bits
    return np.matmul(x[:, None, :], w)[:, 0, :]


def mlm_slots(max_seq_len: int) -> int:
    return max(1, int(math.ceil(0.15 * max_seq_len)))


# -- forward / backward -----------------------------------------------------

def _run(params: ParamVector, batch: Batch, mode: str, dropout_seed: Optional[int],
         weights: Optional[np.ndarray] = None, per_example: bool = False,
         want_grad: bool = False):
    cfg = params.config
    check_batch(batch, mode, cfg.max_seq_len)
    P = params.get
    dtype = params.dtype
    B, L = batch.token_ids.shape
    H, nh = cfg.hidden_dim, cfg.num_heads
    hd = H // nh
    rate = cfg.dropout_rate
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None

    tok, seg = batch.token_ids, batch.segment_ids
    if tok.min(initial=0) < 0 or tok.max(initial=0) >= cfg.vocab_size:
        raise BatchError("token id outside the vocabulary")
    mask_bias = ((1.0 - batch.attention_mask) * -1e9).astype(dtype)[:, None, None, :]

    # embeddings
    e = P("emb.word")[tok] + P("emb.position")[:L][None] + P("emb.segment")[seg]
    h, ln_emb = _layer_norm(e, P("emb.ln.gain"), P("emb.ln.bias"))
    d_emb = _dropout_mask(rng, h.shape, rate, dtype)
    if d_emb is not None:
        h = h * d_emb

    caches = []
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        x = h
        q = np.matmul(x, P(p + "attn.q.weight")) + P(p + "attn.q.bias")
        k = np.matmul(x, P(p + "attn.k.weight")) + P(p + "attn.k.bias")
        v = np.matmul(x, P(p + "attn.v.weight")) + P(p + "attn.v.bias")
        qh = q.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)
        kh = k.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)
        vh = v.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)
        scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) / dtype.type(math.sqrt(hd)) + mask_bias
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        d_probs = _dropout_mask(rng, probs.shape, rate, dtype)
        probs_d = probs * d_probs if d_probs is not None else probs
        ctx = np.matmul(probs_d, vh).transpose(0, 2, 1, 3).reshape(B, L, H)
        a = np.matmul(ctx, P(p + "attn.out.weight")) + P(p + "attn.out.bias")
        d_attn = _dropout_mask(rng, a.shape, rate, dtype)
        if d_attn is not None:
            a = a * d_attn
        h1, ln1 = _layer_norm(x + a, P(p + "attn.ln.gain"), P(p + "attn.ln.bias"))
        f_pre = np.matmul(h1, P(p + "ffn.in.weight")) + P(p + "ffn.in.bias")
        f_act, f_t = _gelu(f_pre)
        f = np.matmul(f_act, P(p + "ffn.out.weight")) + P(p + "ffn.out.bias")
        d_ffn = _dropout_mask(rng, f.shape, rate, dtype)
        if d_ffn is not None:
            f = f * d_ffn
        h, ln2 = _layer_norm(h1 + f, P(p + "ffn.ln.gain"), P(p + "ffn.ln.bias"))
        caches.append((x, qh, kh, vh, probs, d_probs, probs_d, ctx, d_attn, ln1, h1,
                       f_pre, f_act, f_t, d_ffn, ln2))

    pooled = np.tanh(_rowmm(h[:, 0, :], P("pooler.weight")) + P("pooler.bias"))
    ldtype = np.promote_types(dtype, np.float64)
    out = ForwardOutput(losses=np.zeros(B, dtype=ldtype))
    head = {}

    if mode == PRETRAIN:
        targets_full = batch.mlm_targets
        counts = (targets_full >= 0).sum(axis=1)
        K = max(mlm_slots(cfg.max_seq_len), int(counts.max(initial=0)))
        slot_pos = np.zeros((B, K), dtype=np.int64)
        slot_tgt = np.full((B, K), -1, dtype=np.int64)
        for b in range(B):
            pos = np.flatnonzero(targets_full[b] >= 0)
            slot_pos[b, :pos.size] = pos
            slot_tgt[b, :pos.size] = targets_full[b, pos]
        valid = slot_tgt >= 0
        hm = h[np.arange(B)[:, None], slot_pos]                    # (B, K, H)
        t_pre = np.matmul(hm, P("mlm.transform.weight")) + P("mlm.transform.bias")
        t_act, t_t = _gelu(t_pre)
        t, ln_t = _layer_norm(t_act, P("mlm.ln.gain"), P("mlm.ln.bias"))
        word = P("emb.word")
        logits = np.matmul(t, word.T) + P("mlm.decoder.bias")      # (B, K, V)
        logp = _log_softmax(logits)
        safe_tgt = np.where(valid, slot_tgt, 0)
        nll = -np.take_along_axis(logp, safe_tgt[..., None], axis=-1)[..., 0]
        nll = np.where(valid, nll, 0.0)
        denom = np.maximum(counts, 1).astype(dtype)
        mlm_losses = nll.sum(axis=1) / denom
        out.mlm_logits, out.mlm_targets = logits, slot_tgt
        out.mlm_losses = mlm_losses.astype(ldtype)
        out.losses = out.losses + out.mlm_losses
        head.update(slot_pos=slot_pos, valid=valid, hm=hm, t_pre=t_pre, t_act=t_act,
                    t_t=t_t, t=t, ln_t=ln_t, logp=logp, safe_tgt=safe_tgt, denom=denom)
        if batch.nsp_labels is not None:
            nsp_logits = _rowmm(pooled, P("nsp.weight")) + P("nsp.bias")
            nsp_logp = _log_softmax(nsp_logits)
            nsp_losses = -nsp_logp[np.arange(B), batch.nsp_labels]
            out.nsp_logits = nsp_logits
            out.nsp_losses = nsp_losses.astype(ldtype)
            out.losses = out.losses + out.nsp_losses
            head["nsp_logp"] = nsp_logp
    else:
        cls_logits = _rowmm(pooled, P("cls.weight")) + P("cls.bias")
        cls_logp = _log_softmax(cls_logits)
        out.class_logits = cls_logits
        out.losses = (-cls_logp[np.arange(B), batch.class_labels]).astype(ldtype)
        head["cls_logp"] = cls_logp

    if not want_grad:
        return out, None

    # ---------------- backward ----------------
    G = _Grads(params, B, weights, per_example)
    dh_out = np.zeros_like(h)
    dpooled = np.zeros_like(pooled)
    onehot_rows = np.arange(B)

    if mode == PRETRAIN:
        valid = head["valid"]
        dlogits = np.exp(head["logp"])
        np.put_along_axis(dlogits, head["safe_tgt"][..., None],
                          np.take_along_axis(dlogits, head["safe_tgt"][..., None], axis=-1) - 1,
                          axis=-1)
        dlogits *= (valid / head["denom"][:, None]).astype(dtype)[..., None]
        t = head["t"]
        word = P("emb.word")
        # tied decoder: logits = t @ word.T + bias
        G.dense("emb.word", np.matmul(dlogits.transpose(0, 2, 1), t))
        G.dense("mlm.decoder.bias", dlogits.sum(axis=1))
        dt = np.matmul(dlogits, word)
        G.ln("mlm.ln", head["ln_t"][0], dt)
        dt_act = _layer_norm_back(dt, head["ln_t"], P("mlm.ln.gain"))
        dt_pre = dt_act * _gelu_grad(head["t_pre"], head["t_t"])
        G.linear("mlm.transform", head["hm"], dt_pre)
        dhm = np.matmul(dt_pre, P("mlm.transform.weight").T)
        np.add.at(dh_out, (np.broadcast_to(onehot_rows[:, None], head["slot_pos"].shape),
                           head["slot_pos"]), dhm)
        if batch.nsp_labels is not None:
            dn = np.exp(head["nsp_logp"])
            dn[onehot_rows, batch.nsp_labels] -= 1
            G.linear("nsp", pooled, dn)
            dpooled += _rowmm(dn, P("nsp.weight").T)
    else:
        dc = np.exp(head["cls_logp"])
        dc[onehot_rows, batch.class_labels] -= 1
        G.linear("cls", pooled, dc)
        dpooled += _rowmm(dc, P("cls.weight").T)

    dpool_pre = dpooled * (1.0 - pooled * pooled)
    G.linear("pooler", h[:, 0, :], dpool_pre)
    dh_out[:, 0, :] += _rowmm(dpool_pre, P("pooler.weight").T)

    dh = dh_out
    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}."
        (x, qh, kh, vh, probs, d_probs, probs_d, ctx, d_attn, ln1, h1,
         f_pre, f_act, f_t, d_ffn, ln2) = caches[i]
        G.ln(p + "ffn.ln", ln2[0], dh)
        dsum2 = _layer_norm_back(dh, ln2, P(p + "ffn.ln.gain"))
        df = dsum2 * d_ffn if d_ffn is not None else dsum2
        G.linear(p + "ffn.out", f_act, df)
        dfa = np.matmul(df, P(p + "ffn.out.weight").T)
        dfp = dfa * _gelu_grad(f_pre, f_t)
        G.linear(p + "ffn.in", h1, dfp)
        dh1 = dsum2 + np.matmul(dfp, P(p + "ffn.in.weight").T)

        G.ln(p + "attn.ln", ln1[0], dh1)
        dsum1 = _layer_norm_back(dh1, ln1, P(p + "attn.ln.gain"))
        da = dsum1 * d_attn if d_attn is not None else dsum1
        G.linear(p + "attn.out", ctx, da)
        dctx = np.matmul(da, P(p + "attn.out.weight").T)
        dctx_h = dctx.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)
        dprobs_d = np.matmul(dctx_h, vh.transpose(0, 1, 3, 2))
        dvh = np.matmul(probs_d.transpose(0, 1, 3, 2), dctx_h)
        dprobs = dprobs_d * d_probs if d_probs is not None else dprobs_d
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores = dscores / dtype.type(math.sqrt(hd))
        dqh = np.matmul(dscores, kh)
        dkh = np.matmul(dscores.transpose(0, 1, 3, 2), qh)
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, L, H)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, L, H)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, L, H)
        G.linear(p + "attn.q", x, dq)
        G.linear(p + "attn.k", x, dk)
        G.linear(p + "attn.v", x, dv)
        dh = (dsum1
              + np.matmul(dq, P(p + "attn.q.weight").T)
              + np.matmul(dk, P(p + "attn.k.weight").T)
              + np.matmul(dv, P(p + "attn.v.weight").T))

    if d_emb is not None:
        dh = dh * d_emb
    G.ln("emb.ln", ln_emb[0], dh)
    de = _layer_norm_back(dh, ln_emb, P("emb.ln.gain"))
    G.scatter("emb.word", tok, de)
    G.scatter("emb.segment", seg, de)
    pos = np.broadcast_to(np.arange(L), (B, L))
    G.scatter("emb.position", pos, de)
    return out, G.flat


def forward(params: ParamVector, batch: Batch, mode: str,
            dropout_seed: Optional[int] = None) -> ForwardOutput:
    """Per-example losses and head logits. Dropout only when a seed is given."""
    out, _ = _run(params, batch, mode, dropout_seed)
    return out


def loss_and_gradient(params: ParamVector, batch: Batch, mode: str,
                      dropout_seed: Optional[int] = None):
    """(ForwardOutput, gradient of the mean per-example loss)."""
    B = len(batch)
    out, grad = _run(params, batch, mode, dropout_seed,
                     weights=np.full(B, 1.0 / B), want_grad=True)
    return out, grad


def batch_gradient(params: ParamVector, batch: Batch, mode: str,
                   dropout_seed: Optional[int] = None) -> np.ndarray:
    return loss_and_gradient(params, batch, mode, dropout_seed)[1]


def loss_and_per_sample_gradients(params: ParamVector, batch: Batch, mode: str,
                                  dropout_seed: Optional[int] = None):
    B = len(batch)
    out, rows = _run(params, batch, mode, dropout_seed, weights=np.ones(B),
                     per_example=True, want_grad=True)
    return out, PerSampleGradMatrix(rows)


def per_sample_gradients(params: ParamVector, batch: Batch, mode: str,
                         dropout_seed: Optional[int] = None) -> PerSampleGradMatrix:
    """Row i is the gradient of example i's loss alone, computed in one vectorised pass."""
    return loss_and_per_sample_gradients(params, batch, mode, dropout_seed)[1]


def per_sample_gradients_loop(params: ParamVector, batch: Batch, mode: str) -> PerSampleGradMatrix:
    """Reference strategy: one backward pass per example."""
    rows = [per_sample_gradients(params, batch[i], mode).rows[0] for i in range(len(batch))]
    return PerSampleGradMatrix(np.stack(rows) if rows else
                               np.zeros((0, len(params)), dtype=params.dtype))
