"""Small causal self-attention sequence model with explicit backward pass.

Pre-norm transformer blocks over a token embedding, a logits head over the
full vocabulary, and a scalar value head read at each sequence's final
position.  Everything is float64 numpy; the O(L^2) attention core is
delegated to the kernel backend.  Gradients are hand-derived; activations
are tanh throughout so the whole map is smooth and finite-difference
checkable.

Parameter naming:  tok_emb, pos_emb, blk{i}.{ln1,attn,ln2,mlp}.*, lnf.*,
head.* belong to the actor (theta); vhead.* is the critic (phi).
"""

import numpy as np

from . import _kernels as K
from .errors import ContractError

_LN_EPS = 1e-5


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _linear_bwd(x, w, dout):
    """Returns (dx, dw, db) for y = x @ w + b with x of shape [..., Din]."""
    din, dout_dim = w.shape
    x2 = x.reshape(-1, din)
    d2 = dout.reshape(-1, dout_dim)
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    dx = (d2 @ w.T).reshape(x.shape)
    return dx, dw, db


class SeqModel:
    """Architecture + parameter plumbing; forward/backward are stateless."""

    def __init__(self, policy_config, vocab_size):
        self.cfg = policy_config
        self.vocab_size = int(vocab_size)

    # -- parameters --------------------------------------------------------

    def init_params(self, rng):
        c = self.cfg
        s = c.init_scale

        def uni(*shape):
            return rng.uniform(-s, s, size=shape)

        p = {
            "tok_emb": uni(self.vocab_size, c.d_model),
            "pos_emb": uni(c.max_seq_len, c.d_model),
            "lnf.g": np.ones(c.d_model), "lnf.b": np.zeros(c.d_model),
            "head.w": uni(c.d_model, self.vocab_size),
            "head.b": np.zeros(self.vocab_size),
            # value head: final layer zero so initial values are exactly 0
            "vhead.w1": uni(c.d_model, c.d_model), "vhead.b1": np.zeros(c.d_model),
            "vhead.w2": np.zeros((c.d_model, 1)), "vhead.b2": np.zeros(1),
        }
        for i in range(c.n_blocks):
            b = f"blk{i}."
            p[b + "ln1.g"] = np.ones(c.d_model)
            p[b + "ln1.b"] = np.zeros(c.d_model)
            p[b + "attn.wqkv"] = uni(c.d_model, 3 * c.d_model)
            p[b + "attn.bqkv"] = np.zeros(3 * c.d_model)
            p[b + "attn.wo"] = uni(c.d_model, c.d_model)
            p[b + "attn.bo"] = np.zeros(c.d_model)
            p[b + "ln2.g"] = np.ones(c.d_model)
            p[b + "ln2.b"] = np.zeros(c.d_model)
            p[b + "mlp.w1"] = uni(c.d_model, c.d_ff)
            p[b + "mlp.b1"] = np.zeros(c.d_ff)
            p[b + "mlp.w2"] = uni(c.d_ff, c.d_model)
            p[b + "mlp.b2"] = np.zeros(c.d_model)
        return {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}

    @staticmethod
    def is_critic_param(name):
        return name.startswith("vhead.")

    def actor_keys(self, params):
        return [k for k in params if not self.is_critic_param(k)]

    def critic_keys(self, params):
        return [k for k in params if self.is_critic_param(k)]

    # -- forward ------------------------------------------------------------

    def _split_heads(self, x):
        B, L, D = x.shape
        H = self.cfg.n_heads
        return np.ascontiguousarray(x.reshape(B, L, H, D // H).transpose(0, 2, 1, 3))

    def _merge_heads(self, x):
        B, H, L, Dh = x.shape
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, L, H * Dh)

    def forward(self, params, tokens, lengths=None, need_cache=False):
        """tokens: [B, L] int ids right-padded; lengths: per-row true length.

        Returns (logits [B, L, V], values [B], cache).  values are read at
        position lengths-1.  Padding needs no masking: pads sit at the end,
        causal attention never lets a real position attend them, and loss
        positions are selected by the caller.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, L = tokens.shape
        if L > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {L} exceeds max_seq_len "
                                f"{self.cfg.max_seq_len}")
        if lengths is None:
            lengths = np.full(B, L, dtype=np.int64)
        else:
            lengths = np.asarray(lengths, dtype=np.int64)

        d = self.cfg.d_model
        x = params["tok_emb"][tokens] + params["pos_emb"][:L][None, :, :]
        blocks = []
        for i in range(self.cfg.n_blocks):
            b = f"blk{i}."
            h, ln1c = _layernorm_fwd(x, params[b + "ln1.g"], params[b + "ln1.b"])
            qkv = h @ params[b + "attn.wqkv"] + params[b + "attn.bqkv"]
            q = self._split_heads(qkv[..., :d])
            k = self._split_heads(qkv[..., d:2 * d])
            v = self._split_heads(qkv[..., 2 * d:])
            y, p_attn = K.attention_forward(q, k, v)
            ym = self._merge_heads(y)
            x1 = x + (ym @ params[b + "attn.wo"] + params[b + "attn.bo"])
            h2, ln2c = _layernorm_fwd(x1, params[b + "ln2.g"], params[b + "ln2.b"])
            u = h2 @ params[b + "mlp.w1"] + params[b + "mlp.b1"]
            a = np.tanh(u)
            x2 = x1 + (a @ params[b + "mlp.w2"] + params[b + "mlp.b2"])
            if need_cache:
                blocks.append((x, ln1c, h, q, k, v, p_attn, ym, x1, ln2c, h2, a))
            x = x2

        xf, lnfc = _layernorm_fwd(x, params["lnf.g"], params["lnf.b"])
        logits = xf @ params["head.w"] + params["head.b"]

        rows = np.arange(B)
        hfin = xf[rows, lengths - 1]                      # [B, D]
        z1 = hfin @ params["vhead.w1"] + params["vhead.b1"]
        a1 = np.tanh(z1)
        values = (a1 @ params["vhead.w2"] + params["vhead.b2"])[:, 0]

        cache = None
        if need_cache:
            cache = {"tokens": tokens, "lengths": lengths, "blocks": blocks,
                     "xf": xf, "lnfc": lnfc, "hfin": hfin, "a1": a1}
        return logits, values, cache

    # -- backward -----------------------------------------------------------

    def _value_head_bwd(self, params, cache, dvalues):
        a1 = cache["a1"]
        hfin = cache["hfin"]
        dvalues = np.asarray(dvalues, dtype=np.float64)
        grads = {}
        grads["vhead.w2"] = a1.T @ dvalues[:, None]
        grads["vhead.b2"] = np.array([dvalues.sum()])
        da1 = dvalues[:, None] * params["vhead.w2"][:, 0][None, :]
        dz1 = da1 * (1.0 - a1 * a1)
        grads["vhead.w1"] = hfin.T @ dz1
        grads["vhead.b1"] = dz1.sum(axis=0)
        dhfin = dz1 @ params["vhead.w1"].T
        return grads, dhfin

    def backward_value_head(self, params, cache, dvalues):
        """Critic-only gradients (the value head never feeds the trunk loss)."""
        grads, _ = self._value_head_bwd(params, cache, dvalues)
        return grads

    def backward(self, params, cache, dlogits, dvalues):
        """Gradients of sum(dlogits * logits) + sum(dvalues * values)."""
        tokens = cache["tokens"]
        lengths = cache["lengths"]
        B, L = tokens.shape
        d = self.cfg.d_model
        grads = {}

        xf = cache["xf"]
        dxf, grads["head.w"], grads["head.b"] = _linear_bwd(xf, params["head.w"],
                                                            dlogits)
        vgrads, dhfin = self._value_head_bwd(params, cache, dvalues)
        grads.update(vgrads)
        rows = np.arange(B)
        dxf[rows, lengths - 1] += dhfin

        dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_bwd(dxf, params["lnf.g"],
                                                            cache["lnfc"])

        for i in reversed(range(self.cfg.n_blocks)):
            b = f"blk{i}."
            (x_in, ln1c, h, q, k, v, p_attn, ym, x1, ln2c, h2, a) = cache["blocks"][i]
            # MLP branch
            da, grads[b + "mlp.w2"], grads[b + "mlp.b2"] = _linear_bwd(
                a, params[b + "mlp.w2"], dx)
            du = da * (1.0 - a * a)
            dh2, grads[b + "mlp.w1"], grads[b + "mlp.b1"] = _linear_bwd(
                h2, params[b + "mlp.w1"], du)
            dln2, grads[b + "ln2.g"], grads[b + "ln2.b"] = _layernorm_bwd(
                dh2, params[b + "ln2.g"], ln2c)
            dx1 = dx + dln2
            # attention branch
            dym, grads[b + "attn.wo"], grads[b + "attn.bo"] = _linear_bwd(
                ym, params[b + "attn.wo"], dx1)
            dyh = self._split_heads(dym)
            dq, dk, dv = K.attention_backward(np.ascontiguousarray(dyh), p_attn,
                                              q, k, v)
            dqkv = np.concatenate([self._merge_heads(dq), self._merge_heads(dk),
                                   self._merge_heads(dv)], axis=-1)
            dh, grads[b + "attn.wqkv"], grads[b + "attn.bqkv"] = _linear_bwd(
                h, params[b + "attn.wqkv"], dqkv)
            dln1, grads[b + "ln1.g"], grads[b + "ln1.b"] = _layernorm_bwd(
                dh, params[b + "ln1.g"], ln1c)
            dx = dx1 + dln1

        grads["pos_emb"] = np.zeros_like(params["pos_emb"])
        grads["pos_emb"][:L] = dx.sum(axis=0)
        # scatter-add via one-hot matmul (much faster than np.add.at)
        flat = tokens.reshape(-1)
        onehot = np.zeros((flat.shape[0], self.vocab_size))
        onehot[np.arange(flat.shape[0]), flat] = 1.0
        grads["tok_emb"] = onehot.T @ dx.reshape(-1, dx.shape[-1])
        return grads
