"""Recurrent encoder and decoder, plus greedy / ancestral / beam decoding.

Encoder input rows: [feature projection, cluster projection, word embeddings].
Decoder input rows: [feature projection, cluster projection, z projection,
<start>, x_1, ..., x_T]; it predicts x_1 ... x_T, <end>.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .priors import GaussianPosterior

INIT_SCALE = 0.08


def _uniform(rng, *shape):
    return nc.parameter(rng.uniform(-INIT_SCALE, INIT_SCALE, shape))


def _zeros(*shape):
    return nc.parameter(np.zeros(shape))


class _Net:
    """Common parameter bookkeeping: ``params()`` returns an ordered name -> Node dict."""

    def params(self):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, nc.Node):
                out[name] = value
            elif isinstance(value, nc.GRUWeights):
                for sub, node in value.params().items():
                    out[f"{name}.{sub}"] = node
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def state_dict(self):
        return {k: v.value.copy() for k, v in self.params().items()}

    def load_state_dict(self, state):
        params = self.params()
        if set(state) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            if params[k].value.shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {params[k].value.shape}")
            params[k].value[...] = v

    def _project_conditions(self, feat, c):
        f = nc.linear(nc.constant(np.asarray(feat, dtype=np.float64).reshape(1, -1)), self.feat_w, self.feat_b)
        k = nc.linear(nc.constant(c.weights.reshape(1, -1)), self.clu_w, self.clu_b)
        return f, k


class EncoderNet(_Net):
    """Maps (feature, cluster vector, caption) to K posterior head pairs.

    ``combine="additive"`` mixes the heads with weights c_k and c_k^2;
    ``combine="single"`` uses head 0 only (fixed and gmm priors).
    """

    def __init__(self, vocab_size, K, feat_dim, latent_dim, rng, embed_dim=32, hidden_dim=64,
                 combine="single", max_len=20, init_log_var=0.0):
        if combine not in ("single", "additive"):
            raise ValueError(f"unknown head combination {combine!r}")
        self.vocab_size, self.K, self.feat_dim, self.latent_dim = vocab_size, K, feat_dim, latent_dim
        self.combine, self.max_len = combine, max_len
        self.embed = _uniform(rng, vocab_size, embed_dim)
        self.feat_w, self.feat_b = _uniform(rng, feat_dim, embed_dim), _zeros(embed_dim)
        self.clu_w, self.clu_b = _uniform(rng, K, embed_dim), _zeros(embed_dim)
        self.cell = nc.GRUWeights(embed_dim, hidden_dim, rng, INIT_SCALE)
        self.mu_w, self.mu_b = _uniform(rng, hidden_dim, K * latent_dim), _zeros(K * latent_dim)
        self.lv_w = _uniform(rng, hidden_dim, K * latent_dim)
        self.lv_b = nc.parameter(np.full(K * latent_dim, float(init_log_var)))

    def heads(self, feat, c, ids):
        """Raw head outputs as (K x d mean node, K x d log-variance node)."""
        if len(ids) > self.max_len:
            raise ValueError(f"sequence of length {len(ids)} exceeds max_len={self.max_len}")
        if len(c) != self.K:
            raise ValueError(f"cluster vector length {len(c)} != K={self.K}")
        f, k = self._project_conditions(feat, c)
        rows = [f, k]
        if len(ids):
            rows.append(nc.gather(self.embed, ids))
        hs = nc.gru_sequence(nc.concat_rows(rows), self.cell)
        h_last = nc.take_rows(hs, [len(ids) + 1])
        shape = (self.K, self.latent_dim)
        return (nc.reshape(nc.linear(h_last, self.mu_w, self.mu_b), shape),
                nc.reshape(nc.linear(h_last, self.lv_w, self.lv_b), shape))


def encode(enc, feat, c, ids):
    mu_k, lv_k = enc.heads(feat, c, ids)
    if enc.combine == "single":
        return GaussianPosterior(nc.take_rows(mu_k, [0]), nc.take_rows(lv_k, [0]))
    w = c.weights.reshape(1, -1)
    mu = nc.matmul(nc.constant(w), mu_k)
    var = nc.matmul(nc.constant(w * w), nc.exp(lv_k))
    return GaussianPosterior(mu, nc.log(var))


class DecoderNet(_Net):
    def __init__(self, vocab_size, K, feat_dim, latent_dim, rng, embed_dim=32, hidden_dim=64,
                 use_latent=True, max_len=20, start_id=0, end_id=1):
        self.vocab_size, self.K, self.feat_dim, self.latent_dim = vocab_size, K, feat_dim, latent_dim
        self.use_latent, self.max_len = use_latent, max_len
        self.start_id, self.end_id = start_id, end_id
        self.embed = _uniform(rng, vocab_size, embed_dim)
        self.feat_w, self.feat_b = _uniform(rng, feat_dim, embed_dim), _zeros(embed_dim)
        self.clu_w, self.clu_b = _uniform(rng, K, embed_dim), _zeros(embed_dim)
        self.z_w, self.z_b = _uniform(rng, latent_dim, embed_dim), _zeros(embed_dim)
        self.cell = nc.GRUWeights(embed_dim, hidden_dim, rng, INIT_SCALE)
        self.out_w, self.out_b = _uniform(rng, hidden_dim, vocab_size), _zeros(vocab_size)

    def _z_row(self, z):
        if not self.use_latent:
            # the baseline has no z input: a constant zero row cuts every path from z
            return nc.linear(nc.constant(np.zeros((1, self.latent_dim))), self.z_w, self.z_b)
        if isinstance(z, nc.Node):
            zn = z if z.value.ndim == 2 else nc.reshape(z, (1, -1))
        else:
            zn = nc.constant(_z_array(z, self.latent_dim).reshape(1, -1))
        if zn.shape != (1, self.latent_dim):
            raise ValueError(f"latent of shape {zn.shape}, expected (1, {self.latent_dim})")
        return nc.linear(zn, self.z_w, self.z_b)

    # -- raw-array stepping for decoding ------------------------------------

    def prefix_state(self, feat, c, z):
        """Hidden state after consuming feature, cluster vector and z."""
        w, u, b = self.cell.w.value, self.cell.u.value, self.cell.b.value
        z = np.zeros(self.latent_dim) if z is None or not self.use_latent else _z_array(z, self.latent_dim)
        rows = (np.asarray(feat) @ self.feat_w.value + self.feat_b.value,
                c.weights @ self.clu_w.value + self.clu_b.value,
                z @ self.z_w.value + self.z_b.value)
        h = np.zeros(self.cell.hidden_dim)
        for x in rows:
            h = nc.gru_step(w, u, b, x, h)
        return h

    def step(self, h, token):
        """Feed ``token``; return (log-probabilities of the next token, new state)."""
        h = nc.gru_step(self.cell.w.value, self.cell.u.value, self.cell.b.value, self.embed.value[token], h)
        logits = h @ self.out_w.value + self.out_b.value
        return nc.log_softmax(logits), h


def _z_array(z, d):
    z = getattr(z, "z", z)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != d:
        raise ValueError(f"latent of size {z.size}, expected {d}")
    return z


def decode_logloss(dec, feat, c, z, ids):
    """Teacher-forced sum of -log p(x_t | history), including the <end> token."""
    if len(ids) > dec.max_len:
        raise ValueError(f"sequence of length {len(ids)} exceeds max_len={dec.max_len}")
    if len(c) != dec.K:
        raise ValueError(f"cluster vector length {len(c)} != K={dec.K}")
    f, k = dec._project_conditions(feat, c)
    zr = dec._z_row(z)
    words = nc.gather(dec.embed, [dec.start_id] + list(ids))
    hs = nc.gru_sequence(nc.concat_rows([f, k, zr, words]), dec.cell)
    logits = nc.linear(nc.take_rows(hs, slice(3, None)), dec.out_w, dec.out_b)
    return nc.softmax_cross_entropy(logits, list(ids) + [dec.end_id])


def generate(dec, feat, c, z, mode="greedy", rng=None, max_len=None):
    """Autoregressive rollout; stops at <end> or after ``max_len`` tokens."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs a random generator")
    max_len = dec.max_len if max_len is None else max_len
    h = dec.prefix_state(feat, c, z)
    token, out = dec.start_id, []
    for _ in range(max_len):
        logp, h = dec.step(h, token)
        logp[dec.start_id] = -np.inf
        if mode == "greedy":
            token = int(np.argmax(logp))
        else:
            p = np.exp(logp - logp.max())
            token = int(rng.choice(len(p), p=p / p.sum()))
        if token == dec.end_id:
            break
        out.append(token)
    return out


def beam_search_core(initial, advance, width, max_len, end_id, banned=()):
    """Beam search over an abstract next-token model.

    ``initial()`` returns (log-probs, state) for the first position and
    ``advance(state, token)`` the same after feeding ``token``.  Finished
    hypotheses leave the beam, which therefore shrinks; a hypothesis that
    reaches ``max_len`` tokens is closed with the log-probability of <end>.
    Returns up to ``width`` (token list, log-prob) pairs, best first.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    logp, state = initial()
    alive = [(0.0, [], logp, state)]
    done = []
    for t in range(max_len + 1):
        cands = []
        for rank, (score, seq, logp, state) in enumerate(alive):
            if t == max_len:
                done.append((score + float(logp[end_id]), seq))
                continue
            for tok in range(len(logp)):
                if tok in banned or logp[tok] == -np.inf:
                    continue
                cands.append((score + float(logp[tok]), rank, tok))
        if t == max_len or not cands:
            break
        cands.sort(key=lambda x: (-x[0], x[1], x[2]))
        next_alive = []
        for score, rank, tok in cands[: width - len(done)]:
            seq = alive[rank][1]
            if tok == end_id:
                done.append((score, seq))
            else:
                lp, st = advance(alive[rank][3], tok)
                next_alive.append((score, seq + [tok], lp, st))
        alive = next_alive
        if not alive:
            break
    done.sort(key=lambda x: -x[0])
    return [(seq, score) for score, seq in done[:width]]


def beam_search(dec, feat, c, width, max_len=None, z=None):
    """Beam search over the decoder; ``z`` defaults to the zero vector."""
    max_len = dec.max_len if max_len is None else max_len
    h0 = dec.prefix_state(feat, c, z)
    return beam_search_core(lambda: dec.step(h0, dec.start_id),
                            lambda h, tok: dec.step(h, tok),
                            width, max_len, dec.end_id, banned={dec.start_id})


def sequence_log_prob(dec, feat, c, z, ids):
    """Exact log-probability of ``ids`` followed by <end>, via the teacher-forced loss."""
    return -float(decode_logloss(dec, feat, c, z, ids))

