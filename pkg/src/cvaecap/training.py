"""Conditional ELBO, per-example SGD training and checkpoint persistence.

Checkpoint file layout (format ``cvaecap-checkpoint``, version 1)::

    line 1   header JSON: {"format", "version", "sha256", "length"}
    rest     payload: canonical JSON (sorted keys, no whitespace) holding
             config, vocabulary tokens, prior, encoder/decoder parameters
             (base64 little-endian float64 + shape), epoch, rng state and
             per-epoch metrics.

``sha256`` and ``length`` cover the payload bytes exactly.
"""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import numcore as nc
from . import priors as P
from .corpus import FEATURE_DIM, cluster_vector_from_labels
from .seqmodel import DecoderNet, EncoderNet, decode_logloss, encode
from .vocab import Vocabulary

log = logging.getLogger(__name__)

CKPT_FORMAT = "cvaecap-checkpoint"
CKPT_VERSION = 1

VARIANTS = {
    # name: (prior kind or None, encoder head combination)
    "lstm-baseline": (None, None),
    "cvae": ("fixed", "single"),
    "gmm-cvae": ("gmm", "single"),
    "ag-cvae": ("additive", "additive"),
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    variant: str = "ag-cvae"
    K: int = 8
    latent_dim: int = 16
    sigma_train: float = 0.1
    fixed_sigma: float = 1.0  # std of the vanilla CVAE's N(0, s^2 I) prior
    lr0: float = 0.01
    epochs: int = 30
    halve_every: int = 5
    seed: int = 0
    kl_weight: float = 1.0
    clip_value: float = 5.0  # elementwise gradient cap per step; 0 disables
    embed_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 20
    feat_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not self.lr0 > 0 or self.epochs < 1 or self.halve_every < 1:
            raise ValueError("need lr0 > 0, epochs >= 1, halve_every >= 1")
        if self.clip_value < 0:
            raise ValueError("clip_value must be >= 0")
        if not self.sigma_train > 0 or not self.fixed_sigma > 0:
            raise ValueError("prior standard deviations must be positive")

    @property
    def prior_kind(self):
        return VARIANTS[self.variant][0]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def learning_rate(cfg, epoch):
    """lr0 halved every ``halve_every`` epochs; ``epoch`` counts from 0."""
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.halve_every))


@dataclass
class CaptionModel:
    config: TrainConfig
    vocab: Vocabulary
    decoder: DecoderNet
    encoder: Optional[EncoderNet] = None
    prior: Optional[P.PriorSpec] = None
    epoch: int = 0
    rng_state: Optional[dict] = None
    history: list = field(default_factory=list)
    run_config: Optional[dict] = None  # resolved command-line config, kept for provenance

    @property
    def variant(self):
        return self.config.variant

    def params(self):
        out = {f"dec.{k}": v for k, v in self.decoder.params().items()}
        if self.encoder is not None:
            out.update({f"enc.{k}": v for k, v in self.encoder.params().items()})
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()


def build_model(cfg, vocab):
    rng = np.random.default_rng(cfg.seed)
    kind, combine = VARIANTS[cfg.variant]
    V = len(vocab)
    dims = dict(embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim, max_len=cfg.max_len)
    dec = DecoderNet(V, cfg.K, cfg.feat_dim, cfg.latent_dim, rng, use_latent=kind is not None,
                     start_id=vocab.start, end_id=vocab.end, **dims)
    enc = prior = None
    if kind is not None:
        sigma = cfg.fixed_sigma if kind == "fixed" else cfg.sigma_train
        prior = P.init_prior(kind, cfg.K, cfg.latent_dim, sigma, seed=cfg.seed + 1)
        # heads start at the prior variance so the first KL steps stay moderate
        enc = EncoderNet(V, cfg.K, cfg.feat_dim, cfg.latent_dim, rng, combine=combine,
                         init_log_var=2.0 * math.log(sigma), **dims)
    return CaptionModel(cfg, vocab, dec, enc, prior)


def kl_term(q, prior, c, rng):
    if prior.kind == "fixed":
        return P.kl_fixed(q, prior)
    if prior.kind == "additive":
        return P.kl_ag(q, prior, c)
    return P.kl_gmm_component(q, prior, P.sample_gmm_component(c, rng))


def reparameterize(q, eps):
    """z = mu + exp(log_var / 2) * eps, differentiable in the posterior parameters."""
    return nc.add(q.mu, nc.mul(nc.exp(nc.mul(q.log_var, 0.5)), eps))


def elbo_terms(model, feat, c, ids, rng):
    """(loss, reconstruction, KL) nodes of the single-sample negative ELBO."""
    cfg = model.config
    if model.encoder is None:
        recon = decode_logloss(model.decoder, feat, c, None, ids)
        return recon, recon, nc.constant(0.0)
    q = encode(model.encoder, feat, c, ids)
    z = reparameterize(q, rng.standard_normal((1, cfg.latent_dim)))
    recon = decode_logloss(model.decoder, feat, c, z, ids)
    kl = kl_term(q, model.prior, c, rng)
    return nc.add(recon, nc.mul(kl, cfg.kl_weight)), recon, kl


def elbo_loss(model, feat, c, ids, rng):
    return elbo_terms(model, feat, c, ids, rng)[0]


def train(model, scenes, epochs=None, on_epoch=None):
    """Plain per-example SGD; continues from ``model.epoch``.

    Each epoch visits every scene once in a shuffled order, using one of its
    references drawn at random.
    """
    if not scenes:
        raise ValueError("empty training set")
    cfg = model.config
    rng = np.random.default_rng(cfg.seed)
    if model.rng_state is not None:
        rng.bit_generator.state = model.rng_state
    params = list(model.params().values())
    encoded = [([model.vocab.encode(r) for r in s.references], s.feat, cluster_vector_from_labels(s.categories, cfg.K))
               for s in scenes]
    end = model.epoch + (cfg.epochs if epochs is None else epochs)
    while model.epoch < end:
        lr = learning_rate(cfg, model.epoch)
        order = rng.permutation(len(encoded))
        sum_recon = sum_kl = 0.0
        for idx in order:
            refs, feat, c = encoded[idx]
            ids = refs[rng.integers(len(refs))]
            try:
                loss, recon, kl = elbo_terms(model, feat, c, ids, rng)
                nc.backward(loss)
            except nc.NumericError as exc:
                raise TrainingError(f"non-finite loss at epoch {model.epoch}, example {int(idx)}: {exc}") from exc
            for p in params:
                if cfg.clip_value:
                    np.clip(p.grad, -cfg.clip_value, cfg.clip_value, out=p.grad)
                p.value -= lr * p.grad
                p.grad[...] = 0.0
            sum_recon += float(recon)
            sum_kl += float(kl)
        n = len(encoded)
        record = {"epoch": model.epoch, "lr": lr, "recon": sum_recon / n, "kl": sum_kl / n,
                  "loss": (sum_recon + cfg.kl_weight * sum_kl) / n}
        if not all(math.isfinite(v) for v in record.values()):
            raise TrainingError(f"non-finite epoch metrics: {record}")
        model.history.append(record)
        model.epoch += 1
        model.rng_state = rng.bit_generator.state
        log.info("epoch %(epoch)d lr %(lr).5f recon %(recon).4f kl %(kl).4f", record)
        if on_epoch is not None:
            on_epoch(record)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def _pack(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(d):
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _payload(model):
    return {
        "tool_version": __version__,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens[3:],
        "prior": None if model.prior is None else {
            "kind": model.prior.kind, "latent_dim": model.prior.latent_dim,
            "means": _pack(model.prior.means), "stds": _pack(model.prior.stds)},
        "decoder": {k: _pack(v) for k, v in model.decoder.state_dict().items()},
        "encoder": None if model.encoder is None else {k: _pack(v) for k, v in model.encoder.state_dict().items()},
        "epoch": model.epoch,
        "rng_state": model.rng_state,
        "history": model.history,
        "run_config": model.run_config,
    }


def dumps_checkpoint(model):
    body = json.dumps(_payload(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION,
              "sha256": hashlib.sha256(body).hexdigest(), "length": len(body)}
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body


def save_checkpoint(model, path):
    path = Path(path)
    data = dumps_checkpoint(model)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def loads_checkpoint(data):
    head, sep, body = data.partition(b"\n")
    try:
        header = json.loads(head)
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if not sep or not isinstance(header, dict) or header.get("format") != CKPT_FORMAT:
        raise CheckpointError("not a checkpoint file")
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if len(body) != header.get("length") or hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint corrupted: checksum mismatch")
    p = json.loads(body)
    cfg = TrainConfig.from_dict(p["config"])
    vocab = Vocabulary(p["vocab"])
    model = build_model(cfg, vocab)
    model.decoder.load_state_dict({k: _unpack(v) for k, v in p["decoder"].items()})
    if p["encoder"] is not None:
        model.encoder.load_state_dict({k: _unpack(v) for k, v in p["encoder"].items()})
    if p["prior"] is not None:
        pr = p["prior"]
        model.prior = P.PriorSpec(pr["kind"], _unpack(pr["means"]), _unpack(pr["stds"]), pr["latent_dim"])
    model.epoch = p["epoch"]
    model.rng_state = p["rng_state"]
    model.history = p["history"]
    model.run_config = p.get("run_config")
    return model


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(data)
