"""Tiny causal decoder used as the frozen backbone for adapter experiments."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg as la
from .linalg import Matrix, ShapeError, Tape


@dataclass(frozen=True)
class TinyTransformerConfig:
    n_layers: int = 6
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    vocab: int = 32
    seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 3:
            raise ValueError(f"n_layers must be >= 3, got {self.n_layers}")

    def to_dict(self) -> dict:
        return asdict(self)


LAYER_WEIGHTS = ("ln1_g", "ln1_b", "W_q", "W_k", "W_v", "W_o", "ln2_g", "ln2_b", "W_1", "b_1", "W_2", "b_2")


@dataclass
class FrozenBackbone:
    config: TinyTransformerConfig
    weights: dict[str, Matrix] = field(default_factory=dict)

    @classmethod
    def init(cls, config: TinyTransformerConfig) -> FrozenBackbone:
        rng = la.make_rng(config.seed)
        d, f = config.d_model, config.d_ff
        out_std = 1.0 / math.sqrt(2 * config.n_layers)
        w = {
            "tok_emb": Matrix.normal(config.vocab, d, 1.0, rng),
            "pos_emb": Matrix.normal(config.seq_len, d, 1.0, rng),
        }
        for l in range(config.n_layers):
            p = f"h{l}."
            w[p + "ln1_g"] = Matrix(np.ones((1, d)))
            w[p + "ln1_b"] = Matrix.zeros(1, d)
            for name in ("W_q", "W_k", "W_v"):
                w[p + name] = Matrix.normal(d, d, 1.0 / math.sqrt(d), rng)
            w[p + "W_o"] = Matrix.normal(d, d, out_std / math.sqrt(d), rng)
            w[p + "ln2_g"] = Matrix(np.ones((1, d)))
            w[p + "ln2_b"] = Matrix.zeros(1, d)
            w[p + "W_1"] = Matrix.normal(d, f, 1.0 / math.sqrt(d), rng)
            w[p + "b_1"] = Matrix.zeros(1, f)
            w[p + "W_2"] = Matrix.normal(f, d, out_std / math.sqrt(f), rng)
            w[p + "b_2"] = Matrix.zeros(1, d)
        w["lnf_g"] = Matrix(np.ones((1, d)))
        w["lnf_b"] = Matrix.zeros(1, d)
        return cls(config, w)

    def copy(self) -> FrozenBackbone:
        return FrozenBackbone(self.config, {k: m.copy() for k, m in self.weights.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name].data).tobytes())
        return h.hexdigest()

    def projection(self, layer: int, kind: str) -> Matrix:
        return self.weights[f"h{layer}.{_KIND_TO_WEIGHT[kind]}"]


_KIND_TO_WEIGHT = {"query": "W_q", "key": "W_k", "value": "W_v", "output": "W_o"}


def _affine_norm(x: Matrix, g: Matrix, b: Matrix) -> Matrix:
    return la.add(la.mul(la.layer_norm(x), g), b)


def forward(
    backbone: FrozenBackbone,
    adapters,
    tokens: np.ndarray,
    tape: Tape | None = None,
    train_backbone: bool = False,
    capture: list | None = None,
) -> Matrix:
    """Logits of shape ``(batch*seq, vocab)`` for an int array ``tokens`` of shape ``(batch, seq)``.

    Query and value projections of layer ``l`` use ``W + adapters.delta_for_layer(l, kind)``
    for every kind the adapter set registers. ``adapters=None`` runs the bare backbone.
    Backbone weights only enter ``tape`` as parameters when ``train_backbone`` is set.
    ``capture``, if given, receives each layer's residual-stream output.
    """
    cfg = backbone.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    batch, seq = tokens.shape
    if seq > cfg.seq_len:
        raise ShapeError(f"sequence length {seq} exceeds configured seq_len {cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token ids must lie in [0, {cfg.vocab})")
    if adapters is not None and adapters.d_model != cfg.d_model:
        raise ShapeError(f"adapter d_model {adapters.d_model} != backbone d_model {cfg.d_model}")
    if adapters is not None and adapters.n_layers != cfg.n_layers:
        raise ShapeError(f"adapter n_layers {adapters.n_layers} != backbone n_layers {cfg.n_layers}")

    if train_backbone:
        if tape is None:
            raise ValueError("train_backbone needs a tape")

        def W(name: str) -> Matrix:
            return tape.param(f"backbone/{name}", backbone.weights[name])
    else:
        def W(name: str) -> Matrix:
            return backbone.weights[name]

    kinds = set(adapters.kinds) if adapters is not None else set()

    def proj(layer: int, kind: str) -> Matrix:
        base = W(f"h{layer}.{_KIND_TO_WEIGHT[kind]}")
        if kind in kinds:
            return la.add(base, adapters.delta_for_layer(layer, kind, tape))
        return base

    flat = tokens.reshape(-1)
    pos = np.tile(np.arange(seq), batch)
    x = la.add(la.take_rows(W("tok_emb"), flat), la.take_rows(W("pos_emb"), pos))

    for l in range(cfg.n_layers):
        p = f"h{l}."
        h = _affine_norm(x, W(p + "ln1_g"), W(p + "ln1_b"))
        q = la.matmul(h, proj(l, "query"))
        k = la.matmul(h, proj(l, "key"))
        v = la.matmul(h, proj(l, "value"))
        att = la.causal_attention(q, k, v, seq, cfg.n_heads)
        x = la.add(x, la.matmul(att, proj(l, "output")))

        h = _affine_norm(x, W(p + "ln2_g"), W(p + "ln2_b"))
        ff = la.gelu(la.add(la.matmul(h, W(p + "W_1")), W(p + "b_1")))
        x = la.add(x, la.add(la.matmul(ff, W(p + "W_2")), W(p + "b_2")))
        if capture is not None:
            capture.append(x.data.copy())

    h = _affine_norm(x, W("lnf_g"), W("lnf_b"))
    # tied output head; 1/sqrt(d) keeps initial logits at unit scale
    return la.scale(la.matmul(h, la.transpose(W("tok_emb"))), 1.0 / math.sqrt(cfg.d_model))


def loss_cross_entropy(logits: Matrix, targets: np.ndarray, mask: np.ndarray | None = None) -> Matrix:
    """Mean token-level negative log-likelihood; ``targets`` may be ``(batch, seq)``."""
    return la.cross_entropy(logits, np.asarray(targets).reshape(-1),
                            None if mask is None else np.asarray(mask).reshape(-1))
