"""Diagnosis-code sequence encoder: pretrained embeddings + Bi-LSTM.

Codes are 3-character ICD-10 prefixes. Each code is looked up in a
compressed pretrained embedding table (or a seeded random table for the
from-scratch ablation), the chronological sequence runs through one
bidirectional LSTM layer, and the concatenated final hidden states are
projected to the shared fusion dimension. Embedding vectors are trainable in
both initialization modes.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

NULL_TOKEN = "<null>"  # stands in for post-filter empty sequences


class EmbeddingFileError(ValueError):
    """Malformed embedding file."""


class EmbeddingTable:
    """Code -> vector table with declared dimension and provenance."""

    def __init__(self, vocab: list[str], vectors: np.ndarray, source: str):
        if len(vocab) != len(set(vocab)):
            raise EmbeddingFileError("duplicate codes in embedding table")
        self.vocab = list(vocab)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.source = source
        if self.vectors.shape[0] != len(self.vocab):
            raise EmbeddingFileError("one vector per code required")
        if not np.isfinite(self.vectors).all():
            raise EmbeddingFileError("non-finite embedding vector")
        self.index = {c: i for i, c in enumerate(self.vocab)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Parse an embedding file: header ``#dim=h``, lines ``CODE\\tv1,v2,...``."""
    vocab: list[str] = []
    rows: list[np.ndarray] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#dim="):
            raise EmbeddingFileError("missing '#dim=h' header line")
        try:
            dim = int(header[5:])
        except ValueError as exc:
            raise EmbeddingFileError(f"bad dimension header: {header!r}") from exc
        if expected_dim is not None and dim != expected_dim:
            raise EmbeddingFileError(f"embedding dim {dim} != configured {expected_dim}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                code, values = line.split("\t")
                vec = np.array([float(x) for x in values.split(",")])
            except ValueError as exc:
                raise EmbeddingFileError(f"malformed record on line {ln}") from exc
            if vec.size != dim:
                raise EmbeddingFileError(f"line {ln}: expected {dim} values, got {vec.size}")
            if code in vocab:
                raise EmbeddingFileError(f"duplicate code {code!r} on line {ln}")
            vocab.append(code)
            rows.append(vec)
    return EmbeddingTable(vocab, np.stack(rows) if rows else np.zeros((0, dim)), "pretrained-file")


def random_table(vocab: list[str], dim: int, seed: int) -> EmbeddingTable:
    """i.i.d. normal(0, 0.02) table: the from-scratch embedding ablation."""
    rng = np.random.default_rng(seed)
    return EmbeddingTable(list(vocab), rng.normal(0.0, 0.02, size=(len(vocab), dim)),
                          "random-init")


def build_embedding_matrix(table: EmbeddingTable, model_vocab: list[str],
                           seed: int) -> np.ndarray:
    """Align a table to the model vocabulary; row 0 is the null token.

    Codes absent from the table get seeded normal(0, 0.02) rows and a logged
    warning.
    """
    rng = np.random.default_rng(seed)
    out = np.zeros((len(model_vocab) + 1, table.dim))
    out[0] = rng.normal(0.0, 0.02, size=table.dim)  # null token row
    missing = []
    for i, code in enumerate(model_vocab, start=1):
        j = table.index.get(code)
        if j is None:
            missing.append(code)
            out[i] = rng.normal(0.0, 0.02, size=table.dim)
        else:
            out[i] = table.vectors[j]
    if missing:
        logger.warning("%d codes missing from embedding file (random init): %s",
                       len(missing), ", ".join(missing[:8]))
    return out


def init_lstm_params(rng: np.random.Generator, input_dim: int, hidden: int) -> dict[str, np.ndarray]:
    """One LSTM direction: fan-in uniform inputs, orthogonal recurrence,
    zero biases with forget gate at 1."""

    def orthogonal(n):
        a = rng.normal(size=(n, n))
        q, r = np.linalg.qr(a)
        return q * np.sign(np.diag(r))

    bound = 1.0 / np.sqrt(input_dim)
    wx = rng.uniform(-bound, bound, size=(input_dim, 4 * hidden))
    wh = np.concatenate([orthogonal(hidden) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {"wx": wx, "wh": wh, "b": b}


def _lstm_direction(emb: ad.Tensor, mask: np.ndarray, wx: ad.Tensor, wh: ad.Tensor,
                    b: ad.Tensor, hidden: int, reverse: bool) -> ad.Tensor:
    """Run one direction over (batch, T, h) embeddings; returns final h."""
    B, T, _ = emb.data.shape
    h = ad.constant(np.zeros((B, hidden)))
    c = ad.constant(np.zeros((B, hidden)))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        x_t = ad.reshape(ad.narrow(emb, 1, t, t + 1), (B, -1))
        gates = ad.bias_add(ad.add(ad.matmul(x_t, wx), ad.matmul(h, wh)), b)
        i = ad.sigmoid(ad.narrow(gates, 1, 0, hidden))
        f = ad.sigmoid(ad.narrow(gates, 1, hidden, 2 * hidden))
        g = ad.tanh(ad.narrow(gates, 1, 2 * hidden, 3 * hidden))
        o = ad.sigmoid(ad.narrow(gates, 1, 3 * hidden, 4 * hidden))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        m = mask[:, t:t + 1]
        if m.all():
            h, c = h_new, c_new
        else:  # padded rows carry their previous state
            c = ad.add(ad.mul_const(c_new, m), ad.mul_const(c, 1.0 - m))
            h = ad.add(ad.mul_const(h_new, m), ad.mul_const(h, 1.0 - m))
    return h


def bilstm_encode(emb: ad.Tensor, mask: np.ndarray, params: dict[str, ad.Tensor],
                  hidden: int) -> ad.Tensor:
    """Concatenated final forward/backward hidden states, (batch, 2*hidden).

    Sequences are end-padded; ``mask`` marks valid positions, and padded
    steps carry state so the forward final state is the last valid one.
    """
    fw = _lstm_direction(emb, mask, params["fw.wx"], params["fw.wh"], params["fw.b"],
                         hidden, reverse=False)
    bw = _lstm_direction(emb, mask, params["bw.wx"], params["bw.wh"], params["bw.b"],
                         hidden, reverse=True)
    return ad.concat([fw, bw], axis=1)


def encode_codes(emb: ad.Tensor, mask: np.ndarray, params: dict[str, ad.Tensor],
                 hidden: int) -> ad.Tensor:
    """Project the Bi-LSTM summary to the shared fusion dimension."""
    z = bilstm_encode(emb, mask, params, hidden)
    return ad.matmul(z, params["w_proj"])


def pad_code_batch(sequences: list[list[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad index sequences; empty sequences become [null]."""
    seqs = [s[-max_len:] if s else [0] for s in sequences]
    T = max(len(s) for s in seqs)
    idx = np.zeros((len(seqs), T), dtype=np.intp)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return idx, mask
