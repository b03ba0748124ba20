"""End-to-end model assembly: parameters, batching, and the forward pass.

A model is a flat dict of named float64 arrays (addressable for the
optimizer and checkpointing) plus the experiment config. The forward pass
is batched: panel paths integrate with a shared adaptive step sequence per
mini-batch, codes run through the Bi-LSTM with padding masks, and the
configured fusion feeds the MLP head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codes as codes_mod
from . import fusion as fusion_mod
from . import labs as labs_mod
from .config import ExperimentConfig
from .solver import SolveInfo, SolverConfig, init_ncde_params, ncde_encode_batch
from .spline import BatchedPaths, ControlPath, build_control_path


@dataclass
class PreparedPatient:
    """A preprocessed patient ready for batching."""

    id: str
    label: int
    sex: str
    paths: dict[str, ControlPath]
    code_ids: list[int]          # indices into the model vocab (+1 offset, 0 = null)


@dataclass
class Batch:
    ids: list[str]
    labels: np.ndarray
    paths: dict[str, BatchedPaths]
    code_idx: np.ndarray
    code_mask: np.ndarray


@dataclass
class ForwardAux:
    panel_attention: np.ndarray | None = None    # (B, heads, 4, 4)
    solve_infos: dict[str, SolveInfo] = field(default_factory=dict)
    cross_attention: dict | None = None


def panel_channel_count(panel: str, intensity: bool) -> int:
    v = len(labs_mod.PANEL_LABS[panel])
    return 2 * v + 1 if intensity else v + 1


def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig(rtol=cfg.rtol, atol=cfg.atol, max_steps=cfg.max_solver_steps)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ExperimentConfig, vocab: list[str],
                embedding: np.ndarray | None, seed: int) -> dict[str, np.ndarray]:
    """Create every learnable array for the configured modality/fusion.

    ``embedding`` is the aligned (len(vocab)+1, embed_dim) matrix (row 0 =
    null token); required unless modality is labs-only.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    d = cfg.hidden_dim

    use_labs = cfg.modality in ("both", "labs-only")
    use_codes = cfg.modality in ("both", "codes-only")

    if use_labs:
        for panel in labs_mod.PANEL_ORDER:
            c = panel_channel_count(panel, cfg.intensity)
            for k, v in init_ncde_params(rng, c, d, cfg.hidden_hidden_dim).items():
                params[f"ncde.{panel}.{k}"] = v
        for k, v in labs_mod.init_panel_attention_params(rng, d).items():
            params[f"attn.{k}"] = v
    if use_codes:
        if embedding is None:
            raise ValueError("an embedding matrix is required for the codes branch")
        if embedding.shape != (len(vocab) + 1, cfg.embed_dim):
            raise ValueError("embedding matrix shape does not match vocab/config")
        params["emb.table"] = embedding.copy()
        for direction in ("fw", "bw"):
            for k, v in codes_mod.init_lstm_params(rng, cfg.embed_dim, cfg.lstm_hidden).items():
                params[f"lstm.{direction}.{k}"] = v
        bound = 1.0 / np.sqrt(2 * cfg.lstm_hidden)
        params["codes.w_proj"] = rng.uniform(-bound, bound, size=(2 * cfg.lstm_hidden, d))

    if cfg.modality == "both":
        for k, v in fusion_mod.init_fusion_params(rng, d, cfg.fusion, cfg.bilinear_rank).items():
            params[f"fuse.{k}"] = v
        head_in = 2 * d
    else:
        head_in = d
    for k, v in fusion_mod.init_head_params(rng, head_in, cfg.mlp_hidden).items():
        params[f"head.{k}"] = v
    return params


def track_params(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    """Register every parameter as a leaf on ``tape`` (or constants if None)."""
    if tape is None:
        return {k: ad.constant(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


def _sub(params: dict[str, ad.Tensor], prefix: str) -> dict[str, ad.Tensor]:
    plen = len(prefix)
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# batching


def collate(patients: list[PreparedPatient], cfg: ExperimentConfig) -> Batch:
    paths = {p: BatchedPaths([pt.paths[p] for pt in patients]) for p in labs_mod.PANEL_ORDER} \
        if cfg.modality != "codes-only" else {}
    idx, mask = codes_mod.pad_code_batch([pt.code_ids for pt in patients], cfg.max_seq_len)
    return Batch(
        ids=[pt.id for pt in patients],
        labels=np.array([pt.label for pt in patients], dtype=np.float64),
        paths=paths,
        code_idx=idx,
        code_mask=mask,
    )


# ---------------------------------------------------------------------------
# forward


def encode_labs_batch(pt: dict[str, ad.Tensor], batch: Batch, cfg: ExperimentConfig,
                      train: bool, drop_rng: np.random.Generator | None,
                      aux: ForwardAux) -> ad.Tensor:
    scfg = solver_config(cfg)
    tokens = []
    B = len(batch.ids)
    for panel in labs_mod.PANEL_ORDER:
        mask = None
        if train and cfg.ncde_dropout > 0:
            keep = 1.0 - cfg.ncde_dropout
            mask = (drop_rng.random((B, cfg.hidden_hidden_dim)) < keep) / keep
        z, info = ncde_encode_batch(batch.paths[panel], _sub(pt, f"ncde.{panel}."),
                                    scfg, drop_mask=mask)
        aux.solve_infos[panel] = info
        tokens.append(z)
    stacked = ad.stack(tokens, axis=1)  # (B, 4, d)
    contextual, attn = labs_mod.panel_self_attention(stacked, _sub(pt, "attn."),
                                                     cfg.attention_heads)
    aux.panel_attention = attn
    return labs_mod.pool_panels(contextual)


def encode_codes_batch(pt: dict[str, ad.Tensor], batch: Batch, cfg: ExperimentConfig,
                       emb_override: ad.Tensor | None = None) -> ad.Tensor:
    emb = emb_override if emb_override is not None else ad.take_rows(pt["emb.table"], batch.code_idx)
    return codes_mod.encode_codes(emb, batch.code_mask, _sub(pt, "lstm.") | _sub(pt, "codes."),
                                  cfg.lstm_hidden)


def forward_batch(pt: dict[str, ad.Tensor], batch: Batch, cfg: ExperimentConfig,
                  train: bool = False, drop_rng: np.random.Generator | None = None,
                  emb_override: ad.Tensor | None = None,
                  want_cross_attention: bool = False) -> tuple[ad.Tensor, ForwardAux]:
    """Logits (B,) for a batch under the configured modality and fusion."""
    if train and drop_rng is None:
        raise ValueError("training forward needs a dropout generator")
    aux = ForwardAux()
    z_labs = z_codes = None
    if cfg.modality in ("both", "labs-only"):
        z_labs = encode_labs_batch(pt, batch, cfg, train, drop_rng, aux)
    if cfg.modality in ("both", "codes-only"):
        z_codes = encode_codes_batch(pt, batch, cfg, emb_override)

    if cfg.modality == "both":
        if cfg.fusion == "cross_attention" and want_cross_attention:
            fused, attn = fusion_mod.cross_attention_fuse(z_labs, z_codes, _sub(pt, "fuse."),
                                                          return_attn=True)
            aux.cross_attention = attn
        else:
            fused = fusion_mod.ablation_fuse(cfg.fusion, z_labs, z_codes, _sub(pt, "fuse."))
    else:
        fused = z_labs if cfg.modality == "labs-only" else z_codes

    mask = None
    if train and cfg.mlp_dropout > 0:
        keep = 1.0 - cfg.mlp_dropout
        mask = (drop_rng.random((len(batch.ids), cfg.mlp_hidden)) < keep) / keep
    logits = fusion_mod.mlp_logit(fused, _sub(pt, "head."), mask)
    return logits, aux


def score_patients(params: dict[str, np.ndarray], patients: list[PreparedPatient],
                   cfg: ExperimentConfig, batch_size: int | None = None) -> np.ndarray:
    """Inference probabilities, batched, dropout off."""
    bs = batch_size or cfg.batch_size
    out = np.empty(len(patients))
    for lo in range(0, len(patients), bs):
        chunk = patients[lo:lo + bs]
        pt = track_params(None, params)
        logits, _ = forward_batch(pt, collate(chunk, cfg), cfg, train=False)
        out[lo:lo + len(chunk)] = 1.0 / (1.0 + np.exp(-logits.data))
    return out


def labs_forward(patient: PreparedPatient, params: dict[str, np.ndarray],
                 cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single-patient lab representation and its (heads, 4, 4) attention."""
    pt = track_params(None, params)
    batch = collate([patient], cfg)
    aux = ForwardAux()
    z = encode_labs_batch(pt, batch, cfg, train=False, drop_rng=None, aux=aux)
    return z.data[0], aux.panel_attention[0]
