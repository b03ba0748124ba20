"""Integrated-gradients code attribution and panel-importance extraction.

IG runs along the straight-line path in code-embedding space from the zero
baseline to a patient's actual embeddings, holding the lab representation
fixed at its actual value; the attributed scalar is the model logit. The
interpolation points of one patient batch together with other patients, so
the whole test set is attributed in a few wide forward/backward passes.

Panel importance is the column mean of the 4x4 panel self-attention matrix,
averaged over heads and patients, normalized to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion as fusion_mod
from .config import ExperimentConfig
from .labs import PANEL_ORDER
from .model import (
    ForwardAux,
    PreparedPatient,
    collate,
    encode_labs_batch,
    forward_batch,
    track_params,
    _sub,
)


def _codes_logit(pt, batch, cfg, emb: ad.Tensor, z_labs_const: ad.Tensor | None) -> ad.Tensor:
    """Model logit with the codes branch fed from ``emb`` and labs frozen."""
    from .model import encode_codes_batch

    z_codes = encode_codes_batch(pt, batch, cfg, emb_override=emb)
    if cfg.modality == "codes-only":
        fused = z_codes
    else:
        fused = fusion_mod.ablation_fuse(cfg.fusion, z_labs_const, z_codes, _sub(pt, "fuse."))
    return fusion_mod.mlp_logit(fused, _sub(pt, "head."))


def integrated_gradients(params: dict[str, np.ndarray], patient: PreparedPatient,
                         cfg: ExperimentConfig, steps: int = 64) -> dict:
    """Per-occurrence IG scalars for one patient's code sequence.

    Returns {"attributions": (T,) array, "f_input": logit at the input,
    "f_baseline": logit at the zero-embedding baseline, "completeness_gap"}.
    """
    res = integrated_gradients_batch(params, [patient], cfg, steps=steps)
    return res[0]


def integrated_gradients_batch(params: dict[str, np.ndarray],
                               patients: list[PreparedPatient],
                               cfg: ExperimentConfig, steps: int = 64) -> list[dict]:
    """Riemann-midpoint IG for several patients in one wide pass."""
    if steps < 2:
        raise ValueError("integrated gradients needs at least 2 steps")
    if cfg.modality == "labs-only":
        raise ValueError("code attribution requires the codes branch")
    batch = collate(patients, cfg)
    B, T = batch.code_idx.shape
    emb_actual = params["emb.table"][batch.code_idx] * batch.code_mask[:, :, None]

    # Labs representation, frozen at the actual input (constants, no tape).
    z_labs_data = None
    if cfg.modality == "both":
        pt_const = track_params(None, params)
        aux = ForwardAux()
        z_labs_data = encode_labs_batch(pt_const, batch, cfg, train=False,
                                        drop_rng=None, aux=aux).data

    alphas = (np.arange(steps) + 0.5) / steps
    # rows: patient-major blocks of `steps` interpolation points
    emb_path = (alphas[None, :, None, None] * emb_actual[:, None]).reshape(B * steps, T, -1)

    tape = ad.Tape()
    emb_leaf = tape.leaf(emb_path)
    pt = track_params(None, params)             # only the input is tracked
    pt = {k: v for k, v in pt.items()}
    wide_batch = _repeat_batch(batch, steps)
    z_labs_const = None
    if z_labs_data is not None:
        z_labs_const = ad.constant(np.repeat(z_labs_data, steps, axis=0))
    logits = _codes_logit(pt, wide_batch, cfg, emb_leaf, z_labs_const)
    total = ad.tsum(logits)
    grads = ad.grad(tape, total, {"emb": emb_leaf})["emb"]
    avg_grad = grads.reshape(B, steps, T, -1).mean(axis=1)
    contrib = (emb_actual * avg_grad).sum(axis=2)          # (B, T)

    # endpoint logits for completeness
    pt2 = track_params(None, params)
    f_input = _codes_logit(pt2, batch, cfg,
                           ad.constant(emb_actual), _maybe_const(z_labs_data)).data
    f_base = _codes_logit(pt2, batch, cfg,
                          ad.constant(np.zeros_like(emb_actual)),
                          _maybe_const(z_labs_data)).data

    out = []
    for i in range(B):
        t_valid = int(batch.code_mask[i].sum())
        out.append({
            "attributions": contrib[i, :t_valid],
            "f_input": float(f_input[i]),
            "f_baseline": float(f_base[i]),
            "completeness_gap": float(abs(contrib[i, :t_valid].sum()
                                          - (f_input[i] - f_base[i]))),
        })
    return out


def _maybe_const(arr):
    return ad.constant(arr) if arr is not None else None


def _repeat_batch(batch, steps: int):
    from .model import Batch

    return Batch(
        ids=[pid for pid in batch.ids for _ in range(steps)],
        labels=np.repeat(batch.labels, steps),
        paths={},  # labs side is precomputed
        code_idx=np.repeat(batch.code_idx, steps, axis=0),
        code_mask=np.repeat(batch.code_mask, steps, axis=0),
    )


@dataclass
class AttributionReport:
    code_scores: list           # [(code, mean IG, n_patients)] sorted desc
    panel_importance: dict      # panel -> weight, sums to 1
    min_support: int = 10

    def to_dict(self) -> dict:
        return {
            "codes": [{"code": c, "ig": float(s), "n_patients": int(n)}
                      for c, s, n in self.code_scores],
            "panel_importance": {k: float(v) for k, v in self.panel_importance.items()},
            "min_support": self.min_support,
        }


def attribute_codes(params: dict[str, np.ndarray], patients: list[PreparedPatient],
                    vocab: list[str], cfg: ExperimentConfig, steps: int = 64,
                    min_support: int = 10, chunk: int = 16) -> list[tuple]:
    """Mean IG per code over patients that carry it (support >= min_support).

    Aggregation order: per occurrence -> mean within a patient -> mean across
    carrying patients.
    """
    per_code_patient_means: dict[str, list[float]] = {}
    idx_to_code = {i + 1: c for i, c in enumerate(vocab)}
    for lo in range(0, len(patients), chunk):
        group = patients[lo:lo + chunk]
        results = integrated_gradients_batch(params, group, cfg, steps=steps)
        for patient, res in zip(group, results):
            ids = patient.code_ids[-cfg.max_seq_len:] if patient.code_ids else [0]
            scores: dict[str, list[float]] = {}
            for pos, cid in enumerate(ids):
                code = idx_to_code.get(cid)
                if code is not None and pos < len(res["attributions"]):
                    scores.setdefault(code, []).append(float(res["attributions"][pos]))
            for code, vals in scores.items():
                per_code_patient_means.setdefault(code, []).append(float(np.mean(vals)))
    rows = [(code, float(np.mean(v)), len(v))
            for code, v in per_code_patient_means.items() if len(v) >= min_support]
    rows.sort(key=lambda r: -r[1])
    return rows


def panel_importance(params: dict[str, np.ndarray], patients: list[PreparedPatient],
                     cfg: ExperimentConfig, batch_size: int = 256) -> dict[str, float]:
    """Received-attention mass per panel, averaged over heads and patients."""
    if cfg.modality == "codes-only":
        raise ValueError("panel importance requires the labs branch")
    col_sums = np.zeros(4)
    n = 0
    for lo in range(0, len(patients), batch_size):
        chunk = patients[lo:lo + batch_size]
        pt = track_params(None, params)
        aux = ForwardAux()
        encode_labs_batch(pt, collate(chunk, cfg), cfg, train=False, drop_rng=None, aux=aux)
        # (B, heads, 4, 4) -> column means per patient, averaged over heads
        col_sums += aux.panel_attention.mean(axis=(1, 2)).sum(axis=0)
        n += len(chunk)
    weights = col_sums / n
    weights = weights / weights.sum()
    return dict(zip(PANEL_ORDER, weights))


def build_attribution_report(params: dict[str, np.ndarray],
                             patients: list[PreparedPatient], vocab: list[str],
                             cfg: ExperimentConfig, steps: int = 64,
                             min_support: int = 10) -> AttributionReport:
    codes = attribute_codes(params, patients, vocab, cfg, steps=steps,
                            min_support=min_support)
    panels = (panel_importance(params, patients, cfg)
              if cfg.modality != "codes-only" else {p: 0.25 for p in PANEL_ORDER})
    return AttributionReport(code_scores=codes, panel_importance=panels,
                             min_support=min_support)
