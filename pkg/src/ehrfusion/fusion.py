"""Cross-modal fusion strategies and the MLP classification head.

The primary strategy is bidirectional cross-attention between the lab and
code embeddings (each a single token), computed literally through the
query/key/softmax machinery so the same code serves multi-token inputs.
Three ablation strategies are provided: plain concatenation, concatenation
followed by self-attention over the two modality tokens, and a low-rank
bilinear map.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

STRATEGIES = ("cross_attention", "concat", "concat_self_attention", "bilinear")


def _as_tokens(z: ad.Tensor) -> tuple[ad.Tensor, bool]:
    """Promote (B, d) single-token inputs to (B, 1, d)."""
    if z.data.ndim == 2:
        return ad.reshape(z, (z.data.shape[0], 1, z.data.shape[1])), True
    return z, False


def _attend(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, d: int):
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, v), attn.data


def cross_attention_fuse(z_labs: ad.Tensor, z_codes: ad.Tensor,
                         params: dict[str, ad.Tensor],
                         return_attn: bool = False):
    """Bidirectional single-layer cross-attention, outputs concatenated.

    Inputs are (B, d) single tokens (or (B, n_tok, d)). With one token per
    modality each softmax is over a single key, so the attention weights are
    exactly 1 and the value projections carry the learning; the equations
    are still evaluated literally.
    """
    zl, squeeze_l = _as_tokens(z_labs)
    zc, squeeze_c = _as_tokens(z_codes)
    if zl.data.shape[-1] != zc.data.shape[-1]:
        raise ValueError("modality embeddings must share the fusion dimension")
    d = zl.data.shape[-1]

    q_codes = ad.matmul(zc, params["wq_c"])
    k_labs = ad.matmul(zl, params["wk_l"])
    v_labs = ad.matmul(zl, params["wv_l"])
    labs_enhanced, attn_c2l = _attend(q_codes, k_labs, v_labs, d)

    q_labs = ad.matmul(zl, params["wq_l"])
    k_codes = ad.matmul(zc, params["wk_c"])
    v_codes = ad.matmul(zc, params["wv_c"])
    codes_enhanced, attn_l2c = _attend(q_labs, k_codes, v_codes, d)

    if squeeze_l and squeeze_c:
        labs_enhanced = ad.reshape(labs_enhanced, (labs_enhanced.data.shape[0], d))
        codes_enhanced = ad.reshape(codes_enhanced, (codes_enhanced.data.shape[0], d))
        fused = ad.concat([labs_enhanced, codes_enhanced], axis=1)
    else:
        fused = (labs_enhanced, codes_enhanced)
    if return_attn:
        return fused, {"codes_to_labs": attn_c2l, "labs_to_codes": attn_l2c}
    return fused


def ablation_fuse(strategy: str, z_labs: ad.Tensor, z_codes: ad.Tensor,
                  params: dict[str, ad.Tensor]) -> ad.Tensor:
    """Fuse (B, d) modality embeddings under one of the Table-style strategies."""
    if strategy == "cross_attention":
        return cross_attention_fuse(z_labs, z_codes, params)
    if strategy == "concat":
        return ad.concat([z_labs, z_codes], axis=1)
    if strategy == "concat_self_attention":
        tokens = ad.stack([z_labs, z_codes], axis=1)  # (B, 2, d)
        d = z_labs.data.shape[1]
        q = ad.matmul(tokens, params["sa_wq"])
        k = ad.matmul(tokens, params["sa_wk"])
        v = ad.matmul(tokens, params["sa_wv"])
        out, _ = _attend(q, k, v, d)
        return ad.reshape(out, (out.data.shape[0], 2 * d))
    if strategy == "bilinear":
        # b_k = z_labs^T B_k z_codes with B_k = U_k V_k^T of rank r;
        # bl_u, bl_v are (d, 2d*r).
        B, d = z_labs.data.shape
        out_dim = 2 * d
        r = params["bl_u"].data.shape[1] // out_dim
        u = ad.reshape(ad.matmul(z_labs, params["bl_u"]), (B, out_dim, r))
        v = ad.reshape(ad.matmul(z_codes, params["bl_v"]), (B, out_dim, r))
        return ad.tsum(ad.mul(u, v), axis=2)
    raise ValueError(f"unknown fusion strategy: {strategy!r}")


def mlp_logit(z: ad.Tensor, params: dict[str, ad.Tensor],
              drop_mask: np.ndarray | None = None) -> ad.Tensor:
    """linear -> ReLU -> dropout -> linear, one logit per row."""
    h = ad.relu(ad.bias_add(ad.matmul(z, params["head_w1"]), params["head_b1"]))
    if drop_mask is not None:
        h = ad.mul_const(h, drop_mask)
    out = ad.bias_add(ad.matmul(h, params["head_w2"]), params["head_b2"])
    return ad.reshape(out, (out.data.shape[0],))


def classify(z: ad.Tensor, params: dict[str, ad.Tensor],
             drop_mask: np.ndarray | None = None) -> ad.Tensor:
    """Probability of the positive class."""
    return ad.sigmoid(mlp_logit(z, params, drop_mask))


def init_fusion_params(rng: np.random.Generator, d: int, strategy: str,
                       bilinear_rank: int = 16) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(d)

    def mat(shape):
        return rng.uniform(-bound, bound, size=shape)

    if strategy == "cross_attention":
        return {name: mat((d, d)) for name in
                ("wq_l", "wk_l", "wv_l", "wq_c", "wk_c", "wv_c")}
    if strategy == "concat_self_attention":
        return {name: mat((d, d)) for name in ("sa_wq", "sa_wk", "sa_wv")}
    if strategy == "bilinear":
        # scale down so b_k starts with comparable magnitude to concat outputs
        s = 1.0 / np.sqrt(bilinear_rank)
        return {"bl_u": mat((d, 2 * d * bilinear_rank)) * s,
                "bl_v": mat((d, 2 * d * bilinear_rank)) * s}
    if strategy == "concat":
        return {}
    raise ValueError(f"unknown fusion strategy: {strategy!r}")


def init_head_params(rng: np.random.Generator, in_dim: int, hidden: int) -> dict[str, np.ndarray]:
    b1 = 1.0 / np.sqrt(in_dim)
    b2 = 1.0 / np.sqrt(hidden)
    return {
        "head_w1": rng.uniform(-b1, b1, size=(in_dim, hidden)),
        "head_b1": np.zeros(hidden),
        "head_w2": rng.uniform(-b2, b2, size=(hidden, 1)),
        "head_b2": np.zeros(1),
    }
