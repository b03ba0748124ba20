"""Lab panel catalog, routing of lab events into panels, and panel attention.

35 routinely collected labs split into four clinical panels. Each panel's
NCDE embedding becomes one token; a multi-head self-attention layer over the
four tokens contextualizes them, and mean pooling yields the unified lab
representation. Attention weights are retained for panel-importance
reporting.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .spline import PanelTrajectory

PANEL_LABS: dict[str, list[str]] = {
    "metabolic": ["Glucose", "Anion", "BUN", "CO2", "Calcium", "Chloride",
                  "Creatinine", "Potassium", "Sodium", "A/G Ratio"],
    "cbc": ["Absolute Basophils", "Absolute Eosinophils", "Absolute Lymphocytes",
            "Absolute Monocytes", "Absolute Neutrophils", "MCHC", "MCH", "MCV",
            "MPV", "WBC", "RBC", "RDW", "Platelet", "Hemoglobin", "Hematocrit"],
    "lipid": ["Cholesterol", "LDL", "HDL", "Triglycerides", "Total Protein"],
    "liver": ["ALP", "ALT", "AST", "Albumin", "Total Bilirubin"],
}

PANEL_ORDER = ["metabolic", "cbc", "lipid", "liver"]

LAB_TO_PANEL: dict[str, str] = {}
LAB_TO_CHANNEL: dict[str, int] = {}
for _panel, _labs in PANEL_LABS.items():
    for _i, _lab in enumerate(_labs):
        LAB_TO_PANEL[_lab] = _panel
        LAB_TO_CHANNEL[_lab] = _i

ALL_LABS = [lab for p in PANEL_ORDER for lab in PANEL_LABS[p]]
assert len(ALL_LABS) == 35


class UnknownLabError(KeyError):
    """A lab event names a test absent from the panel catalog."""


def group_panels(lab_events) -> dict[str, PanelTrajectory]:
    """Route (time, lab, value) events into the four panel trajectories.

    ``time`` must already be on the patient's rescaled forward clock.
    Per-panel times are deduplicated and sorted; repeated measurements of one
    lab at one time are averaged. Intensity is the per-lab cumulative
    observation count normalized by the panel's total observation count.
    """
    by_panel: dict[str, dict] = {p: {} for p in PANEL_ORDER}
    for t, lab, value in lab_events:
        panel = LAB_TO_PANEL.get(lab)
        if panel is None:
            raise UnknownLabError(f"unknown lab name: {lab!r}")
        by_panel[panel].setdefault(float(t), []).append((LAB_TO_CHANNEL[lab], float(value)))

    out: dict[str, PanelTrajectory] = {}
    for panel in PANEL_ORDER:
        v = len(PANEL_LABS[panel])
        times = np.array(sorted(by_panel[panel]))
        k = times.size
        values = np.full((k, v), np.nan)
        counts = np.zeros((k, v))
        for j, t in enumerate(times):
            per_ch: dict[int, list[float]] = {}
            for ch, val in by_panel[panel][t]:
                per_ch.setdefault(ch, []).append(val)
            for ch, vals in per_ch.items():
                values[j, ch] = float(np.mean(vals))
                counts[j, ch] = len(vals)
        cumulative = np.cumsum(counts, axis=0) if k else counts
        total = cumulative[-1].sum() if k else 0.0
        intensity = cumulative / max(total, 1.0)
        out[panel] = PanelTrajectory(panel, times, values, intensity)
    return out


def panel_self_attention(z: ad.Tensor, params: dict[str, ad.Tensor],
                         heads: int) -> tuple[ad.Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention over panel tokens.

    ``z`` is (batch, 4, d) (or (4, d), treated as batch of one). Returns the
    contextualized tokens and the detached attention weights
    (batch, heads, 4, 4), each row summing to 1.
    """
    squeeze = z.data.ndim == 2
    if squeeze:
        z = ad.reshape(z, (1,) + z.data.shape)
    d = z.data.shape[-1]
    if d % heads:
        raise ValueError("head count must divide the hidden dimension")
    dh = d // heads
    q = ad.matmul(z, params["wq"])
    k = ad.matmul(z, params["wk"])
    v = ad.matmul(z, params["wv"])
    outs, weights = [], []
    for h in range(heads):
        sl = (h * dh, (h + 1) * dh)
        qh = ad.narrow(q, 2, *sl)
        kh = ad.narrow(k, 2, *sl)
        vh = ad.narrow(v, 2, *sl)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        outs.append(ad.matmul(attn, vh))
        weights.append(attn.data)
    out = ad.concat(outs, axis=-1)
    attn_all = np.stack(weights, axis=1)
    if squeeze:
        out = ad.reshape(out, out.data.shape[1:])
        attn_all = attn_all[0]
    return out, attn_all


def pool_panels(z_tilde: ad.Tensor) -> ad.Tensor:
    """Mean pooling over the panel-token axis."""
    axis = 0 if z_tilde.data.ndim == 2 else 1
    return ad.mean(z_tilde, axis=axis)


def init_panel_attention_params(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(d)
    return {name: rng.uniform(-bound, bound, size=(d, d)) for name in ("wq", "wk", "wv")}
