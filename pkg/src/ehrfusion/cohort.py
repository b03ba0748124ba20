"""Synthetic EHR cohorts with plantable risk signal, plus preprocessing.

The generator produces case/control cohorts matched on sex and age band,
with three independently scalable signals:

  * unimodal lab drift: designated labs ramp in cases from 24 to 6 months
    before the anchor;
  * unimodal code enrichment: risk codes (default K86, K85) appear more
    often in cases;
  * a cross-modal interaction: a designated code and a distinctive
    metabolic-panel drift are each class-independent marginally but co-occur
    only in cases (controls receive exactly one of the two), so neither
    modality alone can exploit it.

Preprocessing follows the task pipeline: exclusion window, ICD truncation
to 3 characters, rare-code filter computed on training patients, patient
exclusion by measurement-count policy, and train-only normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .labs import ALL_LABS, LAB_TO_PANEL, PANEL_LABS, PANEL_ORDER, group_panels
from .model import PreparedPatient
from .spline import build_control_path

DAYS_PER_MONTH = 30.44
SCHEMA_VERSION = 1


@dataclass
class PatientRecord:
    id: str
    sex: str                      # "F" | "M"
    age_at_anchor: float
    anchor_date: str              # ISO date; diagnosis for cases, last encounter for controls
    code_events: list             # (days_before_anchor, code)
    lab_events: list              # (days_before_anchor, lab_name, value)
    label: int

    def to_json_obj(self) -> dict:
        return {
            "id": self.id, "sex": self.sex, "age_at_anchor": self.age_at_anchor,
            "anchor_date": self.anchor_date,
            "code_events": [[int(t), c] for t, c in self.code_events],
            "lab_events": [[int(t), lab, float(v)] for t, lab, v in self.lab_events],
            "label": int(self.label),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PatientRecord":
        return cls(
            id=obj["id"], sex=obj["sex"], age_at_anchor=obj["age_at_anchor"],
            anchor_date=obj["anchor_date"],
            code_events=[(int(t), c) for t, c in obj["code_events"]],
            lab_events=[(int(t), lab, float(v)) for t, lab, v in obj["lab_events"]],
            label=int(obj["label"]),
        )


@dataclass
class CohortConfig:
    seed: int                     # mandatory: cohorts are pure functions of (config, seed)
    n_patients: int = 4694
    positive_rate: float = 0.114
    # event-density model (class-independent)
    min_history_days: int = 400
    max_history_days: int = 14 * 365
    panel_obs_base: int = 3
    panel_obs_per_year: float = 1.1
    lab_missing_rate: float = 0.25
    visits_per_year: float = 5.0
    value_noise_sd: float = 0.3   # per-observation noise, in units of the lab sd
    # signal scales, all in [0, 1]
    lab_effect: float = 1.0
    code_effect: float = 1.0
    interaction_effect: float = 1.0
    risk_codes: tuple = ("K86", "K85")
    interaction_code: str = "E88"
    drift_start_months: float = 24.0
    drift_end_months: float = 6.0

    def __post_init__(self):
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must lie in [0, 1]")
        if self.n_patients < 10:
            raise ValueError("n_patients too small")
        if round(self.n_patients * self.positive_rate) < 1:
            raise ValueError("config yields zero cases; matching is impossible")
        for name in ("lab_effect", "code_effect", "interaction_effect"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["risk_codes"] = list(self.risk_codes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        if "risk_codes" in d:
            d["risk_codes"] = tuple(d["risk_codes"])
        return cls(**d)


# Population (mean, sd) per lab, in conventional units.
LAB_POPULATION = {
    "Glucose": (100, 25), "Anion": (10, 3), "BUN": (16, 6), "CO2": (25, 3),
    "Calcium": (9.4, 0.5), "Chloride": (102, 3), "Creatinine": (1.0, 0.3),
    "Potassium": (4.2, 0.4), "Sodium": (139, 3), "A/G Ratio": (1.6, 0.35),
    "Absolute Basophils": (0.05, 0.03), "Absolute Eosinophils": (0.18, 0.12),
    "Absolute Lymphocytes": (1.9, 0.7), "Absolute Monocytes": (0.55, 0.2),
    "Absolute Neutrophils": (4.3, 1.8), "MCHC": (33.5, 1.2), "MCH": (29.5, 2.5),
    "MCV": (89, 6), "MPV": (10.3, 1.0), "WBC": (7.2, 2.2), "RBC": (4.7, 0.5),
    "RDW": (13.5, 1.5), "Platelet": (250, 60), "Hemoglobin": (14, 1.6),
    "Hematocrit": (42, 4.5),
    "Cholesterol": (190, 38), "LDL": (112, 32), "HDL": (52, 14),
    "Triglycerides": (140, 70), "Total Protein": (7.0, 0.5),
    "ALP": (80, 28), "ALT": (28, 14), "AST": (26, 12), "Albumin": (4.2, 0.4),
    "Total Bilirubin": (0.7, 0.35),
}

# Case drift profile in sd units, ramping over the drift window.
CASE_DRIFT = {
    "Glucose": 0.9, "ALT": 0.7, "AST": 0.6, "Total Bilirubin": 0.8, "ALP": 0.6,
    "Hemoglobin": -0.5, "Platelet": 0.4, "Albumin": -0.5,
}

# Distinctive metabolic signature for the cross-modal interaction signal;
# deliberately disjoint from CASE_DRIFT.
INTERACTION_DRIFT = {"Calcium": 1.4, "Chloride": -1.4}

BACKGROUND_CODES = [
    "E11", "I10", "E78", "K21", "M54", "J06", "Z00", "I25", "F41", "M25",
    "R10", "N39", "J45", "R51", "H52", "M17", "E66", "F32", "J20", "L57",
    "R89", "L82", "L73", "G57", "K63", "R32", "I48", "N18", "J44", "M81",
    "G47", "H25", "K57", "D64", "E03", "B34", "R53", "M19", "I63", "C44",
]


def _ramp(t_days: float, cfg: CohortConfig) -> float:
    """0 before drift onset, 1 at the drift end (6 months pre-anchor)."""
    start = cfg.drift_start_months * DAYS_PER_MONTH
    end = cfg.drift_end_months * DAYS_PER_MONTH
    return float(np.clip((start - t_days) / (start - end), 0.0, 1.0))


def _dotted(code: str, rng: np.random.Generator) -> str:
    """Emit a 4-digit subcode most of the time to exercise ICD truncation."""
    return f"{code}.{rng.integers(0, 10)}" if rng.random() < 0.6 else code


def generate_synthetic_cohort(cfg: CohortConfig) -> list[PatientRecord]:
    """Deterministic synthetic cohort; see the module docstring for design."""
    rng = np.random.default_rng(cfg.seed)
    n_cases = int(round(cfg.n_patients * cfg.positive_rate))
    n_controls = cfg.n_patients - n_cases
    q = 0.5 * cfg.interaction_effect

    case_demo = []
    for _ in range(n_cases):
        case_demo.append((("F" if rng.random() < 0.52 else "M"),
                          float(rng.uniform(55, 85))))

    patients: list[PatientRecord] = []
    drift_lo = cfg.drift_end_months * DAYS_PER_MONTH + 5
    drift_hi = cfg.drift_start_months * DAYS_PER_MONTH

    def signal_event_times(history):
        hi = min(drift_hi, history)
        n = 1 + rng.poisson(0.6)
        return rng.uniform(drift_lo, max(hi, drift_lo + 30), size=n)

    for i in range(cfg.n_patients):
        is_case = i < n_cases
        if is_case:
            sex, age = case_demo[i]
        else:  # match a random case on sex and a +-3y age band
            tpl_sex, tpl_age = case_demo[rng.integers(0, n_cases)]
            sex, age = tpl_sex, float(np.clip(tpl_age + rng.uniform(-3, 3), 40, 95))
        history = float(rng.uniform(cfg.min_history_days, cfg.max_history_days))
        anchor = f"2019-{rng.integers(1, 13):02d}-{rng.integers(1, 29):02d}"

        interaction_arm = None
        if is_case:
            if rng.random() < q:
                interaction_arm = "both"
        else:
            u = rng.random()
            if u < q:
                interaction_arm = "code-only"
            elif u < 2 * q:
                interaction_arm = "drift-only"

        # --- labs ---
        lab_events = []
        offsets = {lab: rng.normal(0.0, 0.35) for lab in ALL_LABS}
        for panel in PANEL_ORDER:
            n_obs = cfg.panel_obs_base + rng.poisson(cfg.panel_obs_per_year * history / 365.0)
            times = np.sort(rng.uniform(0, history, size=n_obs))[::-1]  # days before anchor
            for t in times:
                for lab in PANEL_LABS[panel]:
                    if rng.random() < cfg.lab_missing_rate:
                        continue
                    mu, sd = LAB_POPULATION[lab]
                    value = mu + sd * (offsets[lab] + rng.normal(0.0, cfg.value_noise_sd))
                    if is_case and lab in CASE_DRIFT:
                        value += sd * cfg.lab_effect * CASE_DRIFT[lab] * _ramp(t, cfg)
                    if interaction_arm in ("both", "drift-only") and lab in INTERACTION_DRIFT:
                        value += sd * INTERACTION_DRIFT[lab] * _ramp(t, cfg)
                    lab_events.append((int(t), lab, float(value)))

        # --- codes ---
        code_events = []
        n_visits = 1 + rng.poisson(cfg.visits_per_year * history / 365.0)
        weights = 1.0 / np.arange(1, len(BACKGROUND_CODES) + 1) ** 0.8
        weights /= weights.sum()
        for _ in range(n_visits):
            t = int(rng.uniform(0, history))
            for _ in range(1 + min(rng.poisson(0.5), 2)):
                code = BACKGROUND_CODES[rng.choice(len(BACKGROUND_CODES), p=weights)]
                code_events.append((t, _dotted(code, rng)))
        base_probs = {"K86": 0.05, "K85": 0.04}
        boost = {"K86": 0.30, "K85": 0.26}
        for code in cfg.risk_codes:
            p = base_probs.get(code, 0.05)
            if is_case:
                p += boost.get(code, 0.25) * cfg.code_effect
            if rng.random() < p:
                for t in signal_event_times(history):
                    code_events.append((int(t), _dotted(code, rng)))
        if interaction_arm in ("both", "code-only"):
            for t in signal_event_times(history):
                code_events.append((int(t), _dotted(cfg.interaction_code, rng)))

        code_events.sort(key=lambda e: (-e[0], e[1]))
        lab_events.sort(key=lambda e: (-e[0], e[1]))
        patients.append(PatientRecord(
            id=f"p{i:05d}", sex=sex, age_at_anchor=age, anchor_date=anchor,
            code_events=code_events, lab_events=lab_events, label=int(is_case),
        ))
    return patients


# ---------------------------------------------------------------------------
# pipeline: exclusion window, filters, normalization


def apply_exclusion_window(cohort: list[PatientRecord], months: int) -> list[PatientRecord]:
    """Drop every event younger than the task window, cases and controls alike."""
    if months <= 0:
        raise ValueError("window must be positive")
    cutoff = months * DAYS_PER_MONTH
    out = []
    for p in cohort:
        out.append(PatientRecord(
            id=p.id, sex=p.sex, age_at_anchor=p.age_at_anchor, anchor_date=p.anchor_date,
            code_events=[(t, c) for t, c in p.code_events if t >= cutoff],
            lab_events=[(t, lab, v) for t, lab, v in p.lab_events if t >= cutoff],
            label=p.label,
        ))
    return out


def truncate_codes(cohort: list[PatientRecord]) -> list[PatientRecord]:
    """First three characters of every ICD code."""
    out = []
    for p in cohort:
        out.append(PatientRecord(
            id=p.id, sex=p.sex, age_at_anchor=p.age_at_anchor, anchor_date=p.anchor_date,
            code_events=[(t, c[:3]) for t, c in p.code_events],
            lab_events=p.lab_events, label=p.label,
        ))
    return out


def exclude_by_measurement_count(cohort: list[PatientRecord],
                                 policy: str = "all") -> list[PatientRecord]:
    """Patient exclusion for path-construction feasibility.

    'all' (default): drop a patient only when EVERY lab they ever had has
    fewer than two measurements. 'any': drop a patient when ANY lab they had
    has fewer than two (the strict reading).
    """
    if policy not in ("all", "any"):
        raise ValueError("policy must be 'all' or 'any'")
    kept = []
    for p in cohort:
        counts: dict[str, int] = {}
        for _, lab, _ in p.lab_events:
            counts[lab] = counts.get(lab, 0) + 1
        if not counts:
            continue
        if policy == "all":
            ok = any(c >= 2 for c in counts.values())
        else:
            ok = all(c >= 2 for c in counts.values())
        if ok:
            kept.append(p)
    return kept


def code_vocabulary(cohort: list[PatientRecord], train_ids: set,
                    min_fraction: float = 0.05) -> list[str]:
    """Codes present in at least ``min_fraction`` of TRAINING patients."""
    train = [p for p in cohort if p.id in train_ids]
    presence: dict[str, int] = {}
    for p in train:
        for code in {c for _, c in p.code_events}:
            presence[code] = presence.get(code, 0) + 1
    threshold = min_fraction * len(train)
    return sorted(c for c, n in presence.items() if n >= threshold)


def lab_normalization_stats(cohort: list[PatientRecord], train_ids: set) -> dict[str, tuple]:
    """Per-lab (mean, sd) over training patients' events; sd floored at 1e-9."""
    values: dict[str, list[float]] = {lab: [] for lab in ALL_LABS}
    for p in cohort:
        if p.id not in train_ids:
            continue
        for _, lab, v in p.lab_events:
            values[lab].append(v)
    stats = {}
    for lab, vals in values.items():
        if vals:
            arr = np.asarray(vals)
            stats[lab] = (float(arr.mean()), float(max(arr.std(), 1e-9)))
        else:
            stats[lab] = (0.0, 1.0)
    return stats


@dataclass
class FoldData:
    """Everything one fold's training and evaluation needs."""

    fold: int
    vocab: list[str]
    stats: dict[str, tuple]
    train: list[PreparedPatient]
    val: list[PreparedPatient]
    test: list[PreparedPatient]
    feature_names: list[str] = field(default_factory=list)
    features: dict[str, np.ndarray] = field(default_factory=dict)  # id -> LR feature row


def prepare_patient(p: PatientRecord, vocab_index: dict[str, int],
                    stats: dict[str, tuple], cfg: ExperimentConfig,
                    max_panel_obs: int | None = None) -> PreparedPatient:
    """Standardize, rescale the clock to [0, 1], and build spline paths."""
    max_panel_obs = max_panel_obs or cfg.max_seq_len
    days = np.array([t for t, _, _ in p.lab_events], dtype=float)
    d_max, d_min = (days.max(), days.min()) if days.size else (1.0, 0.0)
    span = max(d_max - d_min, 1.0)

    events = []
    for t, lab, v in p.lab_events:
        mu, sd = stats[lab]
        events.append(((d_max - t) / span, lab, (v - mu) / sd))
    trajs = group_panels(events)
    paths = {}
    for panel in PANEL_ORDER:
        traj = trajs[panel]
        if traj.times.size > max_panel_obs:  # keep the most recent observations
            traj = type(traj)(traj.panel, traj.times[-max_panel_obs:],
                              traj.values[-max_panel_obs:], traj.intensity[-max_panel_obs:])
        paths[panel] = build_control_path(traj, len(PANEL_LABS[panel]),
                                          include_intensity=cfg.intensity)

    # chronological code sequence, same-day ties broken lexicographically
    ordered = sorted(p.code_events, key=lambda e: (-e[0], e[1]))
    code_ids = [vocab_index[c] + 1 for _, c in ordered if c in vocab_index]
    return PreparedPatient(id=p.id, label=p.label, sex=p.sex, paths=paths,
                           code_ids=code_ids)


def _lr_features(p: PatientRecord, vocab: list[str], stats: dict[str, tuple]) -> np.ndarray:
    """Flat feature row: per-lab (last, mean, count) + code presence + demographics."""
    per_lab = {lab: [] for lab in ALL_LABS}
    for t, lab, v in sorted(p.lab_events, key=lambda e: -e[0]):
        mu, sd = stats[lab]
        per_lab[lab].append((v - mu) / sd)
    feats = []
    for lab in ALL_LABS:
        vals = per_lab[lab]
        feats.extend([vals[-1] if vals else 0.0,
                      float(np.mean(vals)) if vals else 0.0,
                      float(len(vals))])
    present = {c for _, c in p.code_events}
    feats.extend([1.0 if c in present else 0.0 for c in vocab])
    feats.extend([1.0 if p.sex == "F" else 0.0, p.age_at_anchor / 100.0])
    return np.array(feats)


def lr_feature_names(vocab: list[str]) -> list[str]:
    names = []
    for lab in ALL_LABS:
        names.extend([f"{lab}:last", f"{lab}:mean", f"{lab}:count"])
    names.extend([f"code:{c}" for c in vocab])
    names.extend(["sex_f", "age"])
    return names


def preprocess_fold(cohort: list[PatientRecord], fold: int, plan: "FoldPlan",
                    cfg: ExperimentConfig) -> FoldData:
    """Fold-aware preprocessing: the rare-code filter and normalization stats
    come from the fold's training patients only."""
    train_ids = set(plan.folds[fold]["train"])
    vocab = code_vocabulary(cohort, train_ids)
    stats = lab_normalization_stats(cohort, train_ids)
    vocab_index = {c: i for i, c in enumerate(vocab)}
    prepared = {p.id: prepare_patient(p, vocab_index, stats, cfg) for p in cohort}
    features = {p.id: _lr_features(p, vocab, stats) for p in cohort}
    by_id = {p.id: p for p in cohort}
    sets = {name: [prepared[pid] for pid in plan.folds[fold][name] if pid in by_id]
            for name in ("train", "val", "test")}
    return FoldData(fold=fold, vocab=vocab, stats=stats,
                    train=sets["train"], val=sets["val"], test=sets["test"],
                    feature_names=lr_feature_names(vocab), features=features)


# ---------------------------------------------------------------------------
# fold splitting


@dataclass
class FoldPlan:
    seed: int
    folds: list  # [{train: [...], val: [...], test: [...]}]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(seed=d["seed"], folds=d["folds"])


def split_folds(cohort: list[PatientRecord], seed: int, n_folds: int = 5) -> FoldPlan:
    """Stratified 64/16/20 x 5 assignment; test sets partition the cohort."""
    if len(cohort) < n_folds:
        raise ValueError("cohort smaller than the fold count")
    rng = np.random.default_rng(seed)
    pos = [p.id for p in cohort if p.label == 1]
    neg = [p.id for p in cohort if p.label == 0]
    pos = list(rng.permutation(pos))
    neg = list(rng.permutation(neg))
    pos_chunks = [list(c) for c in np.array_split(pos, n_folds)]
    neg_chunks = [list(c) for c in np.array_split(neg, n_folds)]

    folds = []
    for k in range(n_folds):
        test = pos_chunks[k] + neg_chunks[k]
        rest_pos = [pid for j in range(n_folds) if j != k for pid in pos_chunks[j]]
        rest_neg = [pid for j in range(n_folds) if j != k for pid in neg_chunks[j]]
        n_val_pos = int(round(0.2 * len(rest_pos)))
        n_val_neg = int(round(0.2 * len(rest_neg)))
        val = rest_pos[:n_val_pos] + rest_neg[:n_val_neg]
        train = rest_pos[n_val_pos:] + rest_neg[n_val_neg:]
        folds.append({
            "train": sorted(train), "val": sorted(val), "test": sorted(test),
        })
    return FoldPlan(seed=seed, folds=folds)


# ---------------------------------------------------------------------------
# files


def write_cohort(path, cohort: list[PatientRecord], provenance: dict) -> None:
    """JSON Lines: a header object, then one patient object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": SCHEMA_VERSION, "kind": "cohort-header"}
        header.update(provenance)
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for p in cohort:
            fh.write(json.dumps(p.to_json_obj(), sort_keys=True) + "\n")


def read_cohort(path) -> tuple[list[PatientRecord], dict]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported cohort schema: {header.get('schema_version')}")
        patients = [PatientRecord.from_json_obj(json.loads(line))
                    for line in fh if line.strip()]
    return patients, header


def write_embedding_file(path, codes: list[str], dim: int, seed: int) -> None:
    """Deterministic stand-in for a compressed pretrained embedding file."""
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={dim}\n")
        for code in sorted(set(codes)):
            vec = rng.normal(0.0, 0.3, size=dim)
            fh.write(code + "\t" + ",".join(f"{x:.6f}" for x in vec) + "\n")


def generator_code_universe(cfg: CohortConfig) -> list[str]:
    return sorted(set(BACKGROUND_CODES) | set(cfg.risk_codes) | {cfg.interaction_code})
