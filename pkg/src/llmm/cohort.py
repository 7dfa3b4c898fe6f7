"""Encounter records, diabetes label rules, a synthetic cohort generator and
the patient-grouped train/test split.

Cohort files are JSON Lines, one encounter per line::

    {"patient_id": "P000017", "date": "2020-03-14",
     "note_text": "...", "labs": {"Glucose AC": "148", "TSH": "1.450"},
     "label_binary": "positive", "label_multiclass": "diabetes_only",
     "onset_flag": true}

``labs`` keeps panel order and stores every value as the recorded decimal
string. ``label_binary`` is one of ``positive``/``negative``/``unlabeled`` and
``label_multiclass`` is one of :data:`MULTICLASS_LABELS` or ``unlabeled``.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, DataError

POSITIVE = "positive"
NEGATIVE = "negative"
UNLABELED = "unlabeled"

MULTICLASS_LABELS = (
    "diabetes_only",
    "diabetes_hypertension",
    "diabetes_hyperlipidemia",
    "hypertension_only",
    "other",
)

COHORT_FIELDS = (
    "patient_id",
    "date",
    "note_text",
    "labs",
    "label_binary",
    "label_multiclass",
    "onset_flag",
)


@dataclass(frozen=True)
class LabItem:
    name: str
    unit: str
    decimals: int
    mean: float
    sd: float


# Blood test items from the study cohort description, in that order, with
# plausible adult reference distributions (synthetic defaults, not clinical norms).
_APPENDIX_ITEMS = [
    LabItem("eGFR (MDRD)", "mL/min/1.73m2", 0, 90.0, 18.0),
    LabItem("CRP", "mg/dL", 2, 0.30, 0.20),
    LabItem("High Sensitivity CRP", "mg/L", 2, 1.50, 1.00),
    LabItem("HDL Cholesterol", "mg/dL", 0, 55.0, 12.0),
    LabItem("LDL Cholesterol", "mg/dL", 0, 110.0, 25.0),
    LabItem("Glucose PC 120min", "mg/dL", 0, 120.0, 20.0),
    LabItem("Glucose PC 90min", "mg/dL", 0, 125.0, 20.0),
    LabItem("Glucose random", "mg/dL", 0, 110.0, 20.0),
    LabItem("Apolipoprotein A1", "mg/dL", 0, 150.0, 25.0),
    LabItem("Glucose PC 15 min", "mg/dL", 0, 130.0, 20.0),
    LabItem("Cholesterol T", "mg/dL", 0, 180.0, 30.0),
    LabItem("Creatinine", "mg/dL", 2, 0.90, 0.20),
    LabItem("Glucose random (POCT)", "mg/dL", 0, 110.0, 20.0),
    LabItem("Na", "mmol/L", 0, 140.0, 3.0),
    LabItem("Glucose PC", "mg/dL", 0, 125.0, 20.0),
    LabItem("Glucose AC", "mg/dL", 0, 95.0, 10.0),
    LabItem("HGH (Growth Hormone)", "ng/mL", 2, 1.00, 0.80),
    LabItem("Total LDH", "U/L", 0, 180.0, 30.0),
    LabItem("Glucose PC 180min", "mg/dL", 0, 105.0, 15.0),
    LabItem("HbA1c", "%", 1, 5.4, 0.35),
    LabItem("C-Peptide 6min", "ng/mL", 2, 2.00, 0.60),
    LabItem("Glucose PC 60min", "mg/dL", 0, 140.0, 25.0),
    LabItem("BUN", "mg/dL", 0, 14.0, 4.0),
    LabItem("Glucose AC (POCT)", "mg/dL", 0, 95.0, 10.0),
    LabItem("K", "mmol/L", 1, 4.2, 0.35),
    LabItem("eGFR (CKD-EPI Cystatin C)", "mL/min/1.73m2", 0, 90.0, 18.0),
    LabItem("Glucose PC 30min", "mg/dL", 0, 140.0, 25.0),
    LabItem("Creatinine (POCT)", "mg/dL", 2, 0.90, 0.20),
    LabItem("ALT (SGPT)", "U/L", 0, 25.0, 10.0),
    LabItem("AST (SGOT)", "U/L", 0, 24.0, 8.0),
    LabItem("Triglyceride", "mg/dL", 0, 120.0, 40.0),
]

# Items that appear in the textual-lab example but not in the item list above.
_EXTRA_ITEMS = [
    LabItem("Free T4", "ng/dL", 2, 1.20, 0.20),
    LabItem("TSH", "uIU/mL", 3, 1.80, 0.80),
    LabItem("Estimated GFR(MDRD)", "mL/min/1.73m2", 0, 85.0, 18.0),
    LabItem("Uric Acid", "mg/dL", 1, 5.5, 1.2),
]

LAB_CATALOG: dict[str, LabItem] = {it.name: it for it in _APPENDIX_ITEMS + _EXTRA_ITEMS}
CATALOG_ORDER: tuple[str, ...] = tuple(LAB_CATALOG)

# Panel drawn by default: the textual-lab example's thirteen items plus HbA1c.
DEFAULT_PANEL_ITEMS: tuple[str, ...] = (
    "Free T4",
    "TSH",
    "HDL Cholesterol",
    "BUN",
    "Cholesterol T",
    "Estimated GFR(MDRD)",
    "Glucose AC",
    "ALT (SGPT)",
    "Uric Acid",
    "Creatinine",
    "K",
    "Triglyceride",
    "LDL Cholesterol",
    "HbA1c",
)


def validate_item_name(name: str) -> str:
    if not name or name != name.strip():
        raise DataError(f"invalid lab item name {name!r}")
    if ":" in name or "," in name:
        raise DataError(f"lab item name {name!r} may not contain ':' or ','")
    return name


def _validate_raw(name: str, raw: str) -> str:
    if not isinstance(raw, str) or not raw or raw != raw.strip():
        raise DataError(f"invalid recorded value {raw!r} for {name!r}")
    if ":" in raw or "," in raw:
        raise DataError(f"recorded value {raw!r} for {name!r} may not contain ':' or ','")
    return raw


def _parse_decimal(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else math.nan


@dataclass(frozen=True)
class LabValue:
    raw: str
    value: float
    unit: str = ""


class LabPanel:
    """Ordered lab item -> recorded value mapping.

    Values keep their recorded decimal string (``"1.450"`` stays ``"1.450"``);
    ``value`` is the parsed float, NaN when the string is not numeric.
    """

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[str, LabValue] = {}
        for name, raw in items:
            validate_item_name(name)
            if name in self._entries:
                raise DataError(f"duplicate lab item {name!r} in panel")
            _validate_raw(name, raw)
            unit = LAB_CATALOG[name].unit if name in LAB_CATALOG else ""
            self._entries[name] = LabValue(raw, _parse_decimal(raw), unit)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> LabValue:
        return self._entries[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, LabPanel) and list(self.raw_items()) == list(other.raw_items())

    def __repr__(self) -> str:
        return f"LabPanel({dict(self.raw_items())!r})"

    def items(self):
        return self._entries.items()

    def raw_items(self) -> Iterator[tuple[str, str]]:
        for name, v in self._entries.items():
            yield name, v.raw

    def to_dict(self) -> dict[str, str]:
        return dict(self.raw_items())

    def without(self, names: Iterable[str]) -> "LabPanel":
        drop = set(names)
        return LabPanel([(n, r) for n, r in self.raw_items() if n not in drop])


@dataclass
class EncounterRecord:
    patient_id: str
    date: str
    note_text: str = ""
    panel: LabPanel = field(default_factory=LabPanel)
    label_binary: str = UNLABELED
    label_multiclass: str = UNLABELED
    onset_flag: bool = False

    def __post_init__(self):
        if not self.note_text and len(self.panel) == 0:
            raise DataError(f"record {self.patient_id}@{self.date} has neither note nor labs")
        if self.label_binary not in (POSITIVE, NEGATIVE, UNLABELED):
            raise DataError(f"unknown binary label {self.label_binary!r}")
        if self.label_multiclass not in MULTICLASS_LABELS + (UNLABELED,):
            raise DataError(f"unknown multiclass label {self.label_multiclass!r}")
        dt.date.fromisoformat(self.date)

    @property
    def record_id(self) -> str:
        return f"{self.patient_id}@{self.date}"

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "date": self.date,
            "note_text": self.note_text,
            "labs": self.panel.to_dict(),
            "label_binary": self.label_binary,
            "label_multiclass": self.label_multiclass,
            "onset_flag": self.onset_flag,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EncounterRecord":
        missing = [f for f in COHORT_FIELDS if f not in obj]
        if missing:
            raise DataError(f"cohort record missing fields {missing}")
        return cls(
            patient_id=str(obj["patient_id"]),
            date=str(obj["date"]),
            note_text=obj["note_text"] or "",
            panel=LabPanel(list(obj["labs"].items())),
            label_binary=obj["label_binary"],
            label_multiclass=obj["label_multiclass"],
            onset_flag=bool(obj["onset_flag"]),
        )


def write_cohort(records: Iterable[EncounterRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False))
            fh.write("\n")


def read_cohort(path) -> list[EncounterRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not a JSON object ({exc})") from None
            records.append(EncounterRecord.from_json(obj))
    return records


# label rules


@dataclass(frozen=True)
class LabelRule:
    fpg_threshold: float = 126.0
    hba1c_threshold: float = 6.5
    glucose_item_names: tuple[str, ...] = ("Glucose AC", "Glucose AC (POCT)")
    hba1c_item_names: tuple[str, ...] = ("HbA1c",)

    def __post_init__(self):
        if not (self.fpg_threshold > 0 and self.hba1c_threshold > 0):
            raise ConfigError("label thresholds must be strictly positive")

    def threshold_for(self, name: str) -> float:
        if name in self.glucose_item_names:
            return self.fpg_threshold
        if name in self.hba1c_item_names:
            return self.hba1c_threshold
        raise KeyError(name)

    @property
    def mapped_items(self) -> tuple[str, ...]:
        return self.glucose_item_names + self.hba1c_item_names


def assign_binary_label(panel: LabPanel, rule: LabelRule = LabelRule()) -> str:
    """Fasting glucose >= 126 mg/dL or HbA1c >= 6.5 % (both inclusive) is positive.

    Records without any mapped item are unlabeled, never negative.
    """
    seen = False
    positive = False
    for name in rule.mapped_items:
        if name not in panel:
            continue
        v = panel[name].value
        if math.isnan(v):
            raise DataError(f"non-numeric value {panel[name].raw!r} for label item {name!r}")
        seen = True
        if v >= rule.threshold_for(name):
            positive = True
    if positive:
        return POSITIVE
    return NEGATIVE if seen else UNLABELED


def assign_multiclass_label(diabetes: bool, hypertension: bool, hyperlipidemia: bool) -> str:
    """Five-way chronic disease class from condition flags.

    Diabetes pairings outrank ``hypertension_only``; with all three flags
    set the record is ``diabetes_hypertension``. Hyperlipidemia alone falls
    into ``other``.
    """
    if diabetes:
        if hypertension:
            return "diabetes_hypertension"
        if hyperlipidemia:
            return "diabetes_hyperlipidemia"
        return "diabetes_only"
    if hypertension:
        return "hypertension_only"
    return "other"


# synthetic generation

_CLASS_FLAGS = {
    "diabetes_only": (True, False, False),
    "diabetes_hypertension": (True, True, False),
    "diabetes_hyperlipidemia": (True, False, True),
    "hypertension_only": (False, True, False),
    "other": (False, False, False),
}

DEFAULT_CONDITION_SHIFTS: dict[str, dict[str, float]] = {
    "diabetes": {
        "Glucose AC": 70.0,
        "Glucose AC (POCT)": 70.0,
        "HbA1c": 0.6,
        "Glucose random": 60.0,
        "Glucose random (POCT)": 60.0,
        "Glucose PC": 60.0,
        "Glucose PC 15 min": 60.0,
        "Glucose PC 30min": 60.0,
        "Glucose PC 60min": 60.0,
        "Glucose PC 90min": 60.0,
        "Glucose PC 120min": 60.0,
        "Glucose PC 180min": 50.0,
    },
    "hypertension": {
        "BUN": 4.0,
        "Creatinine": 0.2,
        "Uric Acid": 0.8,
        "eGFR (MDRD)": -12.0,
        "Estimated GFR(MDRD)": -12.0,
    },
    "hyperlipidemia": {
        "LDL Cholesterol": 45.0,
        "Cholesterol T": 50.0,
        "Triglyceride": 90.0,
        "HDL Cholesterol": -8.0,
    },
}

# Standard deviation multipliers for the condition-shifted distributions.
DEFAULT_CONDITION_SD_SCALE: dict[str, dict[str, float]] = {
    "diabetes": {"Glucose AC": 2.5, "Glucose AC (POCT)": 2.5, "HbA1c": 1.4},
}

NOTE_TEMPLATES: dict[str, tuple[str, ...]] = {
    "opening": (
        "This is a {age}-year-old {sex} patient seen at the outpatient clinic for follow-up.",
        "A {age}-year-old {sex} came for routine evaluation.",
        "{age}-year-old {sex} patient visited the clinic for regular check-up.",
        "This {age}-year-old {sex} returned to the clinic today.",
    ),
    "diabetes": (
        "History of type 2 diabetes mellitus under metformin treatment.",
        "Known diabetic with polyuria and polydipsia, insulin titration discussed.",
        "Poorly controlled diabetes mellitus, diet counseling was given.",
        "Diabetes mellitus on oral hypoglycemic agents, reports numbness of both feet.",
    ),
    "hypertension": (
        "Underlying hypertension treated with amlodipine.",
        "Hypertension with home blood pressure around 150/90.",
        "Essential hypertension, continue antihypertensive medication.",
    ),
    "hyperlipidemia": (
        "Hyperlipidemia on statin therapy.",
        "Dyslipidemia noted, lifestyle modification advised.",
    ),
    "neutral": (
        "Complained of intermittent headache for two weeks.",
        "Denies chest pain or dyspnea.",
        "Knee pain after walking was mentioned.",
        "Blurred vision of right eye was noted.",
        "Mild cough without fever.",
        "Sleep quality is fair.",
        "Upon examination, vital signs were stable.",
        "Gout flare last month resolved.",
        "Abdominal discomfort after meals.",
        "No recent hospital admission.",
    ),
    "decoy": (
        "Family history of diabetes in mother.",
        "Concerned about diabetes risk, screening requested.",
    ),
}


@dataclass
class SynthConfig:
    """Parameters of the synthetic cohort.

    ``class_mixture`` gives the five-class prior; diabetes status itself is
    drawn with ``positive_rate`` and the mixture only decides comorbidities
    within the diabetic and non-diabetic groups.
    """

    n_patients: int = 2000
    positive_rate: float = 0.2
    missingness_rate: dict[str, float] | float = 0.3
    panel_items: tuple[str, ...] = DEFAULT_PANEL_ITEMS
    class_mixture: dict[str, float] = field(
        default_factory=lambda: {
            "diabetes_only": 0.08,
            "diabetes_hypertension": 0.07,
            "diabetes_hyperlipidemia": 0.05,
            "hypertension_only": 0.30,
            "other": 0.50,
        }
    )
    lab_params: dict[str, tuple[float, float]] = field(default_factory=dict)
    condition_shifts: dict[str, dict[str, float]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONDITION_SHIFTS.items()}
    )
    condition_sd_scale: dict[str, dict[str, float]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONDITION_SD_SCALE.items()}
    )
    note_templates: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(NOTE_TEMPLATES)
    )
    note_signal_rate: float = 0.6
    note_decoy_rate: float = 0.1
    hyperlipidemia_in_other_rate: float = 0.3
    encounters_per_patient: tuple[int, int] = (1, 2)
    signal_item: str = "Glucose AC"
    rule: LabelRule = field(default_factory=LabelRule)
    start_date: str = "2018-01-01"
    span_days: int = 5 * 365
    seed: int = 0

    def missing_rate(self, name: str) -> float:
        if isinstance(self.missingness_rate, Mapping):
            return float(self.missingness_rate.get(name, 0.0))
        return float(self.missingness_rate)

    def item_params(self, name: str) -> tuple[float, float]:
        if name in self.lab_params:
            return self.lab_params[name]
        it = LAB_CATALOG[name]
        return it.mean, it.sd

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        rates = {"positive_rate": self.positive_rate, "note_signal_rate": self.note_signal_rate,
                 "note_decoy_rate": self.note_decoy_rate,
                 "hyperlipidemia_in_other_rate": self.hyperlipidemia_in_other_rate}
        rates.update({f"missingness[{n}]": self.missing_rate(n) for n in self.panel_items})
        for key, r in rates.items():
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {r}")
        if set(self.class_mixture) != set(MULTICLASS_LABELS):
            raise ConfigError(f"class_mixture must cover exactly {MULTICLASS_LABELS}")
        if any(p < 0 for p in self.class_mixture.values()):
            raise ConfigError("class_mixture probabilities must be non-negative")
        if abs(sum(self.class_mixture.values()) - 1.0) > 1e-9:
            raise ConfigError("class_mixture must sum to 1")
        for name in self.panel_items:
            validate_item_name(name)
            if name not in LAB_CATALOG and name not in self.lab_params:
                raise ConfigError(f"no distribution for lab item {name!r}")
            _, sd = self.item_params(name)
            if sd < 0:
                raise ConfigError(f"degenerate Gaussian for {name!r}: sd={sd} < 0")
        for cond, scales in self.condition_sd_scale.items():
            for name, s in scales.items():
                if s < 0:
                    raise ConfigError(f"negative sd scale for {cond}/{name}")
        lo, hi = self.encounters_per_patient
        if not 1 <= lo <= hi:
            raise ConfigError("encounters_per_patient must satisfy 1 <= min <= max")
        if len(set(self.panel_items)) != len(self.panel_items):
            raise ConfigError("panel_items has duplicates")


# Source cohort ratios (#diabetes / training size) mirrored as presets.
PRESETS: dict[str, dict] = {
    "notes_history": {"positive_rate": 52458 / 212936},
    "labs_text_onset": {"positive_rate": 7892 / 1750711},
    "text_plus_numeric": {"positive_rate": 6844 / 21683},
}


def preset_config(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig(**{**PRESETS[name], **overrides})


def _fmt(value: float, decimals: int) -> str:
    return f"{value:.{decimals}f}"


def _item_decimals(name: str) -> int:
    return LAB_CATALOG[name].decimals if name in LAB_CATALOG else 2


class _PatientSampler:
    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng

    def _dist(self, name: str, flags: dict[str, bool]) -> tuple[float, float]:
        mean, sd = self.cfg.item_params(name)
        for cond, on in flags.items():
            if on:
                mean += self.cfg.condition_shifts.get(cond, {}).get(name, 0.0)
                sd *= self.cfg.condition_sd_scale.get(cond, {}).get(name, 1.0)
        return mean, sd

    def draw(self, name: str, flags, lower=None, upper=None) -> str:
        """Recorded decimal string from the item's distribution, optionally
        constrained to ``lower <= value`` or ``value < upper`` after rounding."""
        mean, sd = self._dist(name, flags)
        dec = _item_decimals(name)
        floor = 10.0 ** (-dec)
        for _ in range(200):
            v = round(max(float(self.rng.normal(mean, sd)), floor), dec)
            if lower is not None and v < lower:
                continue
            if upper is not None and v >= upper:
                continue
            return _fmt(v, dec)
        # far-tail constraint: fall back to the nearest admissible recorded value
        if lower is not None:
            return _fmt(math.ceil(lower * 10**dec) / 10**dec, dec)
        return _fmt(max(floor, math.floor(upper * 10**dec - 1) / 10**dec), dec)

    def panel(self, flags, target_positive: bool | None) -> LabPanel:
        cfg = self.cfg
        rule = cfg.rule
        present = [n for n in cfg.panel_items if self.rng.random() >= cfg.missing_rate(n)]
        mapped = [n for n in present if n in rule.mapped_items]
        trigger = None
        if target_positive and mapped:
            trigger = cfg.signal_item if cfg.signal_item in mapped else mapped[0]
        entries = []
        for name in present:
            if name in rule.mapped_items and target_positive is not None:
                thr = rule.threshold_for(name)
                if name == trigger:
                    raw = self.draw(name, flags, lower=thr)
                elif target_positive:
                    raw = self.draw(name, flags)
                else:
                    raw = self.draw(name, flags, upper=thr)
            else:
                raw = self.draw(name, flags)
            entries.append((name, raw))
        return LabPanel(entries)

    def note(self, flags: dict[str, bool], age: int, sex: str) -> str:
        t = self.cfg.note_templates
        pick = lambda key: t[key][int(self.rng.integers(len(t[key])))]  # noqa: E731
        parts = [pick("opening").format(age=age, sex=sex)]
        if flags["diabetes"] and self.rng.random() < self.cfg.note_signal_rate:
            parts.append(pick("diabetes"))
        elif not flags["diabetes"] and self.rng.random() < self.cfg.note_decoy_rate:
            parts.append(pick("decoy"))
        if flags["hypertension"]:
            parts.append(pick("hypertension"))
        if flags["hyperlipidemia"]:
            parts.append(pick("hyperlipidemia"))
        n_neutral = int(self.rng.integers(1, 3))
        idx = self.rng.choice(len(t["neutral"]), size=n_neutral, replace=False)
        parts.extend(t["neutral"][int(i)] for i in sorted(idx))
        return " ".join(parts)


def _generate_patient(config: SynthConfig, index: int) -> list[EncounterRecord]:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(index,)))
    sampler = _PatientSampler(config, rng)
    mix = config.class_mixture
    diabetic = bool(rng.random() < config.positive_rate)
    group = [c for c in MULTICLASS_LABELS if _CLASS_FLAGS[c][0] == diabetic]
    weights = np.array([mix[c] for c in group])
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(group), 1 / len(group))
    cls = group[int(rng.choice(len(group), p=weights))]
    _, hypertension, hyperlipidemia = _CLASS_FLAGS[cls]
    if cls == "other" and rng.random() < config.hyperlipidemia_in_other_rate:
        hyperlipidemia = True

    age = int(rng.integers(30, 86))
    sex = "male" if rng.random() < 0.5 else "female"
    lo, hi = config.encounters_per_patient
    n_enc = int(rng.integers(lo, hi + 1))
    start = dt.date.fromisoformat(config.start_date)
    first = int(rng.integers(0, config.span_days))
    offsets = [first]
    for _ in range(n_enc - 1):
        offsets.append(offsets[-1] + int(rng.integers(30, 400)))
    dates = [start + dt.timedelta(days=o) for o in offsets]
    onset = None
    if diabetic:
        onset = start + dt.timedelta(days=int(rng.integers(first - 365, offsets[-1] + 1)))

    records = []
    onset_marked = False
    for date in dates:
        state = diabetic and date >= onset
        flags = {"diabetes": state, "hypertension": hypertension,
                 "hyperlipidemia": hyperlipidemia}
        panel = sampler.panel(flags, target_positive=state)
        label = assign_binary_label(panel, config.rule)
        if label == UNLABELED:
            multi = UNLABELED
        else:
            multi = assign_multiclass_label(label == POSITIVE, hypertension, hyperlipidemia)
        onset_flag = False
        if state and label == POSITIVE and not onset_marked:
            onset_marked = True
            onset_flag = (date - onset).days < 180
        note = sampler.note(flags, age, sex)
        records.append(EncounterRecord(
            patient_id=f"P{index:06d}",
            date=date.isoformat(),
            note_text=note,
            panel=panel,
            label_binary=label,
            label_multiclass=multi,
            onset_flag=onset_flag,
        ))
    return records


def generate_cohort(config: SynthConfig) -> list[EncounterRecord]:
    """Synthetic encounters whose binary labels come from the label rule.

    Each patient draws from its own RNG stream derived from ``(seed, index)``,
    so output does not depend on generation order.
    """
    config.validate()
    records = []
    for i in range(config.n_patients):
        records.extend(_generate_patient(config, i))
    return records


def split_cohort(records, ratio: float = 0.8, seed: int = 0):
    """Split by patient: ``round(ratio * n_patients)`` patients go to train."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    records = list(records)
    if not records:
        raise DataError("cannot split an empty cohort")
    patients = sorted({r.patient_id for r in records})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_train = int(round(ratio * len(patients)))
    train_ids = {patients[i] for i in order[:n_train]}
    train = [r for r in records if r.patient_id in train_ids]
    test = [r for r in records if r.patient_id not in train_ids]
    return train, test


def labeled(records, task: str = "binary") -> list[EncounterRecord]:
    key = "label_binary" if task == "binary" else "label_multiclass"
    return [r for r in records if getattr(r, key) != UNLABELED]


def onset_records(records) -> list[EncounterRecord]:
    """Records for the initial-onset task.

    Patients never labeled positive keep every record. A patient whose first
    positive record carries ``onset_flag`` keeps the records up to and
    including it; other positive patients (diagnosed long after onset) are
    dropped, since none of their positives is an initial onset.
    """
    by_patient: dict[str, list[EncounterRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    kept = []
    for recs in by_patient.values():
        recs = sorted(recs, key=lambda r: r.date)
        first = next((k for k, r in enumerate(recs) if r.label_binary == POSITIVE), None)
        if first is None:
            kept.extend(recs)
        elif recs[first].onset_flag:
            kept.extend(recs[: first + 1])
    order = {id(r): k for k, r in enumerate(records)}
    return sorted(kept, key=lambda r: order[id(r)])
