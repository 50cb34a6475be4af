"""Metric registry, classification metrics, and accounting suite.

Performance metrics are computed from per-example predicted class
probabilities. Accounting covers inference latency, training speed, model
size, fiscal cost, energy, and carbon, all derived from a declared cost and
power model rather than hardware counters.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .yamlio import canonical_json_bytes


@dataclass(frozen=True)
class Prediction:
    """Probabilities over classes plus the argmax class (ties -> lowest index)."""

    class_probs: tuple
    predicted_class: int


def predictions_from_probs(probs):
    """Wrap an (n, n_classes) probability matrix as Prediction records."""
    probs = np.asarray(probs, dtype=np.float64)
    preds = []
    for row in probs:
        preds.append(Prediction(tuple(float(p) for p in row), int(np.argmax(row))))
    return preds


# ---------------------------------------------------------------------------
# Registry

@dataclass(frozen=True)
class MetricDef:
    name: str
    arity: str  # "per_example_preds" | "aggregate"
    fn: object
    builtin: bool = False


BUILTIN_METRICS = (
    "accuracy",
    "precision_macro",
    "recall_macro",
    "f1_macro",
    "precision_micro",
    "recall_micro",
    "f1_micro",
    "sensitivity",
    "specificity",
    "jaccard",
    "auc",
)

_registry = {}


def register_metric(name, arity, fn):
    """Register a custom metric so task configs can request it by name.

    per_example_preds metrics receive (prediction, label) and are averaged;
    aggregate metrics receive (predictions, labels) once.
    """
    if arity not in ("per_example_preds", "aggregate"):
        raise ValidationError(f"unknown metric arity: {arity!r}")
    if name in _registry:
        raise ValidationError(f"metric {name!r} already registered")
    _registry[name] = MetricDef(name=name, arity=arity, fn=fn)
    return _registry[name]


def metric_names():
    return sorted(_registry)


def resolve_metric(name):
    if name not in _registry:
        candidates = ", ".join(metric_names())
        raise ValidationError(
            f"unknown metric {name!r}; registered metrics: {candidates}"
        )
    return _registry[name]


def _register_builtins():
    for name in BUILTIN_METRICS:
        _registry[name] = MetricDef(
            name=name,
            arity="aggregate",
            fn=(lambda preds, labels, _n=name: compute_performance(preds, labels)[_n]),
            builtin=True,
        )


# ---------------------------------------------------------------------------
# Classification performance

def _auc_one_vs_rest(scores, positives):
    """Rank statistic equal to pair counting with ties worth 1/2."""
    n_pos = int(positives.sum())
    n_neg = len(scores) - n_pos
    ranks = rankdata(scores, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_performance(preds, labels):
    """All built-in classification metrics for a prediction/label pairing.

    Per-class precision/recall/F1 are included as precision_c<k> etc. on top
    of the macro and micro averages. Ratios with a zero denominator are
    defined as 0. AUC is the macro-averaged one-vs-rest rank statistic and is
    omitted from the result whenever some class has no positives or no
    negatives among the labels.
    """
    if len(preds) != len(labels):
        raise ValidationError(
            f"predictions ({len(preds)}) and labels ({len(labels)}) differ in length"
        )
    if len(preds) == 0:
        raise ValidationError("cannot compute metrics on an empty set")

    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray([p.class_probs for p in preds], dtype=np.float64)
    predicted = np.asarray([p.predicted_class for p in preds], dtype=np.int64)
    n_classes = probs.shape[1]

    out = {}
    out["accuracy"] = float(np.mean(predicted == labels))

    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    tn = np.zeros(n_classes)
    for c in range(n_classes):
        tp[c] = np.sum((predicted == c) & (labels == c))
        fp[c] = np.sum((predicted == c) & (labels != c))
        fn[c] = np.sum((predicted != c) & (labels == c))
        tn[c] = np.sum((predicted != c) & (labels != c))

    def ratio(num, den):
        return float(num / den) if den > 0 else 0.0

    precisions, recalls, f1s = [], [], []
    for c in range(n_classes):
        p = ratio(tp[c], tp[c] + fp[c])
        r = ratio(tp[c], tp[c] + fn[c])
        f = ratio(2 * p * r, p + r) if (p + r) > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
        out[f"precision_c{c}"] = p
        out[f"recall_c{c}"] = r
        out[f"f1_c{c}"] = f

    out["precision_macro"] = float(np.mean(precisions))
    out["recall_macro"] = float(np.mean(recalls))
    out["f1_macro"] = float(np.mean(f1s))

    micro_p = ratio(tp.sum(), tp.sum() + fp.sum())
    micro_r = ratio(tp.sum(), tp.sum() + fn.sum())
    micro_f = ratio(2 * micro_p * micro_r, micro_p + micro_r) if (micro_p + micro_r) > 0 else 0.0
    out["precision_micro"] = micro_p
    out["recall_micro"] = micro_r
    out["f1_micro"] = micro_f

    out["sensitivity"] = out["recall_macro"]
    out["specificity"] = float(np.mean([ratio(tn[c], tn[c] + fp[c]) for c in range(n_classes)]))
    out["jaccard"] = float(
        np.mean([ratio(tp[c], tp[c] + fp[c] + fn[c]) for c in range(n_classes)])
    )

    class_counts = np.bincount(labels, minlength=n_classes)
    if np.all(class_counts > 0) and np.all(class_counts < len(labels)):
        aucs = [
            _auc_one_vs_rest(probs[:, c], labels == c) for c in range(n_classes)
        ]
        out["auc"] = float(np.mean(aucs))

    return out


def compute_metrics(names, preds, labels):
    """MetricMap restricted to the requested registered metric names."""
    perf = None
    out = {}
    for name in names:
        mdef = resolve_metric(name)
        if mdef.builtin:
            if perf is None:
                perf = compute_performance(preds, labels)
            if name not in perf:
                continue  # auc omitted on degenerate label sets
            out[name] = perf[name]
        elif mdef.arity == "per_example_preds":
            out[name] = float(
                np.mean([mdef.fn(p, l) for p, l in zip(preds, labels)])
            )
        else:
            out[name] = float(mdef.fn(preds, labels))
    return out


# ---------------------------------------------------------------------------
# Accounting

@dataclass(frozen=True)
class CostModel:
    hourly_rate_usd: float = 0.0

    def __post_init__(self):
        if self.hourly_rate_usd < 0:
            raise ValidationError("hourly_rate_usd must be non-negative")


@dataclass(frozen=True)
class DevicePower:
    name: str
    watts: float
    utilization: float = 1.0

    def __post_init__(self):
        if self.watts < 0:
            raise ValidationError(f"device {self.name!r}: watts must be non-negative")
        if not 0.0 <= self.utilization <= 1.0:
            raise ValidationError(f"device {self.name!r}: utilization must be in [0, 1]")


@dataclass(frozen=True)
class PowerModel:
    """Declared device wattages with datacenter overhead and carbon intensity.

    Defaults (PUE 1.58, 0.432 kg CO2 per kWh) are common datacenter
    assumptions, both configurable under `accounting:` in the task config.
    """

    devices: tuple = ()
    pue: float = 1.58
    carbon_intensity_kg_per_kwh: float = 0.432

    def __post_init__(self):
        if self.pue < 1.0:
            raise ValidationError("pue must be >= 1")
        if self.carbon_intensity_kg_per_kwh < 0:
            raise ValidationError("carbon_intensity_kg_per_kwh must be non-negative")


def compute_cost(total_train_s, cost_model):
    """usd = (total_train_s / 3600) * hourly_rate_usd"""
    return (total_train_s / 3600.0) * cost_model.hourly_rate_usd


def estimate_energy(total_train_s, power_model):
    """(energy_kwh, co2_kg) from declared device power draw.

    energy_kwh = pue * sum(watts * utilization) * hours / 1000
    co2_kg     = energy_kwh * carbon_intensity
    """
    draw_watts = sum(d.watts * d.utilization for d in power_model.devices)
    energy_kwh = power_model.pue * draw_watts * (total_train_s / 3600.0) / 1000.0
    co2_kg = energy_kwh * power_model.carbon_intensity_kg_per_kwh
    return energy_kwh, co2_kg


def training_speed(epoch_times_s, batch_counts):
    """(mean_step_s, total_train_s) over recorded epochs."""
    if len(epoch_times_s) == 0:
        raise ValidationError("training_speed requires at least one epoch")
    if len(epoch_times_s) != len(batch_counts):
        raise ValidationError("epoch times and batch counts differ in length")
    total = float(sum(epoch_times_s))
    steps = int(sum(batch_counts))
    if steps <= 0:
        raise ValidationError("total batch count must be positive")
    return total / steps, total


@dataclass(frozen=True)
class LatencyResult:
    seconds_per_example: float
    n_samples: int


def measure_latency(trainable, test_features, n=25, seed=0):
    """Mean wall time of single-example predictions on a seeded sample.

    Uses min(n, |test|) distinct examples drawn without replacement.
    """
    n_test = test_features.shape[0]
    if n_test == 0:
        raise ValidationError("latency measurement requires a non-empty test set")
    n_used = min(n, n_test)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n_test, size=n_used, replace=False)
    elapsed = 0.0
    for i in idx:
        row = test_features[int(i)]
        t0 = time.perf_counter()
        trainable.predict_proba(row)
        elapsed += time.perf_counter() - t0
    return LatencyResult(elapsed / n_used, n_used)


# ---------------------------------------------------------------------------
# Hardware probe

@dataclass(frozen=True)
class HardwareInfo:
    cpu_core_count: int
    total_memory_bytes: int
    accelerator: str
    valid: bool = True

    def to_dict(self):
        return {
            "cpu_core_count": self.cpu_core_count,
            "total_memory_bytes": self.total_memory_bytes,
            "accelerator": self.accelerator,
            "valid": self.valid,
        }


def collect_hardware_info(_probe=None):
    """Best-effort hardware probe; degrades to zeros/unknown, never raises.

    `_probe` is a test hook returning (cores, memory_bytes).
    """
    try:
        if _probe is not None:
            cores, mem = _probe()
        else:
            import os

            import psutil

            cores = os.cpu_count() or 1
            mem = int(psutil.virtual_memory().total)
        return HardwareInfo(int(cores), int(mem), accelerator="none", valid=True)
    except Exception:
        return HardwareInfo(0, 0, accelerator="unknown", valid=False)


def model_metadata_bytes(meta):
    """Length of the canonical serialized metadata blob, for param_bytes."""
    return len(canonical_json_bytes(meta))


_register_builtins()
