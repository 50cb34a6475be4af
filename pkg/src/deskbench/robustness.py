"""Black-box robustness evaluation: deletion-probe token importance, three
attacks (character corruption, synonym substitution, input reduction), and
predicate-based subpopulation slices.

Attacks query the model only through text-in/probabilities-out, so they work
for any trainable that can score a featurized text. Every prediction call is
counted into the outcome's model_queries.
"""

import csv
import math
import re
import string
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .metrics import predictions_from_probs, compute_performance

LETTERS = string.ascii_lowercase


@dataclass(frozen=True)
class AttackOutcome:
    original: str
    perturbed: str
    label: int
    pred_before: int
    pred_after: int
    edits_used: int
    model_queries: int
    success: bool


@dataclass(frozen=True)
class SlicePredicate:
    name: str
    kind: str  # contains_any | length_between | label_is | regex
    words: tuple = None
    lo: int = None
    hi: int = None
    label: int = None
    pattern: str = None

    def __post_init__(self):
        if self.kind == "contains_any":
            if not self.words:
                raise ValidationError(f"slice {self.name!r}: word list must be non-empty")
        elif self.kind == "length_between":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise ValidationError(f"slice {self.name!r}: need lo <= hi")
        elif self.kind == "label_is":
            if self.label is None:
                raise ValidationError(f"slice {self.name!r}: need a label")
        elif self.kind == "regex":
            if self.pattern is None:
                raise ValidationError(f"slice {self.name!r}: need a pattern")
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise ValidationError(f"slice {self.name!r}: invalid regex: {exc}")
        else:
            raise ValidationError(f"slice {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class SliceReportRow:
    name: str
    n_examples: int
    accuracy: float  # None when the slice is empty
    delta_vs_overall: float


class _QueryCounter:
    """Counts predictions and keeps the probability lookup in one place."""

    def __init__(self, trainable, fz):
        self.trainable = trainable
        self.fz = fz
        self.calls = 0

    def probs(self, text):
        self.calls += 1
        return np.asarray(self.trainable.predict_proba(self.fz.vectorize_text(text)))[0]


def token_importance(trainable, text, fz, true_class):
    """Deletion-probe importance per token of `text` (tokenized per the
    featurizer's preprocessing params).

    importance_i = P(true_class | text) - P(true_class | text minus token i).
    Uses exactly len(tokens) + 1 model queries. Out-of-vocabulary tokens get
    importance 0 exactly because removing them leaves the features unchanged.
    """
    from .datagen import tokenize

    tokens = tokenize(text, fz.pp)
    if not tokens:
        raise ValidationError("cannot score an empty text")
    q = _QueryCounter(trainable, fz)
    base = q.probs(" ".join(tokens))[true_class]
    importances = []
    for i in range(len(tokens)):
        reduced = tokens[:i] + tokens[i + 1:]
        if not reduced:
            probe = q.probs("")  # prior-only prediction
        else:
            probe = q.probs(" ".join(reduced))
        importances.append(float(base - probe[true_class]))
    return importances


def _word_importances(q, words, true_class):
    """Removal-probe drops for whitespace word units; returns (base_probs, drops)."""
    base = q.probs(" ".join(words))
    drops = []
    for i in range(len(words)):
        rest = words[:i] + words[i + 1:]
        probe = q.probs(" ".join(rest))
        drops.append(float(base[true_class] - probe[true_class]))
    return base, drops


def _char_variants(word, rng):
    """All single-edit character corruptions of one word, in a fixed order."""
    variants = []
    for gap in range(len(word) + 1):
        letter = LETTERS[int(rng.integers(0, len(LETTERS)))]
        variants.append(word[:gap] + letter + word[gap:])
    for i in range(len(word) - 1):
        variants.append(word[:i] + word[i + 1] + word[i] + word[i + 2:])
    if len(word) > 1:
        for i in range(len(word)):
            variants.append(word[:i] + word[i + 1:])
    for i in range(len(word)):
        pool = LETTERS.replace(word[i].lower(), "") or LETTERS
        letter = pool[int(rng.integers(0, len(pool)))]
        variants.append(word[:i] + letter + word[i + 1:])
    return variants


def attack_deepwordbug(trainable, example, fz, budget=3, seed=0):
    """Greedy character-level corruption of the most important words.

    Words are ranked by removal importance (ties break to the earlier
    position). For each of the top-`budget` words, all four single-edit
    transforms are tried (insert, adjacent swap, delete, substitute) and the
    single variant with the largest drop in true-class probability is applied
    when that drop is positive. Stops early once the predicted class flips.
    """
    rng = np.random.default_rng(seed)
    q = _QueryCounter(trainable, fz)
    words = example.text.split()
    if not words:
        raise ValidationError("cannot attack an empty text")

    base, drops = _word_importances(q, words, example.label)
    pred_before = int(np.argmax(base))
    order = sorted(range(len(words)), key=lambda i: (-drops[i], i))

    current = list(words)
    current_prob = float(base[example.label])
    pred_after = pred_before
    edits = 0
    flipped = False
    for pos in order[:budget]:
        if flipped:
            break
        best = None  # (new_prob, probs, variant)
        for variant in _char_variants(current[pos], rng):
            trial_words = list(current)
            trial_words[pos] = variant
            probs = q.probs(" ".join(trial_words))
            p = float(probs[example.label])
            if best is None or p < best[0]:
                best = (p, probs, variant)
        if best is None or current_prob - best[0] <= 0:
            continue
        current[pos] = best[2]
        current_prob = best[0]
        edits += 1
        if int(np.argmax(best[1])) != pred_before:
            pred_after = int(np.argmax(best[1]))
            flipped = True

    perturbed = " ".join(current)
    if not flipped and edits > 0:
        pred_after = int(np.argmax(q.probs(perturbed)))
    success = pred_after != pred_before
    return AttackOutcome(
        original=example.text, perturbed=perturbed, label=example.label,
        pred_before=pred_before, pred_after=pred_after, edits_used=edits,
        model_queries=q.calls, success=success,
    )


def load_thesaurus(path):
    """Flat thesaurus file: `word<TAB>syn1,syn2,...` per line, case-folded."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValidationError(f"{path}:{lineno}: expected word<TAB>synonyms")
            word, _, syns = line.partition("\t")
            word = word.strip().casefold()
            synonyms = [s.strip().casefold() for s in syns.split(",") if s.strip()]
            synonyms = [s for s in synonyms if s != word]
            if synonyms:
                table[word] = synonyms
    return table


def attack_pwws(trainable, example, fz, thesaurus, budget=5):
    """Saliency-weighted greedy synonym substitution.

    For each word with synonyms, the best replacement is the one maximizing
    the drop in true-class probability; words are substituted in order of
    drop x softmax(saliency), earlier positions first on ties, until the
    prediction flips or the budget is spent.
    """
    q = _QueryCounter(trainable, fz)
    words = example.text.split()
    if not words:
        raise ValidationError("cannot attack an empty text")

    base, saliency = _word_importances(q, words, example.label)
    pred_before = int(np.argmax(base))
    sal = np.array(saliency)
    sal_soft = np.exp(sal - sal.max())
    sal_soft = sal_soft / sal_soft.sum()

    candidates = []  # (score, position, replacement)
    for i, word in enumerate(words):
        syns = thesaurus.get(word.casefold())
        if not syns:
            continue
        best_drop, best_syn = None, None
        for syn in syns:
            trial_words = list(words)
            trial_words[i] = syn
            p = float(q.probs(" ".join(trial_words))[example.label])
            drop = float(base[example.label]) - p
            if best_drop is None or drop > best_drop:
                best_drop, best_syn = drop, syn
        candidates.append((best_drop * float(sal_soft[i]), i, best_syn))

    candidates.sort(key=lambda c: (-c[0], c[1]))

    current = list(words)
    pred_after = pred_before
    edits = 0
    for _, pos, replacement in candidates[:budget]:
        current[pos] = replacement
        edits += 1
        probs = q.probs(" ".join(current))
        if int(np.argmax(probs)) != pred_before:
            pred_after = int(np.argmax(probs))
            break

    return AttackOutcome(
        original=example.text, perturbed=" ".join(current), label=example.label,
        pred_before=pred_before, pred_after=pred_after, edits_used=edits,
        model_queries=q.calls, success=pred_after != pred_before,
    )


def attack_input_reduction(trainable, example, fz, theta=0.5):
    """Delete low-importance words while the prediction is retained.

    Each round recomputes removal probes on the current text; among deletions
    that keep the predicted class equal to the original prediction, the one
    with the lowest importance is committed. Stops when every deletion would
    change the prediction or one token remains. Success means at least
    `theta` of the tokens were removed with the prediction retained.
    """
    q = _QueryCounter(trainable, fz)
    words = example.text.split()
    if not words:
        raise ValidationError("cannot attack an empty text")
    n_original = len(words)

    base = q.probs(example.text)
    pred_before = int(np.argmax(base))

    current = list(words)
    while len(current) > 1:
        probes = []
        for i in range(len(current)):
            rest = current[:i] + current[i + 1:]
            probs = q.probs(" ".join(rest))
            drop = float(base[example.label]) - float(probs[example.label])
            probes.append((drop, i, int(np.argmax(probs))))
        probes.sort(key=lambda p: (p[0], p[1]))
        committed = False
        for _, i, pred in probes:
            if pred == pred_before:
                current = current[:i] + current[i + 1:]
                committed = True
                break
        if not committed:
            break

    removed = n_original - len(current)
    # success: at least theta of the tokens removed (so a 1-token text can
    # never succeed) with the prediction retained throughout
    success = removed >= math.ceil(theta * n_original)
    return AttackOutcome(
        original=example.text, perturbed=" ".join(current), label=example.label,
        pred_before=pred_before, pred_after=pred_before, edits_used=removed,
        model_queries=q.calls, success=success,
    )


def attack_success_rate(outcomes):
    if not outcomes:
        raise ValidationError("attack_success_rate needs at least one outcome")
    return sum(1 for o in outcomes if o.success) / len(outcomes)


# ---------------------------------------------------------------------------
# Slices

def slice_matches(predicate, example):
    """Membership is decided on the raw text, before featurization."""
    if predicate.kind == "contains_any":
        tokens = {t.casefold() for t in example.text.split()}
        return any(w.casefold() in tokens for w in predicate.words)
    if predicate.kind == "length_between":
        return predicate.lo <= len(example.text.split()) <= predicate.hi
    if predicate.kind == "label_is":
        return example.label == predicate.label
    return re.search(predicate.pattern, example.text) is not None


def apply_slice(ds, uids, predicate):
    """The subset of `uids` whose examples satisfy the predicate."""
    member = {ex.uid for ex in ds.examples if ex.uid in uids and slice_matches(predicate, ex)}
    return member


def slice_report(trainable, ds, test_uids, fz, slices):
    """Accuracy per slice against the overall test accuracy."""
    x, y, order = fz.rows(test_uids)
    probs = trainable.predict_proba(x)
    preds = predictions_from_probs(probs)
    overall = compute_performance(preds, y)["accuracy"]
    correct = {u: (preds[i].predicted_class == y[i]) for i, u in enumerate(order)}

    rows = [SliceReportRow(name="overall", n_examples=len(order),
                           accuracy=overall, delta_vs_overall=0.0)]
    for predicate in slices:
        member = apply_slice(ds, set(test_uids), predicate)
        if not member:
            rows.append(SliceReportRow(name=predicate.name, n_examples=0,
                                       accuracy=None, delta_vs_overall=None))
            continue
        acc = sum(1 for u in member if correct[u]) / len(member)
        rows.append(SliceReportRow(name=predicate.name, n_examples=len(member),
                                   accuracy=acc, delta_vs_overall=acc - overall))
    return rows


def load_slices(text, source=None):
    """Parse an evaluation config with a `slices:` list of predicates."""
    from .yamlio import load_yaml

    data = load_yaml(text, source)
    if not isinstance(data, dict) or "slices" not in data:
        raise ValidationError("slice config must contain a `slices:` list")
    out = []
    for i, raw in enumerate(data["slices"]):
        if not isinstance(raw, dict):
            raise ValidationError(f"slices[{i}]: expected a mapping")
        kwargs = {
            "name": raw.get("name", f"slice_{i}"),
            "kind": raw.get("kind"),
        }
        if "words" in raw:
            kwargs["words"] = tuple(raw["words"])
        for key in ("lo", "hi", "label", "pattern"):
            if key in raw:
                kwargs[key] = raw[key]
        unknown = set(raw) - {"name", "kind", "words", "lo", "hi", "label", "pattern"}
        if unknown:
            raise ValidationError(f"slices[{i}]: unknown key(s): {sorted(unknown)}")
        out.append(SlicePredicate(**kwargs))
    return out


def write_attack_csv(path, rows):
    """One row per (model, dataset, attack, example)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "dataset_id", "attack", "uid", "label",
                    "pred_before", "pred_after", "edits_used", "model_queries",
                    "success", "original", "perturbed"])
        for model_id, dataset_id, attack, uid, oc in rows:
            w.writerow([model_id, dataset_id, attack, uid, oc.label,
                        oc.pred_before, oc.pred_after, oc.edits_used,
                        oc.model_queries, int(oc.success), oc.original, oc.perturbed])
    return path
