import numpy as np
import pytest

from deskbench import datagen, robustness
from deskbench.datagen import Dataset, Example, PreprocessParams, SplitAssignment
from deskbench.errors import ValidationError
from deskbench.robustness import (
    SlicePredicate,
    apply_slice,
    attack_deepwordbug,
    attack_input_reduction,
    attack_pwws,
    attack_success_rate,
    load_slices,
    load_thesaurus,
    slice_report,
    token_importance,
)
from deskbench.trainables import MultinomialNaiveBayes


def _full_train_split(ds):
    return SplitAssignment(
        train=frozenset(ex.uid for ex in ds.examples), val=frozenset(),
        test=frozenset(), ratios=(1.0, 0.0, 0.0), split_seed=0)


def _nb_world():
    """Tiny corpus where `zork` alone carries class-1 evidence.

    Class 0 has one more document than class 1, so texts with no informative
    tokens fall to class 0.
    """
    texts = [
        ("the movie was fine", 0),
        ("the plot was fine", 0),
        ("the cast was fine", 0),
        ("the movie was zork", 1),
        ("the plot was zork", 1),
    ]
    ds = Dataset(
        dataset_id="zorkworld",
        examples=tuple(Example(uid=f"u{i}", text=t, label=l)
                       for i, (t, l) in enumerate(texts)),
        label_names=("0", "1"), provenance="user_csv",
    )
    fz = datagen.featurize(ds, _full_train_split(ds), PreprocessParams())
    x, y, _ = fz.rows({ex.uid for ex in ds.examples})
    nb = MultinomialNaiveBayes(fz.feature_dim, 2)
    nb.fit_epoch(x, y, 8, 0.0)
    return nb, fz, ds


def _example(text, label=1):
    return Example(uid="attacked", text=text, label=label)


# ---------------------------------------------------------------------------
# Token importance

def test_importance_decisive_token_greatest():
    nb, fz, _ = _nb_world()
    imps = token_importance(nb, "the movie was zork", fz, true_class=1)
    tokens = ["the", "movie", "was", "zork"]
    assert imps[tokens.index("zork")] == max(imps)
    assert imps[tokens.index("zork")] > max(
        v for i, v in enumerate(imps) if tokens[i] != "zork")


def test_importance_oov_token_exactly_zero():
    nb, fz, _ = _nb_world()
    imps = token_importance(nb, "qqq zork", fz, true_class=1)
    assert imps[0] == 0.0
    assert imps[1] > 0.0


def test_importance_single_token_probes_prior():
    nb, fz, _ = _nb_world()
    imps = token_importance(nb, "zork", fz, true_class=1)
    prior_c1 = nb.predict_proba(fz.vectorize_text(""))[0][1]
    full_c1 = nb.predict_proba(fz.vectorize_text("zork"))[0][1]
    assert imps[0] == pytest.approx(full_c1 - prior_c1)


def test_importance_query_count():
    nb, fz, _ = _nb_world()
    calls = 0
    real = nb.predict_proba

    def counting(x):
        nonlocal calls
        calls += 1
        return real(x)

    nb.predict_proba = counting
    token_importance(nb, "the movie was zork", fz, true_class=1)
    assert calls == 5  # len(tokens) + 1


def test_importance_empty_text_rejected():
    nb, fz, _ = _nb_world()
    with pytest.raises(ValidationError):
        token_importance(nb, "", fz, true_class=1)


# ---------------------------------------------------------------------------
# DeepWordBug

def test_deepwordbug_flips_decisive_token_with_budget_one():
    nb, fz, _ = _nb_world()
    outcome = attack_deepwordbug(nb, _example("the movie was zork"), fz,
                                 budget=1, seed=0)
    assert outcome.pred_before == 1
    assert outcome.success
    assert outcome.edits_used == 1
    assert outcome.pred_after == 0
    assert "zork" not in outcome.perturbed.split()
    assert outcome.label == 1  # label never mutated


def test_deepwordbug_budget_zero_noop():
    nb, fz, _ = _nb_world()
    outcome = attack_deepwordbug(nb, _example("the movie was zork"), fz,
                                 budget=0, seed=0)
    assert not outcome.success
    assert outcome.edits_used == 0
    assert outcome.perturbed == "the movie was zork"


def test_deepwordbug_all_oov_no_change():
    nb, fz, _ = _nb_world()
    outcome = attack_deepwordbug(nb, _example("qqq www eee"), fz, budget=3, seed=0)
    assert not outcome.success
    assert outcome.edits_used == 0
    assert outcome.perturbed == "qqq www eee"


def test_deepwordbug_deterministic():
    nb, fz, _ = _nb_world()
    a = attack_deepwordbug(nb, _example("the movie was zork"), fz, budget=2, seed=5)
    b = attack_deepwordbug(nb, _example("the movie was zork"), fz, budget=2, seed=5)
    assert a == b


def test_deepwordbug_monotone_in_budget():
    rng = np.random.default_rng(4)
    params = datagen.SyntheticParams(
        n_samples=120, n_classes=2, vocab_size=80, mean_len=6.0,
        signal_prob=0.5, seed=21)
    ds = datagen.generate_synthetic(params)
    assignment = datagen.split(ds, (0.8, 0.0, 0.2), split_seed=1)
    fz = datagen.featurize(ds, assignment, PreprocessParams())
    x, y, _ = fz.rows(assignment.train)
    nb = MultinomialNaiveBayes(fz.feature_dim, 2)
    nb.fit_epoch(x, y, 16, 0.0)

    test_examples = [ex for ex in ds.examples if ex.uid in assignment.test][:25]
    rates = []
    for budget in (0, 1, 2, 3):
        outcomes = [attack_deepwordbug(nb, ex, fz, budget=budget, seed=3)
                    for ex in test_examples]
        rates.append(attack_success_rate(outcomes))
    assert all(0.0 <= r <= 1.0 for r in rates)
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] > 0.0


# ---------------------------------------------------------------------------
# PWWS

def test_pwws_empty_thesaurus_fails():
    nb, fz, _ = _nb_world()
    outcome = attack_pwws(nb, _example("the movie was zork"), fz, {}, budget=5)
    assert not outcome.success
    assert outcome.edits_used == 0


def test_pwws_adversarial_synonym_flips():
    nb, fz, _ = _nb_world()
    thesaurus = {"zork": ["fine"]}  # `fine` carries class-0 evidence
    outcome = attack_pwws(nb, _example("the movie was zork"), fz, thesaurus, budget=5)
    assert outcome.success
    assert outcome.edits_used == 1
    assert outcome.perturbed == "the movie was fine"


def test_pwws_tie_prefers_earlier_position():
    nb, fz, _ = _nb_world()
    # identical words -> identical scores; the earlier position goes first
    thesaurus = {"zork": ["fine"]}
    outcome = attack_pwws(nb, _example("zork zork", label=1), fz, thesaurus, budget=1)
    assert outcome.perturbed.split()[0] == "fine"
    assert outcome.perturbed.split()[1] == "zork"


def test_pwws_label_never_mutated():
    nb, fz, _ = _nb_world()
    outcome = attack_pwws(nb, _example("the movie was zork"), fz,
                          {"zork": ["fine"]}, budget=5)
    assert outcome.label == 1


# ---------------------------------------------------------------------------
# Input reduction

def test_input_reduction_repeated_decisive_token():
    nb, fz, _ = _nb_world()
    outcome = attack_input_reduction(nb, _example(" ".join(["zork"] * 10)), fz)
    assert outcome.pred_before == 1
    assert outcome.success
    assert len(outcome.perturbed.split()) == 1
    assert outcome.edits_used == 9


def test_input_reduction_single_token_fails():
    nb, fz, _ = _nb_world()
    outcome = attack_input_reduction(nb, _example("zork"), fz)
    assert not outcome.success
    assert outcome.edits_used == 0


def test_input_reduction_uniform_model_reduces_fully():
    class Uniform:
        def predict_proba(self, x):
            return np.full((1, 2), 0.5)

    _, fz, _ = _nb_world()
    outcome = attack_input_reduction(Uniform(), _example("the movie was fine"), fz)
    assert outcome.success
    assert len(outcome.perturbed.split()) == 1
    assert outcome.pred_after == outcome.pred_before == 0


def test_input_reduction_prediction_retained():
    nb, fz, _ = _nb_world()
    outcome = attack_input_reduction(nb, _example("the movie was zork zork"), fz)
    final_pred = int(np.argmax(
        nb.predict_proba(fz.vectorize_text(outcome.perturbed))))
    assert final_pred == outcome.pred_before


# ---------------------------------------------------------------------------
# Success rate and query accounting

def test_attack_success_rate_values():
    def oc(success):
        return robustness.AttackOutcome(
            original="t", perturbed="t", label=0, pred_before=0, pred_after=0,
            edits_used=0, model_queries=0, success=success)

    assert attack_success_rate([oc(True), oc(False), oc(False), oc(True)]) == 0.5
    assert attack_success_rate([oc(False)] * 3 ) == 0.0
    assert attack_success_rate([oc(True)] * 3) == 1.0
    with pytest.raises(ValidationError):
        attack_success_rate([])


class CountingModel:
    """Instrumented stub: counts every predict call it receives."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def predict_proba(self, x):
        self.calls += 1
        return self.inner.predict_proba(x)


@pytest.mark.parametrize("attack", ["dwb", "pwws", "reduction"])
def test_query_accounting_matches_actual_calls(attack):
    nb, fz, _ = _nb_world()
    counted = CountingModel(nb)
    ex = _example("the movie was zork")
    if attack == "dwb":
        outcome = attack_deepwordbug(counted, ex, fz, budget=2, seed=1)
    elif attack == "pwws":
        outcome = attack_pwws(counted, ex, fz, {"zork": ["fine"], "movie": ["plot"]})
    else:
        outcome = attack_input_reduction(counted, ex, fz)
    assert outcome.model_queries == counted.calls


# ---------------------------------------------------------------------------
# Slices

def _slice_ds():
    return Dataset(
        dataset_id="sliced",
        examples=(
            Example(uid="s1", text="one two three", label=0),
            Example(uid="s2", text="Finna head out with ION today ok", label=1),
            Example(uid="s3", text="check https://example.com now", label=0),
            Example(uid="s4", text="plain short", label=1),
        ),
        label_names=("0", "1"), provenance="user_csv",
    )


def test_slice_length_between():
    ds = _slice_ds()
    uids = {ex.uid for ex in ds.examples}
    member = apply_slice(ds, uids, SlicePredicate(name="short", kind="length_between", lo=0, hi=3))
    assert member == {"s1", "s3", "s4"}  # 3, 3, and 2 whitespace tokens
    member = apply_slice(ds, uids, SlicePredicate(name="tiny", kind="length_between", lo=0, hi=2))
    assert member == {"s4"}


def test_slice_contains_any_case_folded():
    ds = _slice_ds()
    uids = {ex.uid for ex in ds.examples}
    member = apply_slice(ds, uids,
                         SlicePredicate(name="aave", kind="contains_any",
                                        words=("finna", "ion")))
    assert member == {"s2"}


def test_slice_label_and_regex():
    ds = _slice_ds()
    uids = {ex.uid for ex in ds.examples}
    assert apply_slice(ds, uids, SlicePredicate(name="l1", kind="label_is", label=1)) == {"s2", "s4"}
    assert apply_slice(ds, uids, SlicePredicate(name="url", kind="regex",
                                                pattern=r"https?://")) == {"s3"}


def test_slice_invalid_regex_rejected():
    with pytest.raises(ValidationError, match="invalid regex"):
        SlicePredicate(name="bad", kind="regex", pattern="(unclosed")


def test_slice_report_rows():
    nb, fz, ds = _nb_world()
    test_uids = {ex.uid for ex in ds.examples}
    slices = [
        SlicePredicate(name="zorky", kind="contains_any", words=("zork",)),
        SlicePredicate(name="nobody", kind="contains_any", words=("absent",)),
    ]
    rows = slice_report(nb, ds, test_uids, fz, slices)
    assert rows[0].name == "overall"
    assert rows[0].delta_vs_overall == 0.0
    by_name = {r.name: r for r in rows}
    assert by_name["zorky"].n_examples == 2
    assert by_name["nobody"].n_examples == 0
    assert by_name["nobody"].accuracy is None
    assert by_name["zorky"].delta_vs_overall == pytest.approx(
        by_name["zorky"].accuracy - rows[0].accuracy)


def test_load_slices_config():
    text = """\
slices:
  - {name: short, kind: length_between, lo: 0, hi: 5}
  - {name: aave, kind: contains_any, words: [finna, ion]}
"""
    slices = load_slices(text)
    assert [s.name for s in slices] == ["short", "aave"]
    with pytest.raises(ValidationError, match="unknown key"):
        load_slices("slices:\n  - {name: x, kind: regex, pattern: a, extra: 1}\n")


def test_load_thesaurus_file(tmp_path):
    p = tmp_path / "th.tsv"
    p.write_text("Good\tfine, great ,Good\nbad\tawful\nempty\t\n")
    th = load_thesaurus(str(p))
    assert th["good"] == ["fine", "great"]  # case folded, self removed
    assert th["bad"] == ["awful"]
    assert "empty" not in th
