import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskbench import analysis
from deskbench.analysis import (
    TableReport,
    convergence_table,
    correlate,
    gaps,
    gaps_ranked,
    make_score_table,
    mrr,
    pareto_front,
    rank_matrix,
    render_report,
    score_table_from_csv,
    score_table_from_docs,
    top_rank_counts,
    zscores,
)
from deskbench.errors import ValidationError


# ---------------------------------------------------------------------------
# Independent oracles

def oracle_competition_ranks(column, maximize=True):
    out = []
    for x in column:
        better = sum(1 for y in column if (y > x if maximize else y < x))
        out.append(1 + better)
    return out


def oracle_mrr_from_table(models, values, maximize=True):
    n_cols = len(values[0])
    ranks_by_col = [
        oracle_competition_ranks([row[j] for row in values], maximize)
        for j in range(n_cols)
    ]
    return {
        m: sum(1.0 / ranks_by_col[j][i] for j in range(n_cols)) / n_cols
        for i, m in enumerate(models)
    }


def _ref_table(data_path):
    return score_table_from_csv(data_path("text_classification_scores.csv"))


# ---------------------------------------------------------------------------
# Ranks

def test_rank_column_examples():
    t = make_score_table(["a", "b", "c"], ["d"], [[0.919], [0.918], [0.915]])
    assert [r[0] for r in rank_matrix(t).ranks] == [1, 2, 3]

    tied = make_score_table(["a", "b", "c"], ["d"], [[0.687], [0.687], [0.680]])
    assert [r[0] for r in rank_matrix(tied).ranks] == [1, 1, 3]
    assert [r[0] for r in rank_matrix(tied, method="dense").ranks] == [1, 1, 2]

    equal = make_score_table(["a", "b", "c"], ["d"], [[0.5], [0.5], [0.5]])
    assert [r[0] for r in rank_matrix(equal).ranks] == [1, 1, 1]


def test_rank_minimize_direction():
    t = make_score_table(["a", "b"], ["d"], [[2.0], [1.0]], direction="minimize")
    assert [r[0] for r in rank_matrix(t).ranks] == [2, 1]


def test_published_table_mrr_and_counts(data_path):
    table = _ref_table(data_path)
    ranks = rank_matrix(table)
    got = mrr(ranks)
    expected = oracle_mrr_from_table(table.models, table.values)
    for m in table.models:
        assert got[m] == pytest.approx(expected[m], abs=1e-12)
    assert got["BERT-base"] == pytest.approx(6.5 / 9, abs=1e-9)
    assert got["RoBERTa-base"] == pytest.approx(6.25 / 9, abs=1e-9)

    counts = top_rank_counts(ranks)
    assert counts["BERT-base"] == 5
    assert counts["RoBERTa-base"] == 4
    assert counts["DistilBERT-base"] == 1
    assert max(counts.values()) == counts["BERT-base"]


def test_published_table_gaps(data_path):
    table = _ref_table(data_path)
    g = gaps(table)
    assert g["SST5"] == pytest.approx(0.551 - 0.468, abs=1e-12)
    ranked = gaps_ranked(table)
    assert {ranked[0][0], ranked[1][0]} == {"GE", "SST5"}
    assert {ranked[-1][0], ranked[-2][0]} == {"DBP", "MGB"}


def test_mrr_single_dataset_and_bounds():
    t = make_score_table(["a", "b"], ["d"], [[0.9], [0.8]])
    values = mrr(rank_matrix(t))
    assert values == {"a": 1.0, "b": 0.5}
    assert all(0 < v <= 1 for v in values.values())


def test_mrr_one_iff_always_first():
    t = make_score_table(["a", "b"], ["d1", "d2"], [[0.9, 0.9], [0.8, 0.95]])
    values = mrr(rank_matrix(t))
    assert values["a"] < 1.0 and values["b"] < 1.0
    t2 = make_score_table(["a", "b"], ["d1", "d2"], [[0.9, 0.99], [0.8, 0.95]])
    assert mrr(rank_matrix(t2))["a"] == 1.0


def test_top_rank_counts_all_equal():
    t = make_score_table(["a", "b", "c"], ["d1", "d2"], [[1, 1], [1, 1], [1, 1]])
    assert top_rank_counts(rank_matrix(t)) == {"a": 2, "b": 2, "c": 2}


# ---------------------------------------------------------------------------
# Z-scores

def test_zscores_two_point():
    t = make_score_table(["a", "b"], ["d"], [[2.0], [4.0]])
    z = zscores(t)
    assert z[:, 0].tolist() == [-1.0, 1.0]


def test_zscores_constant_column_zero():
    t = make_score_table(["a", "b"], ["d"], [[3.0], [3.0]])
    assert zscores(t)[:, 0].tolist() == [0.0, 0.0]


def test_zscores_match_statistics_oracle(data_path):
    table = _ref_table(data_path)
    z = zscores(table)
    j = list(table.datasets).index("SST5")
    col = np.array([row[j] for row in table.values])
    mu = col.mean()
    sigma = np.sqrt(((col - mu) ** 2).mean())  # population sigma
    for i in range(len(table.models)):
        assert z[i, j] == pytest.approx((col[i] - mu) / sigma, abs=1e-9)
    # standardization property
    assert z[:, j].mean() == pytest.approx(0.0, abs=1e-9)
    assert z[:, j].std() == pytest.approx(1.0, abs=1e-9)


def test_gaps_constant_column():
    t = make_score_table(["a", "b"], ["d"], [[0.5], [0.5]])
    assert gaps(t)["d"] == 0.0


# ---------------------------------------------------------------------------
# Pareto

def test_pareto_example():
    points = [("m1", (1.0, 0.90)), ("m2", (2.0, 0.95)), ("m3", (3.0, 0.94))]
    front = pareto_front(points, ("minimize", "maximize"))
    by_id = {p.model_id: p for p in front}
    assert not by_id["m1"].dominated
    assert not by_id["m2"].dominated
    assert by_id["m3"].dominated  # m2 is faster and better


def test_pareto_single_and_duplicates():
    single = pareto_front([("m", (1.0, 1.0))], ("minimize", "maximize"))
    assert not single[0].dominated

    dupes = pareto_front([("a", (1.0, 0.9)), ("b", (1.0, 0.9))],
                         ("minimize", "maximize"))
    assert all(not p.dominated for p in dupes)


def test_pareto_dimensionality_checked():
    with pytest.raises(ValidationError, match="dimensionality"):
        pareto_front([("a", (1.0,))], ("minimize", "maximize"))


def oracle_front_membership(points, directions):
    def dominates(a, b):
        strict = False
        for x, y, d in zip(a, b, directions):
            better = x > y if d == "maximize" else x < y
            worse = x < y if d == "maximize" else x > y
            if worse:
                return False
            if better:
                strict = True
        return strict

    out = {}
    for m, c in points:
        out[(m, c)] = any(dominates(o, c) for om, o in points
                          if (om, o) != (m, c))
    return out


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pareto_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    points = [(f"m{i}", (float(rng.integers(0, 4)), float(rng.integers(0, 4))))
              for i in range(6)]
    front = pareto_front(points, ("minimize", "maximize"))
    expected = oracle_front_membership(points, ("minimize", "maximize"))
    for p in front:
        assert p.dominated == expected[(p.model_id, p.coordinates)]
    # every non-front point is dominated by at least one front point
    front_coords = [p.coordinates for p in front if not p.dominated]
    for p in front:
        if p.dominated:
            assert any(oracle_front_membership(
                [("x", p.coordinates), ("f", fc)],
                ("minimize", "maximize"))[("x", p.coordinates)]
                for fc in front_coords)


# ---------------------------------------------------------------------------
# Correlation

def test_correlate_linear():
    xs = [1.0, 2.0, 3.0, 4.0]
    ys = [2 * x + 1 for x in xs]
    r = correlate(xs, ys)
    assert r.pearson == pytest.approx(1.0)
    assert r.spearman == pytest.approx(1.0)


def test_correlate_reverse_sorted():
    xs = [1.0, 2.0, 3.0, 4.0]
    ys = [9.0, 6.0, 5.0, 1.0]
    assert correlate(xs, ys).spearman == pytest.approx(-1.0)


def test_correlate_constant_absent():
    r = correlate([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert r.pearson is None and r.spearman is None
    assert "variance" in r.reason


def test_correlate_needs_three():
    with pytest.raises(ValidationError):
        correlate([1.0, 2.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# Invariance property

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rank_analyses_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    values = rng.random((4, 3))
    t1 = make_score_table([f"m{i}" for i in range(4)], [f"d{j}" for j in range(3)], values)
    transformed = np.exp(2.0 * values)  # strictly increasing
    t2 = make_score_table(t1.models, t1.datasets, transformed)
    assert rank_matrix(t1).ranks == rank_matrix(t2).ranks
    assert mrr(rank_matrix(t1)) == mrr(rank_matrix(t2))
    assert top_rank_counts(rank_matrix(t1)) == top_rank_counts(rank_matrix(t2))


# ---------------------------------------------------------------------------
# Doc-based tables

def _doc(model, dataset, trial_index, val, test_acc, best_epoch=0, status="ok"):
    return {
        "envelope": {"study_id": "s", "model_id": model, "dataset_id": dataset,
                     "context": {"direction": "maximize", "goal_metric": "accuracy"}},
        "trial": {"trial_index": trial_index, "status": status,
                  "epoch_history": [[0.1, val]], "best_epoch": 0 if status == "ok" else None,
                  "test_metrics": {"accuracy": test_acc},
                  "accounting": {"inference_latency_s": 0.001},
                  "params": {}, "seed": 0},
    }


def test_score_table_from_docs_selection():
    docs = [
        _doc("m", "d", 0, val=0.8, test_acc=0.70),
        _doc("m", "d", 1, val=0.9, test_acc=0.75),  # best val -> chosen
        _doc("n", "d", 0, val=0.5, test_acc=0.60),
    ]
    t = score_table_from_docs(docs)
    assert t.values[t.models.index("m")][0] == 0.75
    assert t.values[t.models.index("n")][0] == 0.60


def test_score_table_missing_cell_rejected():
    docs = [_doc("m", "d1", 0, 0.5, 0.5), _doc("m", "d2", 0, 0.5, 0.5),
            _doc("n", "d1", 0, 0.5, 0.5)]
    with pytest.raises(ValidationError, match="missing cell"):
        score_table_from_docs(docs)


def test_convergence_table_selection_rules():
    docs = [
        _doc("m", "d", 0, val=0.8, test_acc=0.8),
        _doc("m", "d", 1, val=0.9, test_acc=0.9),
    ]
    docs[0]["trial"]["epoch_history"] = [[0.1, 0.2]] * 6
    docs[0]["trial"]["best_epoch"] = 5
    docs[0]["trial"]["epoch_history"][5] = [0.1, 0.8]
    docs[1]["trial"]["epoch_history"] = [[0.1, 0.2]] * 3
    docs[1]["trial"]["best_epoch"] = 2
    docs[1]["trial"]["epoch_history"][2] = [0.1, 0.9]
    conv = convergence_table(docs)
    assert conv[("m", "d")] == 2  # trial 1 wins on val accuracy

    failed = [_doc("m", "d", 0, 0.5, 0.5, status="failed")]
    assert convergence_table(failed) == {}


# ---------------------------------------------------------------------------
# Rendering

def _report():
    return TableReport(
        title="mrr", row_labels=("a", "b"), col_labels=("d1", "d2"),
        values=((0.5, 0.25), (1.0, 0.75)))


def test_render_svg_byte_deterministic(tmp_path):
    p1 = render_report(_report(), "svg_heatmap", str(tmp_path / "a.svg"))
    p2 = render_report(_report(), "svg_heatmap", str(tmp_path / "b.svg"))
    b1, b2 = open(p1, "rb").read(), open(p2, "rb").read()
    assert b1 == b2
    assert b1.startswith(b"<svg")
    assert b1.count(b"<rect") == 4


def test_render_text_aligned(tmp_path):
    path = render_report(_report(), "text", str(tmp_path / "t.txt"))
    text = open(path).read()
    assert "0.5000" in text and "1.0000" in text
    assert text.splitlines()[0] == "mrr"


def test_render_csv(tmp_path):
    path = render_report(_report(), "csv", str(tmp_path / "t.csv"))
    lines = open(path).read().splitlines()
    assert lines[0] == "model,d1,d2"
    assert lines[1].startswith("a,0.5,")


def test_render_empty_rejected(tmp_path):
    empty = TableReport(title="x", row_labels=(), col_labels=(), values=())
    with pytest.raises(ValidationError, match="nothing to render"):
        render_report(empty, "text", str(tmp_path / "x.txt"))


def test_render_unknown_kind(tmp_path):
    with pytest.raises(ValidationError, match="unknown report kind"):
        render_report(_report(), "pdf", str(tmp_path / "x.pdf"))
