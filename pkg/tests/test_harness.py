from decimal import Decimal
from fractions import Fraction

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rtpt.attacks import AttackSpec, generate_and_cache
from rtpt.errors import ConfigurationError, InputError, IntegrityError
from rtpt.harness import (
    CLEAN,
    Condition,
    DatasetHandle,
    EvalRecord,
    ReportTable,
    canonical_lines,
    compute_metrics,
    emit_report,
    load_records,
    make_toy_dataset,
    parse_csv,
    percent,
    plot_sensitivity,
    plot_view_weights,
    render_markdown,
    run_eval,
)
from rtpt.pipeline import method_preset
from rtpt.toy import DEFAULT_NOISE

METHODS = [method_preset("zeroshot"), method_preset("rtpt").with_views(7)]


def rec(i, correct, method="zeroshot", condition=CLEAN, dataset="toy"):
    return EvalRecord(i, dataset, method, condition, correct, 0, 0, 0, "h", "b")


def test_toy_dataset_deterministic_and_balanced():
    a, b = make_toy_dataset(3, 40), make_toy_dataset(3, 40)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != make_toy_dataset(4, 40).fingerprint()
    labels = [y for _, _, y in a]
    assert all(labels.count(k) == 4 for k in range(10))
    with pytest.raises(InputError):
        DatasetHandle("x", ["a", "b"], [(0, torch.zeros(1), 2)])
    with pytest.raises(InputError):
        DatasetHandle("x", ["a", "b"], [(0, torch.zeros(1), 0), (0, torch.zeros(1), 1)])


def test_zero_noise_is_perfectly_separable(backend):
    ds = make_toy_dataset(0, 100, noise=0.0)
    recs = run_eval(ds, backend, [method_preset("zeroshot")])
    assert compute_metrics(recs).score("zeroshot").fraction == 1


def test_percent_and_fixtures():
    assert percent(Fraction(1)) == Decimal("100.0")
    assert percent(Fraction(5, 10)) == Decimal("50.0")
    table = compute_metrics([rec(i, i < 21) for i in range(37)])
    s = table.score("zeroshot")
    assert s.fraction == Fraction(21, 37) and s.display == "56.8"


def test_metrics_errors():
    with pytest.raises(InputError):
        compute_metrics([])
    with pytest.raises(InputError):
        compute_metrics([rec(0, True), rec(1, True, dataset="other")])


@given(st.lists(st.booleans(), min_size=1, max_size=60), st.lists(st.booleans(), min_size=1, max_size=60))
def test_csv_roundtrip(clean, adv):
    recs = [rec(i, c) for i, c in enumerate(clean)] + [rec(i, c, condition="pgd:abc") for i, c in enumerate(adv)]
    recs += [rec(i, not c, method="rtpt") for i, c in enumerate(clean)]
    table = compute_metrics(recs)
    assert parse_csv(emit_report(table, "csv")) == table
    for row in table.rows:
        for s in row.scores.values():
            assert 0 <= s.fraction <= 1


def test_markdown_bolds_column_maxima():
    recs = [rec(i, i < 3) for i in range(4)] + [rec(i, i < 1, method="rtpt") for i in range(4)]
    recs += [rec(i, i < 1, condition="pgd:x") for i in range(4)] + [rec(i, i < 2, "rtpt", "pgd:x") for i in range(4)]
    md = render_markdown(compute_metrics(recs))
    lines = md.splitlines()
    assert "| zeroshot | **75.0** | 25.0 |" in lines
    assert "| rtpt | 25.0 | **50.0** |" in lines


def test_unknown_format():
    with pytest.raises(ConfigurationError):
        emit_report(compute_metrics([rec(0, True)]), "xlsx")


def test_records_from_metrics_are_exact(backend, small_dataset, tmp_path):
    out = tmp_path / "r.jsonl"
    recs = run_eval(small_dataset, backend, METHODS, out_path=out)
    assert compute_metrics(load_records(out)) == compute_metrics(recs)


def test_resume_matches_uninterrupted(backend, small_dataset, tmp_path):
    full = run_eval(small_dataset, backend, METHODS, out_path=tmp_path / "full.jsonl")
    part = tmp_path / "part.jsonl"
    run_eval(small_dataset.subset(7), backend, METHODS, out_path=part)
    # simulate a crash in the middle of a write
    with open(part, "a") as fh:
        fh.write('{"sample_id": 7, "dataset"')
    resumed = run_eval(small_dataset, backend, METHODS, out_path=part)
    assert canonical_lines(resumed) == canonical_lines(full)
    assert canonical_lines(load_records(part)) == canonical_lines(full)


def test_malformed_middle_line(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text(rec(0, True).to_json() + "\n{broken\n" + rec(1, True).to_json() + "\n")
    with pytest.raises(IntegrityError):
        load_records(p)


def test_missing_adversarial_sample(backend, small_dataset):
    cond = Condition("pgd:nope", {})
    with pytest.raises(InputError):
        run_eval(small_dataset, backend, METHODS, [cond])


def test_records_carry_replay_metadata(backend, small_dataset, tmp_path):
    spec = AttackSpec("fgsm", epsilon=1.0)
    cache = generate_and_cache(small_dataset, spec, backend, cache_root=tmp_path)
    recs = run_eval(small_dataset.subset(4), backend, METHODS, [Condition.clean(), Condition.from_cache(cache)])
    conds = {r.condition for r in recs}
    assert conds == {CLEAN, f"fgsm:{spec.spec_hash}"}
    for r in recs:
        assert r.config_hash in {m.config_hash for m in METHODS}
        assert r.backend == backend.identifier


def test_plots_written(tmp_path):
    w = torch.softmax(torch.randn(64, dtype=torch.float64), 0)
    assert plot_view_weights(w, tmp_path / "w.png", "x").stat().st_size > 0
    assert plot_sensitivity([10, 20, 30], {"Acc": [1, 2, 3]}, tmp_path / "s.png", "K").stat().st_size > 0
