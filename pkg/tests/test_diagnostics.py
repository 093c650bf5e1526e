import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psftlab import diagnostics as dg
from psftlab.trainer import RunLogRecord


def event(step, epoch, clipped, totals):
    return {"step": step, "epoch": epoch, "clipped": [[t, 1.5] for t in clipped],
            "totals": {str(k): v for k, v in totals.items()}}


def test_no_clips_gives_empty_top():
    rep = dg.clip_report([event(1, 1, [], {3: 4, 5: 2})])
    assert rep.top == [] and rep.total_fraction == 0.0


def test_single_token_always_clipped():
    rep = dg.clip_report([event(1, 1, [7, 7, 7], {7: 3, 4: 5})])
    assert rep.top[0] == (7, 1.0, 3)
    assert rep.rates[4] == 0.0


def test_empty_window():
    rep = dg.clip_report([event(1, 1, [7], {7: 1})], window=(5, 9))
    assert rep.n_tokens == 0 and rep.top == [] and rep.total_fraction == 0.0


def test_window_bounds_inclusive():
    evs = [event(s, 1, [3], {3: 2}) for s in range(1, 6)]
    assert dg.clip_report(evs, window=(2, 4)).counts == {3: 3}


def test_ties_ordered_by_id():
    rep = dg.clip_report([event(1, 1, [9, 4], {9: 2, 4: 2, 6: 1})])
    assert rep.top_ids() == [4, 9]


def test_inconsistent_events_rejected():
    with pytest.raises(ValueError):
        dg.clip_report([event(1, 1, [3, 3], {3: 1})])
    with pytest.raises(ValueError):
        dg.clip_report([], key="iteration")




@given(st.lists(st.dictionaries(st.integers(3, 12), st.tuples(st.integers(1, 6), st.integers(0, 6)),
                                min_size=1, max_size=5), min_size=1, max_size=8),
       st.integers(1, 5))
def test_report_invariants(raw, top_k):
    evs = []
    for i, toks in enumerate(raw):
        totals = {t: n for t, (n, _) in toks.items()}
        clipped = [t for t, (n, c) in toks.items() for _ in range(min(c, n))]
        evs.append(event(i + 1, 1 + i // 3, clipped, totals))
    rep = dg.clip_report(evs, top_k=top_k)
    assert all(0.0 <= r <= 1.0 for r in rep.rates.values())
    assert rep.total_fraction == pytest.approx(rep.n_clipped / rep.n_tokens)
    # recomputation from raw events
    n_clip = sum(len(e["clipped"]) for e in evs)
    n_tok = sum(sum(e["totals"].values()) for e in evs)
    assert rep.n_clipped == n_clip and rep.n_tokens == n_tok
    assert len(rep.top) <= top_k
    keys = [(-r, t) for t, r, _ in rep.top]
    assert keys == sorted(keys)
    by_epoch = dg.clip_reports_by_epoch(evs)
    assert sum(r.n_clipped for r in by_epoch.values()) == n_clip


def records(values, field="mean_entropy"):
    out = []
    for i, v in enumerate(values):
        d = {"step": i + 1, "epoch": 1, "mean_entropy": 1.0, "grad_norm": 0.5,
             "clip_fraction": 0.0, "eval": None}
        d[field] = v
        out.append(d)
    return out


def test_constant_entropy_constant_column():
    _, steps, cols = dg.parse_trace(dg.trace_export(records([1.25] * 7), "entropy"))
    assert np.all(cols["value"] == 1.25) and len(steps) == 7


def test_row_count_matches_records():
    text = dg.trace_export(records(list(range(11))), "grad_norm")
    header, steps, _ = dg.parse_trace(text)
    assert steps == list(range(1, 12))
    assert header["quantity"] == "grad_norm" and header["smoothing"] == "none"


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40),
       st.sampled_from(["entropy", "grad_norm", "clip_fraction"]))
def test_export_round_trip_exact(values, quantity):
    field = {"entropy": "mean_entropy"}.get(quantity, quantity)
    recs = records(values, field)
    steps, cols = dg.trace_series(recs, quantity)
    _, steps2, cols2 = dg.parse_trace(dg.trace_export(recs, quantity))
    assert steps2 == steps
    np.testing.assert_array_equal(cols2["value"], cols["value"])


def test_smoothing_recorded_and_applied():
    vals = [0.0, 3.0, 6.0, 9.0, 12.0]
    header, _, cols = dg.parse_trace(dg.trace_export(records(vals), "entropy", window=3))
    assert header["smoothing"] == "centered_moving_average" and header["window"] == 3
    np.testing.assert_allclose(cols["value"], [1.5, 3.0, 6.0, 9.0, 10.5])


def test_eval_rows_only_where_evaluated(tmp_path):
    recs = records([1.0, 1.0, 1.0])
    recs[1]["eval"] = {"ood_nll": 2.0, "indomain_nll": 1.0}
    path = tmp_path / "log.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    steps, cols = dg.trace_series(path, "eval")
    assert steps == [2] and cols == {"indomain_nll": [1.0], "ood_nll": [2.0]}


def test_accepts_record_objects():
    rec = RunLogRecord(1, 1, "sft", 0.5, 1.2, 0.3, 0.0)
    assert dg.trace_series([rec], "entropy") == ([1], {"value": [1.2]})


def test_unknown_quantity():
    with pytest.raises(ValueError):
        dg.trace_export(records([1.0]), "loss_of_nerve")
