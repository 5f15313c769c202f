"""Span parsing, windowing, call-graph derivation, metric table loading."""

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlgt.trace_ingest import (CLIENT, MetricsParseError, SpanParseError,
                                TraceValidationError, derive_mcg, group_traces,
                                load_service_metrics, parse_spans, window_of)


def span(trace="t1", sid="s1", parent=CLIENT, service="a", api="checkout",
         start=0, end=10, status="ok", **extra):
    rec = {"trace_id": trace, "span_id": sid, "parent_service": parent,
           "service": service, "api": api, "start_us": start, "end_us": end,
           "status": status}
    rec.update(extra)
    return rec


def dumps_lines(*records):
    return io.StringIO("\n".join(json.dumps(r) for r in records) + "\n")


def test_parse_round_trip():
    recs = parse_spans(dumps_lines(
        span(sid="s1", start=5, end=25),
        span(sid="s2", parent="a", service="b", start=7, end=20, status="failed"),
    ))
    assert len(recs) == 2
    assert recs[0].span_id == "s1" and recs[0].status == "ok"
    assert recs[1].parent_service == "a" and recs[1].end_us == 20


def test_parse_skips_blank_lines():
    text = json.dumps(span()) + "\n\n   \n" + json.dumps(span(sid="s2")) + "\n"
    assert len(parse_spans(io.StringIO(text))) == 2


@pytest.mark.parametrize("mutate", [
    lambda r: r.pop("status"),                  # missing field
    lambda r: r.update(extra_field=1),          # unknown field
    lambda r: r.update(start_us="5"),           # string timestamp
    lambda r: r.update(start_us=True),          # bool is not an int here
    lambda r: r.update(end_us=-1, start_us=0),  # end before start
    lambda r: r.update(status="meh"),           # bad status token
    lambda r: r.update(service=""),             # empty string field
])
def test_parse_rejects_malformed(mutate):
    rec = span()
    mutate(rec)
    with pytest.raises(SpanParseError) as exc:
        parse_spans(dumps_lines(rec))
    assert "line 1" in str(exc.value)


def test_parse_rejects_self_invocation():
    with pytest.raises(SpanParseError):
        parse_spans(dumps_lines(span(parent="a", service="a")))


def test_parse_error_reports_line_number():
    ok = json.dumps(span())
    bad = "{not json"
    with pytest.raises(SpanParseError) as exc:
        parse_spans(io.StringIO(ok + "\n" + ok + "\n" + bad + "\n"))
    assert "line 3" in str(exc.value)


def test_window_of_examples():
    assert window_of(0, 30) == 0
    assert window_of(29_999_999, 30) == 0
    assert window_of(30_000_000, 30) == 1
    assert window_of(95_000_000, 30) == 3


@given(st.integers(0, 10 ** 15), st.integers(1, 3600))
@settings(max_examples=100, deadline=None)
def test_window_of_consistency(start, delta):
    w = window_of(start, delta)
    assert w * delta * 1_000_000 <= start < (w + 1) * delta * 1_000_000


def test_group_traces_by_earliest_span():
    recs = parse_spans(dumps_lines(
        span(trace="t1", sid="a", start=29_000_000, end=29_500_000),
        # child starts in the next window; the trace stays with its root window
        span(trace="t1", sid="b", parent="a", service="b",
             start=31_000_000, end=32_000_000),
        span(trace="t2", sid="c", start=31_000_000, end=31_100_000),
    ))
    grouped = group_traces(recs, 30)
    assert set(grouped) == {("checkout", 0), ("checkout", 1)}
    w0 = grouped[("checkout", 0)]
    assert [t.trace_id for t in w0.traces] == ["t1"]
    assert w0.traces[0].latency_us == 32_000_000 - 29_000_000
    assert w0.window_length_us == 30_000_000


def test_group_traces_rejects_mixed_api():
    recs = parse_spans(dumps_lines(
        span(trace="t1", sid="a"),
        span(trace="t1", sid="b", parent="a", service="b", api="other"),
    ))
    with pytest.raises(TraceValidationError):
        group_traces(recs, 30)


def test_group_traces_rejects_duplicate_span_ids():
    recs = parse_spans(dumps_lines(
        span(trace="t1", sid="a"),
        span(trace="t1", sid="a", parent="a", service="b"),
    ))
    with pytest.raises(TraceValidationError):
        group_traces(recs, 30)


def test_trace_failed_flag():
    recs = parse_spans(dumps_lines(
        span(trace="t1", sid="a"),
        span(trace="t1", sid="b", parent="a", service="b", status="failed"),
        span(trace="t2", sid="c"),
    ))
    grouped = group_traces(recs, 30)
    traces = {t.trace_id: t for t in grouped[("checkout", 0)].traces}
    assert traces["t1"].failed and not traces["t2"].failed


def test_derive_mcg_sorted_and_client_free():
    recs = parse_spans(dumps_lines(
        span(trace="t1", sid="1", parent=CLIENT, service="gw"),
        span(trace="t1", sid="2", parent="gw", service="db"),
        span(trace="t2", sid="3", parent="gw", service="auth"),
    ))
    mcg = derive_mcg(recs)
    assert mcg.services == ("auth", "db", "gw")
    assert mcg.edges == {("gw", "db"), ("gw", "auth")}


@given(st.permutations(list(range(6))))
@settings(max_examples=30, deadline=None)
def test_derive_mcg_order_invariant(perm):
    base = [
        span(trace=f"t{i}", sid=f"s{i}", parent=p, service=s)
        for i, (p, s) in enumerate([(CLIENT, "a"), ("a", "b"), ("a", "c"),
                                    ("c", "d"), (CLIENT, "c"), ("b", "d")])
    ]
    recs = parse_spans(dumps_lines(*[base[i] for i in perm]))
    mcg = derive_mcg(recs)
    assert mcg.services == ("a", "b", "c", "d")
    assert mcg.edges == {("a", "b"), ("a", "c"), ("c", "d"), ("b", "d")}


# --------------------------------------------------------------------------
# metrics table

def metrics_csv(rows, header=None):
    header = header or ",".join(
        ["window_index", "service", "pod_count", "cpu_usage_ratio",
         "memory_usage_ratio", "network_rx_bytes", "network_tx_bytes",
         "disk_io_bytes"])
    return io.StringIO(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def test_metrics_lookup_carry_forward_and_zeros():
    m = load_service_metrics(metrics_csv([
        "2,svc,1,0.5,0.4,100,80,30",
        "5,svc,2,0.6,0.5,200,160,60",
    ]))
    assert np.array_equal(m.vector("svc", 1), np.zeros(6))     # before first row
    assert m.vector("svc", 2)[0] == 1
    assert m.vector("svc", 4)[1] == pytest.approx(0.5)         # carried forward
    assert m.vector("svc", 9)[3] == pytest.approx(200)
    assert np.array_equal(m.vector("other", 5), np.zeros(6))   # unknown service


def test_metrics_header_must_match():
    with pytest.raises(MetricsParseError):
        load_service_metrics(metrics_csv([], header="window,service,pods"))


def test_metrics_rejects_non_numeric_with_row():
    # row numbers count the header line, matching editor line numbers
    with pytest.raises(MetricsParseError) as exc:
        load_service_metrics(metrics_csv([
            "1,svc,1,0.5,0.4,100,80,30",
            "2,svc,oops,0.5,0.4,100,80,30",
        ]))
    assert "row 3" in str(exc.value)


def test_metrics_ratio_range_checked():
    with pytest.raises(MetricsParseError):
        load_service_metrics(metrics_csv(["1,svc,1,1.5,0.4,100,80,30"]))


def test_metrics_duplicate_keeps_last():
    m = load_service_metrics(metrics_csv([
        "3,svc,1,0.5,0.4,100,80,30",
        "3,svc,9,0.9,0.8,900,800,300",
    ]))
    assert m.vector("svc", 3)[0] == 9
