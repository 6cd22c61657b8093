"""Batch planning, matcher semantics, batch labeling, and derived-file IO."""

from __future__ import annotations

import io
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faacflow.errors import ConfigError, DataError
from faacflow.faac import (
    DerivedDataset,
    FaacConfig,
    FeatureSpec,
    Matcher,
    derive_dataset,
    load_faac_config,
    plan_batches,
    read_derived,
    write_derived,
)
from faacflow.ingest import CanonicalTaxonomy, FlowRecord

from oracles import batch_label_recount

TAX = CanonicalTaxonomy(classes=("Background", "DoS", "PortScanning"))


def rec(label="Background", origin="src", **values):
    return FlowRecord(values=values, label=label, origin=origin)


def small_config(priority=("DoS",)):
    # port deliberately carries a token group overlaying the range partition,
    # so one value can hit two features of the same variable
    feats = (
        FeatureSpec("proto_tcp", "proto", Matcher(kind="equals", tokens=("tcp",))),
        FeatureSpec("proto_udp", "proto", Matcher(kind="equals", tokens=("udp",))),
        FeatureSpec("proto_other", "proto", Matcher(kind="catch_all")),
        FeatureSpec("port_low", "port", Matcher(kind="numeric_range", lo=0, hi=1024)),
        FeatureSpec("port_high", "port", Matcher(kind="numeric_range", lo=1024, hi=65536)),
        FeatureSpec("port_web", "port", Matcher(kind="in_set", tokens=(80, 443))),
        FeatureSpec("port_missing", "port", Matcher(kind="missing")),
    )
    return FaacConfig(features=feats, taxonomy=TAX, class_priority=priority)


def one_batch(records, config=None):
    """Derive with the whole record list as a single batch; return the row."""
    ds = derive_dataset(records, 1, config or small_config())
    assert ds.n_rows == 1
    return dict(zip(ds.feature_names, ds.X[0])), ds.label_names()[0]


# ---------------------------------------------------------------------------
# Batch planning


def test_plan_batches_fixes_size_by_integer_division():
    plan = plan_batches(2_540_044, 10_000)
    assert plan.batch_size == 254
    assert plan.full_batches == 10_000
    assert plan.dropped_records == 44

    plan = plan_batches(2_540_044, 20_000)
    assert plan.batch_size == 127
    assert plan.full_batches == 20_000
    assert plan.dropped_records == 44


def test_plan_batches_rejects_degenerate_inputs():
    with pytest.raises(ConfigError):
        plan_batches(100, 0)
    with pytest.raises(DataError):
        plan_batches(0, 10)
    with pytest.raises(DataError, match="batch size would be zero"):
        plan_batches(5, 10)


@given(n=st.integers(min_value=1, max_value=10**9), m=st.integers(min_value=1, max_value=10**6))
def test_plan_batches_matches_integer_division(n, m):
    if n < m:
        with pytest.raises(DataError):
            plan_batches(n, m)
        return
    plan = plan_batches(n, m)
    assert plan.batch_size == n // m
    assert plan.full_batches == n // (n // m)
    assert plan.full_batches >= m
    assert 0 <= plan.dropped_records < plan.batch_size


# ---------------------------------------------------------------------------
# Matcher and variable validation


def test_matcher_constructor_contracts():
    with pytest.raises(ConfigError):
        Matcher(kind="sometimes")
    with pytest.raises(ConfigError):
        Matcher(kind="equals", tokens=())
    with pytest.raises(ConfigError):
        Matcher(kind="in_set", tokens=())
    with pytest.raises(ConfigError):
        Matcher(kind="numeric_range", lo=5, hi=5)
    with pytest.raises(ConfigError):
        Matcher(kind="numeric_range", lo=float("nan"), hi=1)


def _cfg(*feats):
    return FaacConfig(features=feats, taxonomy=TAX)


def test_token_token_overlap_is_rejected():
    with pytest.raises(ConfigError, match="share tokens"):
        _cfg(
            FeatureSpec("a", "v", Matcher(kind="in_set", tokens=(80, 443))),
            FeatureSpec("b", "v", Matcher(kind="equals", tokens=("80",))),
        )


def test_range_range_overlap_is_rejected_unless_allowed():
    with pytest.raises(ConfigError, match="overlap"):
        _cfg(
            FeatureSpec("a", "v", Matcher(kind="numeric_range", lo=0, hi=10)),
            FeatureSpec("b", "v", Matcher(kind="numeric_range", lo=5, hi=20)),
        )
    _cfg(
        FeatureSpec("a", "v", Matcher(kind="numeric_range", lo=0, hi=10)),
        FeatureSpec("b", "v", Matcher(kind="numeric_range", lo=5, hi=20, allow_overlap=True)),
    )


def test_token_over_range_overlay_is_allowed():
    _cfg(
        FeatureSpec("a", "v", Matcher(kind="numeric_range", lo=0, hi=1024)),
        FeatureSpec("b", "v", Matcher(kind="in_set", tokens=(80,))),
    )


def test_duplicate_missing_or_catch_all_rejected():
    with pytest.raises(ConfigError, match="missing"):
        _cfg(
            FeatureSpec("a", "v", Matcher(kind="missing")),
            FeatureSpec("b", "v", Matcher(kind="missing")),
        )
    with pytest.raises(ConfigError, match="catch_all"):
        _cfg(
            FeatureSpec("a", "v", Matcher(kind="catch_all")),
            FeatureSpec("b", "v", Matcher(kind="catch_all")),
        )


def test_duplicate_feature_names_rejected():
    with pytest.raises(ConfigError, match="duplicate feature names"):
        _cfg(
            FeatureSpec("a", "v", Matcher(kind="equals", tokens=("x",))),
            FeatureSpec("a", "w", Matcher(kind="equals", tokens=("y",))),
        )


def test_class_priority_must_name_attacks():
    feats = (FeatureSpec("a", "v", Matcher(kind="catch_all")),)
    with pytest.raises(ConfigError):
        FaacConfig(features=feats, taxonomy=TAX, class_priority=("Background",))
    cfg = FaacConfig(features=feats, taxonomy=TAX, class_priority=("PortScanning",))
    assert cfg.full_priority() == ("PortScanning", "DoS")


# ---------------------------------------------------------------------------
# Counting semantics


def test_value_may_hit_token_and_range_features():
    counts, _ = one_batch([rec(proto="tcp", port=80.0)])
    assert counts["port_low"] == 1.0
    assert counts["port_web"] == 1.0
    assert counts["port_high"] == 0.0
    assert counts["proto_tcp"] == 1.0


def test_string_token_matches_numeric_range_and_token_set():
    counts, _ = one_batch([rec(proto="udp", port="80")])
    assert counts["port_low"] == 1.0
    assert counts["port_web"] == 1.0


def test_missing_counts_only_into_missing_feature():
    counts, _ = one_batch([rec(proto="tcp", port=None)])
    assert counts["port_missing"] == 1.0
    assert counts["port_low"] == counts["port_high"] == counts["port_web"] == 0.0
    # proto has no missing matcher: a missing proto counts nowhere
    counts, _ = one_batch([rec(proto=None, port=80.0)])
    assert counts["proto_tcp"] == counts["proto_udp"] == counts["proto_other"] == 0.0


def test_catch_all_takes_only_unclaimed_present_values():
    counts, _ = one_batch([rec(proto="gre", port=99999.0)])
    assert counts["proto_other"] == 1.0
    # port 99999 escapes both ranges and the token set
    assert counts["port_missing"] == 0.0
    assert counts["port_low"] == counts["port_high"] == counts["port_web"] == 0.0


def test_counters_are_batch_fractions():
    records = [rec(proto="tcp", port=80.0), rec(proto="udp", port=53.0), rec(proto="tcp", port=2048.0)]
    counts, _ = one_batch(records)
    assert counts["proto_tcp"] == pytest.approx(2 / 3)
    assert counts["port_low"] == pytest.approx(2 / 3)
    assert counts["port_web"] == pytest.approx(1 / 3)
    assert counts["port_high"] == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# Batch labels


def test_clean_batch_is_background():
    _, label = one_batch([rec(), rec(), rec()])
    assert label == "Background"


def test_single_attack_record_flips_the_label():
    _, label = one_batch([rec(), rec(), rec(label="PortScanning")])
    assert label == "PortScanning"


def test_attack_count_tie_resolved_by_priority():
    batch = [rec(label="DoS"), rec(label="PortScanning"), rec()]
    _, label = one_batch(batch, small_config(priority=("DoS", "PortScanning")))
    assert label == "DoS"
    _, label = one_batch(batch, small_config(priority=("PortScanning", "DoS")))
    assert label == "PortScanning"


def test_majority_attack_wins_over_priority():
    batch = [rec(label="DoS"), rec(label="PortScanning"), rec(label="PortScanning")]
    _, label = one_batch(batch, small_config(priority=("DoS", "PortScanning")))
    assert label == "PortScanning"


@settings(max_examples=200, deadline=None)
@given(
    counts=st.tuples(
        st.integers(min_value=0, max_value=6),
        st.integers(min_value=0, max_value=6),
        st.integers(min_value=1, max_value=6),
    )
)
def test_label_matches_brute_force_recount(counts):
    n_dos, n_scan, n_bg = counts
    batch = (
        [rec(label="DoS", proto="tcp", port=80.0)] * n_dos
        + [rec(label="PortScanning", proto="udp", port=1.0)] * n_scan
        + [rec(proto="tcp", port=443.0)] * n_bg
    )
    cfg = small_config(priority=("DoS", "PortScanning"))
    counts_row, label = one_batch(batch, cfg)
    labels = [r.label for r in batch]
    assert label == batch_label_recount(labels, TAX.classes, cfg.full_priority())
    assert all(0.0 <= v <= 1.0 for v in counts_row.values())
    # proto features partition every present value
    proto_sum = counts_row["proto_tcp"] + counts_row["proto_udp"] + counts_row["proto_other"]
    assert proto_sum == pytest.approx(1.0, abs=1e-12)


def test_mixed_origin_batch_is_rejected():
    records = [rec(origin="a", proto="tcp", port=80.0), rec(origin="b", proto="tcp", port=80.0)]
    with pytest.raises(DataError, match="mixes origins"):
        derive_dataset(records, 1, small_config())


# ---------------------------------------------------------------------------
# Dataset derivation


def test_derive_drops_the_tail():
    records = [rec(proto="tcp", port=float(i)) for i in range(10)]
    ds = derive_dataset(records, 3, small_config())
    assert ds.n_rows == 3
    assert list(ds.batch_sizes) == [3, 3, 3]


def test_derive_declared_count_must_be_met():
    records = [rec(proto="tcp", port=1.0) for _ in range(7)]
    with pytest.raises(DataError, match="were declared"):
        derive_dataset(iter(records), 5, small_config(), n_records=10)


def test_derive_streams_with_bounded_memory():
    cfg = small_config()
    n = 200_000

    def stream():
        for i in range(n):
            yield rec(proto="tcp" if i % 3 else "udp", port=float(i % 70_000))

    tracemalloc.start()
    ds = derive_dataset(stream(), 2_000, cfg, n_records=n)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    assert ds.n_rows == 2_000
    # materializing the stream would need dozens of MB; one batch plus the
    # output matrix stays far below that
    assert peak < 25 * 1024 * 1024


# ---------------------------------------------------------------------------
# Derived-file round trip


def make_derived():
    records = (
        [rec(label="DoS", proto="tcp", port=80.0)] * 4
        + [rec(proto="udp", port=53.0)] * 8
        + [rec(label="PortScanning", proto="tcp", port=22.0)] * 4
    )
    return derive_dataset(records, 4, small_config())


def test_derived_round_trip_with_taxonomy():
    ds = make_derived()
    buf = io.StringIO()
    write_derived(ds, buf)
    buf.seek(0)
    back = read_derived(buf, taxonomy=TAX)
    assert back.feature_names == ds.feature_names
    assert back.classes == ds.classes
    assert np.array_equal(back.y, ds.y)
    assert back.origins == ds.origins
    assert np.array_equal(back.batch_sizes, ds.batch_sizes)
    assert np.allclose(back.X, ds.X, atol=1e-9)


def test_read_without_taxonomy_puts_background_first():
    ds = make_derived()
    buf = io.StringIO()
    write_derived(ds, buf)
    buf.seek(0)
    back = read_derived(buf)
    assert back.classes[0] == "Background"
    assert set(back.classes) == set(ds.label_names())
    assert back.label_names() == ds.label_names()


def test_read_derived_rejects_empty_and_malformed():
    with pytest.raises(DataError, match="empty"):
        read_derived(io.StringIO(""))
    with pytest.raises(DataError, match="header"):
        read_derived(io.StringIO("a,b,c\n1,2,3\n"))


def test_derived_dataset_validation():
    base = make_derived()
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        DerivedDataset(
            feature_names=base.feature_names,
            X=base.X + 2.0,
            y=base.y,
            classes=base.classes,
            origins=base.origins,
            batch_sizes=base.batch_sizes,
        )
    with pytest.raises(DataError, match="metadata"):
        DerivedDataset(
            feature_names=base.feature_names,
            X=base.X,
            y=base.y[:-1],
            classes=base.classes,
            origins=base.origins,
            batch_sizes=base.batch_sizes,
        )


def test_take_subsets_rows():
    ds = make_derived()
    sub = ds.take(np.array([0, 2]))
    assert sub.n_rows == 2
    assert sub.label_names() == (ds.label_names()[0], ds.label_names()[2])
    assert np.array_equal(sub.X, ds.X[[0, 2]])


# ---------------------------------------------------------------------------
# Reference configuration


def test_reference_config_loads(config_dir):
    cfg = load_faac_config(config_dir / "faac_reference.yaml")
    assert len(cfg.features) == 32
    assert len(set(cfg.feature_names)) == 32
    assert cfg.taxonomy.classes == ("Background", "DoS", "PortScanning")
    assert cfg.full_priority() == ("DoS", "PortScanning")
    assert cfg.aliases["sport"] == "src_port"
    assert cfg.aliases["protocol_type"] == "proto"
