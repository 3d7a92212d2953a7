import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoneforge.delineate import (RegionPartition, Stop, cluster_markets, commuter_ratio,
                                 commuting_similarity, definition_table, delineate, esc_stats,
                                 pre_aggregate, read_partition, temporal_consistency, write_partition)
from zoneforge.errors import NumericalError, ValidationError
from zoneforge.geo import GeoConfig, load_geography

IDS = ("A", "B", "C", "D")


def _hand(hand_dir):
    return load_geography(hand_dir, GeoConfig())


def _pair_partition():
    return RegionPartition.from_labels(IDS, [0, 0, 1, 1])


def test_commuter_ratio_hand(hand_dir):
    geo = _hand(hand_dir)
    assert commuter_ratio(_pair_partition(), geo.flows) == pytest.approx(100 * 2 / 247, abs=1e-12)
    single = RegionPartition.from_labels(IDS, [0, 0, 0, 0])
    assert commuter_ratio(single, geo.flows) == 0.0


def test_esc_hand(hand_dir):
    sc = esc_stats(_pair_partition(), _hand(hand_dir).flows)
    assert sc.esc.tolist() == pytest.approx([100 * 160 / 162, 100.0])
    assert sc.mean == pytest.approx((100 * 160 / 162 + 100) / 2)
    assert sc.sd == pytest.approx(np.std([100 * 160 / 162, 100.0], ddof=1))
    assert sc.min == pytest.approx(100 * 160 / 162) and sc.max == 100.0


def test_esc_weighted(hand_dir):
    sc = esc_stats(_pair_partition(), _hand(hand_dir).flows, weighted=True)
    assert sc.mean == pytest.approx((160 + 85) / 247 * 100)


def test_similarity_hand(hand_dir):
    ident = RegionPartition.from_labels(IDS, [0, 1, 2, 3], kind="regions")
    s = commuting_similarity(ident, _hand(hand_dir).flows).matrix.toarray()
    assert s[0, 1] == pytest.approx(30 / 62) and s[1, 0] == s[0, 1]
    assert s[1, 2] == pytest.approx(2 / 40)
    assert s[2, 3] == pytest.approx(15 / 40)
    assert s[0, 3] == 0 and np.all(np.diag(s) == 0)


def test_similarity_clamped_to_one():
    from scipy import sparse
    flows = sparse.csr_matrix(np.array([[1, 9], [9, 1]]))
    ident = RegionPartition.from_labels(("a", "b"), [0, 1])
    assert commuting_similarity(ident, flows).matrix[0, 1] == 1.0


def test_zero_rlf_region_warns():
    from scipy import sparse
    flows = sparse.csr_matrix(np.array([[5, 0, 0], [1, 4, 0], [0, 0, 0]]))
    ident = RegionPartition.from_labels(("a", "b", "c"), [0, 1, 2])
    sim = commuting_similarity(ident, flows)
    assert len(sim.warnings) == 1 and "zero resident" in sim.warnings[0]
    assert sim.matrix[2].nnz == 0


def test_two_stage_hand(hand_dir):
    geo = _hand(hand_dir)
    d = delineate(geo, 4, Stop(threshold=0.95))
    assert d.markets.labels.tolist() == [0, 0, 1, 1]
    heights = d.market_dendrogram.heights
    assert heights == pytest.approx([1 - 30 / 62, 1 - 15 / 40, (4 - 2 / 40) / 4])
    assert d.recut(Stop(count=1)).n_regions == 1
    assert d.recut(Stop(threshold=1.0)).n_regions == 1
    assert d.recut(Stop(count=4)).n_regions == 4


def test_stage1_respects_adjacency(hand_dir):
    regions, dendro = pre_aggregate(_hand(hand_dir), 2)
    assert regions.labels.tolist() == [0, 0, 1, 1]
    assert regions.region_ids == ("R001", "R002")
    with pytest.raises(NumericalError):
        pre_aggregate(_hand(hand_dir), 1)


def test_stop_validation():
    with pytest.raises(ValidationError):
        Stop()
    with pytest.raises(ValidationError):
        Stop(threshold=0.5, count=3)
    with pytest.raises(ValidationError):
        Stop(threshold=1.5)
    with pytest.raises(ValidationError):
        Stop(count=0)


def test_count_above_leaves_rejected(hand_dir):
    regions, _ = pre_aggregate(_hand(hand_dir), 2)
    sim = commuting_similarity(regions, _hand(hand_dir).flows)
    with pytest.raises(ValidationError):
        cluster_markets(sim, Stop(count=3))


def test_temporal_consistency_hand():
    p_t = RegionPartition.from_labels(IDS, [0, 0, 1, 1])
    p_t2 = RegionPartition.from_labels(IDS, [0, 0, 0, 1])
    c = temporal_consistency(p_t, p_t2)
    assert c.score == pytest.approx(1 / 3) and (c.n_used, c.n_excluded) == (3, 1)
    centers = temporal_consistency(p_t, p_t2, scope="centers", sizes=[100, 62, 40, 45])
    assert centers.score == pytest.approx(0.5) and (centers.n_used, centers.n_excluded) == (1, 1)
    assert temporal_consistency(p_t, p_t).score == 1.0


def test_temporal_consistency_weighted():
    p_t = RegionPartition.from_labels(IDS, [0, 0, 1, 1])
    p_t2 = RegionPartition.from_labels(IDS, [0, 0, 0, 1])
    w = np.array([1.0, 1.0, 3.0, 1.0])
    got = temporal_consistency(p_t, p_t2, weights=w).score
    assert got == pytest.approx(np.mean([1 / 4, 1 / 4, 0.0]))


def test_partition_roundtrip(tmp_path, hand_dir):
    d = delineate(_hand(hand_dir), 4, Stop(threshold=0.95))
    write_partition(tmp_path, d.markets, d.market_dendrogram, {"n": 2})
    back = read_partition(tmp_path / "partition.csv")
    assert back.mapping() == d.markets.mapping()
    assert (tmp_path / "dendrogram.csv").read_text().splitlines()[0] == "step,left,right,height"


def test_partition_rejects_empty_region():
    with pytest.raises(ValidationError):
        RegionPartition(("a", "b"), np.array([0, 0]), ("M1", "M2"))


def test_definition_table_matches_counts(default_world):
    geo = default_world.geo
    table = definition_table(geo, [360, 300], [0.9, 0.95, 0.98])
    first = table[table.stage1_regions == 360]
    second = table[table.stage1_regions == 300]
    assert first.n_markets.tolist() == second.n_markets.tolist()
    assert first.n_markets.is_monotonic_decreasing
    assert first.cr.is_monotonic_decreasing
    assert list(table.columns) == ["stage1_regions", "cut_off", "n_markets", "rlf_mean", "cr",
                                   "esc_mean", "esc_sd", "esc_min", "esc_max"]


labels_strategy = st.lists(st.integers(0, 5), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(labels_strategy, st.data())
def test_compose_is_coarsening(labels, data):
    ids = tuple(f"m{i}" for i in range(len(labels)))
    lower = RegionPartition.from_labels(ids, labels)
    upper_labels = data.draw(st.lists(st.integers(0, 3), min_size=lower.n_regions, max_size=lower.n_regions))
    upper = RegionPartition.from_labels(lower.region_ids, upper_labels)
    composed = lower.compose(upper)
    assert composed.is_coarsening_of(lower)
    assert composed.n_regions == upper.n_regions
    # first-appearance labelling
    seen = []
    for k in composed.labels.tolist():
        if k not in seen:
            seen.append(k)
    assert seen == list(range(composed.n_regions))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_threshold_cut_nested(seed):
    from oracles import random_instance
    from zoneforge.delineate import cut
    from zoneforge.linkage import average_linkage
    from scipy import sparse

    _, _, s, _ = random_instance(np.random.default_rng(seed))
    dendro = average_linkage(sparse.csr_matrix(s))
    prev = None
    for c in (0.3, 0.6, 0.9, 1.0):
        part = RegionPartition.from_labels(tuple(range(s.shape[0])), cut(dendro, Stop(threshold=c)))
        if prev is not None:
            assert part.is_coarsening_of(prev)
            assert part.n_regions <= prev.n_regions
        prev = part
