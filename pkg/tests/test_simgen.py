import json

import numpy as np
import pytest

from zoneforge.delineate import Stop, delineate
from zoneforge.errors import ValidationError
from zoneforge.panel import BASE_COUNTS, count_spells
from zoneforge.simgen import (STREAM, DGPConfig, demo_config, gen_geography, gen_market_panel,
                              gen_micro_panel, stream, truth_record, write_truth)


def _tiny(seed=4):
    return DGPConfig(seed=seed, n_municipalities=40, n_cities=4, side_km=40.0, rlf_mean=30.0,
                     rlf_sigma=0.3, rlf_min=10, n_agencies=6, reform_merges=1)


@pytest.fixture(scope="module")
def tiny():
    cfg = _tiny()
    geo = gen_geography(cfg)
    return cfg, geo, delineate(geo, 24, Stop(threshold=0.95)).markets


def test_geography_deterministic():
    a, b = gen_geography(_tiny()), gen_geography(_tiny())
    assert a.ids == b.ids and (a.flows != b.flows).nnz == 0
    assert np.array_equal(a.rlf, b.rlf)
    assert (gen_geography(_tiny(5)).flows != a.flows).nnz > 0


def test_geography_shape(tiny):
    cfg, geo, _ = tiny
    assert geo.n == 40 and geo.rlf.min() >= cfg.rlf_min
    assert np.array_equal(np.asarray(geo.flows.sum(axis=1)).ravel(), geo.rlf)
    segs = geo.timeline.segments
    assert len(segs) == 2 and len(set(segs[1].agency)) == len(set(segs[0].agency)) - 1


def test_streams_independent():
    assert sorted(STREAM.values()) == [1, 2, 3, 4]
    a = stream(1, "panel").normal(size=3)
    assert np.array_equal(a, stream(1, "panel").normal(size=3))
    assert not np.array_equal(a, stream(1, "micro").normal(size=3))
    assert not np.array_equal(stream(1, "panel", 0).normal(size=3), stream(1, "panel", 1).normal(size=3))


def test_truth_record(tmp_path):
    t = truth_record(DGPConfig())
    assert t.theta == 0.6 and t.q == 6
    assert t.long_run["training"] == pytest.approx(-0.1)
    assert t.long_run["short_measure"] == 0.0
    assert t.long_run["wage_subsidy"] == pytest.approx(sum(DGPConfig().phi["wage_subsidy"]) / 0.4)
    write_truth(t, tmp_path / "truth.json")
    assert json.loads((tmp_path / "truth.json").read_text())["long_run"] == t.long_run


def test_market_panel_replicates(tiny):
    cfg, geo, part = tiny
    a, _, la = gen_market_panel(geo, part, cfg, replicate=0)
    b, _, lb = gen_market_panel(geo, part, cfg, replicate=0)
    c, _, _ = gen_market_panel(geo, part, cfg, replicate=1)
    assert a.equals(b) and np.array_equal(la.y, lb.y)
    assert not a.equals(c)
    # every municipality-quarter is accounted for
    rlf = a.col("rlf")
    assert np.all(rlf == geo.rlf[:, None])
    parts = sum(a.col(k) for k in ("ui", "unsub", "sub", "welfare", "eob", "out"))
    assert np.all(parts <= rlf)


def test_micro_aggregates_to_cube(tiny):
    cfg, geo, part = tiny
    micro, truth, cube = gen_micro_panel(geo, part, cfg)
    assert len(micro) == geo.rlf.sum() * (cube.stop - cube.start)
    back = count_spells(micro, geo.ids, (cube.start, cube.stop))
    for c in BASE_COUNTS:
        assert np.array_equal(back.col(c), cube.col(c)), c
    assert truth.long_run == truth_record(cfg).long_run


@pytest.mark.parametrize("override, match", [({"theta": 1.0}, "explosive"), ({"theta": -1.2}, "explosive"),
                                             ({"phi": {"training": [0.1]}}, "phi"),
                                             ({"n_agencies": 0}, "n_agencies")])
def test_invalid_config(override, match):
    with pytest.raises(ValidationError, match=match):
        gen_geography(DGPConfig(**override))


def test_config_dict_roundtrip():
    cfg = demo_config(3)
    assert DGPConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        DGPConfig.from_dict({"bogus": 1})
