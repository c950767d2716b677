import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shipfuse.fusemetrics import FIELDS, MetricReport, all_metrics, en, evaluate_fusion, parse_report, qabf, scd, sd, sf, vif


def scene(seed, n=48):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:n, :n]
    base = 100 + 60 * np.sin(xx / 5.0) * np.cos(yy / 7.0)
    return np.clip(base + rng.normal(0, 8, (n, n)), 0, 255)


def test_entropy_oracles():
    assert en(np.full((16, 16), 37.0)) == 0.0
    half = np.zeros((16, 16))
    half[:, 8:] = 255
    assert en(half) == pytest.approx(1.0, abs=1e-9)
    assert en(np.arange(256.0).reshape(16, 16)) == pytest.approx(8.0, abs=1e-9)


def test_sf_and_sd_oracles():
    assert sf(np.full((8, 8), 9.0)) == 0.0
    assert sf(np.array([[0.0, 1.0], [0.0, 1.0]])) == pytest.approx(math.sqrt(0.5), abs=1e-9)
    assert sd(np.array([[0.0, 255.0]])) == pytest.approx(127.5, abs=1e-9)


def test_identity_fusion():
    s = scene(0)
    assert vif(s, s, s) == pytest.approx(1.0, abs=1e-3)
    assert qabf(s, s, s) >= 0.99


def test_scd_oracles():
    a, b = scene(1), scene(2)
    assert scd(a, a, a) == 0.0  # degenerate differences carry no correlation
    # the midpoint makes both difference pairs exactly proportional
    assert scd((a + b) / 2, a, b) == pytest.approx(2.0, abs=1e-12)


def test_qabf_no_source_edges():
    c = np.full((16, 16), 80.0)
    assert qabf(scene(3, 16), c, c) == 0.0


def test_vif_drops_with_noise():
    s = scene(4)
    noisy = s + np.random.default_rng(0).normal(0, 60, s.shape)
    assert vif(noisy, s, s) < 0.5 < vif(s, s, s)


def test_shape_errors():
    with pytest.raises(ValueError):
        scd(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        en(np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_range_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 40))
    a, b = rng.uniform(0, 255, (n, n)), rng.uniform(0, 255, (n, n))
    w = rng.uniform()
    f = np.clip(w * a + (1 - w) * b + rng.normal(0, rng.uniform(0, 30), (n, n)), 0, 255)
    m = all_metrics(f, a, b)
    assert all(math.isfinite(v) for v in m.values())
    assert 0 <= m["EN"] <= 8 and m["SF"] >= 0 and 0 <= m["SD"] <= 127.5
    assert -2 <= m["SCD"] <= 2 and m["VIF"] >= 0 and 0 <= m["Qabf"] <= 1
    # every metric here is symmetric in the two sources
    swapped = all_metrics(f, b, a)
    for k in FIELDS:
        assert swapped[k] == pytest.approx(m[k], abs=1e-12)


def test_report_mean_and_roundtrip():
    triples = [(f"s{k}", scene(k) * 0.9, scene(k), scene(k + 10)) for k in range(3)]
    rep = evaluate_fusion(triples)
    for k in FIELDS:
        col = [r[k] for r in rep.rows]
        assert rep.mean[k] == float(np.mean(col))
    text = rep.as_text()
    lines = text.splitlines()
    assert lines[0].split("\t") == ["id", *FIELDS] and lines[-1].startswith("mean\t")
    back = parse_report(text)
    assert back.ids == rep.ids
    assert back.as_text() == text
    assert all(math.isnan(v) for v in MetricReport().mean.values())
    with pytest.raises(ValueError):
        parse_report("s0\t1\t2\n")
