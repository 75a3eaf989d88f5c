import json
import math

import numpy as np
import pytest

import dtmamba


def test_discretize_matches_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        lam, step = -rng.uniform(0.01, 5.0), rng.uniform(1e-4, 5.0)
        a_bar, b_bar = dtmamba.discretize(lam, step)
        assert a_bar == pytest.approx(math.exp(lam * step), abs=1e-15)
        assert b_bar == pytest.approx((math.exp(lam * step) - 1) / lam, abs=1e-14)
    with pytest.raises(dtmamba.Error):
        dtmamba.discretize(0.0, 1.0)


def test_time_aware_step():
    assert dtmamba.time_aware_step(0.5, 24.0, 0.5) == pytest.approx(0.5 * (1 + 0.5 * 2))


def scan_oracle(tokens, gaps, a_log, w_proj, b_proj, gamma):
    d, length = tokens.shape
    n = a_log.shape[1]
    lam = -np.exp(a_log)
    x = np.zeros((d, n))
    y = np.zeros((d, length))
    for i in range(length):
        z = w_proj @ tokens[:, i] + b_proj
        delta = np.log1p(np.exp(z[:d])) * (1 + gamma * gaps[i] / 12.0)
        b, c = z[d : d + n], z[d + n :]
        a_bar = np.exp(lam * delta[:, None])
        x = a_bar * x + (a_bar - 1) / lam * b[None, :] * tokens[:, i, None]
        y[:, i] = x @ c
    return y


def test_selective_scan_against_numpy():
    rng = np.random.default_rng(1)
    d, n, length = 3, 2, 9
    tokens = rng.normal(size=(d, length))
    gaps = [0.0, 0, 0, 24, 0, 0, 12, 0, 0]
    a_log = rng.normal(scale=0.5, size=(d, n))
    w_proj = rng.normal(scale=0.5, size=(d + 2 * n, d))
    b_proj = rng.normal(scale=0.5, size=d + 2 * n)
    y = dtmamba.selective_scan(tokens, gaps, [1] * length, a_log, w_proj, b_proj, 0.4)
    gamma = 1 / (1 + math.exp(-0.4))
    np.testing.assert_allclose(y, scan_oracle(tokens, gaps, a_log, w_proj, b_proj, gamma),
                               atol=1e-12)
    blind = dtmamba.selective_scan(tokens, gaps, [1] * length, a_log, w_proj, b_proj, 0.4,
                                   time_aware=False)
    np.testing.assert_allclose(blind, scan_oracle(tokens, gaps, a_log, w_proj, b_proj, 0.0),
                               atol=1e-12)


def test_fuse_identity_and_average():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    kernels = dtmamba.clamp_kernels(3)
    assert kernels == [(1, 3, 3), (3, 3, 3)]
    centers = []
    for kt, kh, kw in kernels:
        f = np.zeros((2, kt, kh, kw))
        f[:, kt // 2, kh // 2, kw // 2] = 1.0
        centers.append(f)
    np.testing.assert_allclose(dtmamba.fuse(x, centers, np.array([2.0, -1.0])), x, atol=1e-15)
    ones = [np.ones((2, 1, 3, 3)), np.zeros((2, 3, 3, 3))]
    out = dtmamba.fuse(x, ones, np.zeros(2))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    box = sum(padded[:, :, i : i + 4, j : j + 4] for i in range(3) for j in range(3))
    np.testing.assert_allclose(out, 0.5 * box, atol=1e-12)


def test_risk_head_monotone_and_loss():
    rng = np.random.default_rng(3)
    w, b = rng.normal(size=(6, 4)), rng.normal(size=6)
    r = dtmamba.risk_head(list(rng.normal(size=4)), w, b)
    p = r["probabilities"]
    assert all(p[k] <= p[k + 1] for k in range(4))
    z = list(rng.normal(size=4))
    assert dtmamba.hazard_loss(z, w, b, False, 6.0) is None
    probs = dtmamba.risk_head(z, w, b)["probabilities"]
    expected = -math.log(1 - probs[0]) - math.log(1 - probs[1])
    assert dtmamba.hazard_loss(z, w, b, False, 30.0) == pytest.approx(expected, rel=1e-12)
    assert dtmamba.horizon_label(True, 12.0, 1) is True
    assert dtmamba.horizon_label(False, 20.0, 2) is None


def test_metrics_against_pair_counting():
    rng = np.random.default_rng(4)
    scores = list(rng.integers(0, 5, size=25) / 4)
    events = list(rng.random(25) < 0.5)
    times = list(rng.integers(1, 70, size=25).astype(float))
    num = den = 0.0
    for i in range(25):
        if not events[i]:
            continue
        for j in range(25):
            if times[i] < times[j]:
                den += 1
                num += 1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0
    assert dtmamba.c_index(scores, events, times) == num / den
    with pytest.raises(dtmamba.UndefinedMetricError):
        dtmamba.auc_at([0.1, 0.2], [False, False], [80.0, 80.0], 1)


def test_generate_and_counts(tmp_path):
    spec = json.loads(dtmamba.default_spec())
    spec.update(patients=40, kind="features", feature_channels=4, image_size=16, patch=8)
    summary = dtmamba.generate(json.dumps(spec), str(tmp_path / "data"))
    assert summary["patients"] == 40
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert len(manifest["patients"]) == 40
    with pytest.raises(dtmamba.ConfigError):
        dtmamba.generate('{"colour": 1}', str(tmp_path / "bad"))

    cfg = json.dumps({"model": {"channels": 2, "state_size": 2, "visits": 3, "layers": 1,
                                "precomputed_features": True}})
    assert dtmamba.count_params(cfg)["block"] == 99
    assert dtmamba.count_flops(cfg, 200) == 2 * dtmamba.count_flops(cfg, 100)
