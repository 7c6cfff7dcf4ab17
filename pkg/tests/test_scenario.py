"""Synthetic scenario generation: thinning identities, layout and splits."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtse.scenario import (
    Dataset,
    ScenarioConfig,
    ScenarioError,
    generate,
    sample_fleet,
    split,
    split_sizes,
)

HOURS = 10.0 / 3600.0


def exact_config(**kw) -> ScenarioConfig:
    base = dict(horizon=200, penetration=[1.0], loop_noise=0.0, speed_noise=0.0, density_noise=0.0, seed=3)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def exact():
    cfg = exact_config()
    net = cfg.validate()
    return net, generate(cfg, net)


class TestGenerate:
    def test_full_penetration_speed_is_q_over_k(self, exact):
        net, ds = exact
        n = net.n_cells
        k, q = ds.labels[:, :n], ds.labels[:, n:]
        mask = ds.guest_mask[0]
        speed = ds.u_guest[0][:, :n]
        assert mask.any()
        np.testing.assert_allclose(speed[mask], (q / np.maximum(k, 1e-6))[mask], rtol=1e-9)

    def test_full_penetration_density_is_exact(self, exact):
        net, ds = exact
        n = net.n_cells
        np.testing.assert_allclose(ds.u_guest[0][:, n:], ds.labels[:, :n], rtol=1e-9, atol=1e-12)

    def test_features_reconstruct_aggregates(self, exact):
        net, ds = exact
        n = net.n_cells
        last = ds.x_guest[0][:, -2 * n :]  # newest step of the window
        k, q = ds.labels[:, :n], ds.labels[:, n:]
        np.testing.assert_allclose(last[:, :n], k * net.dx * HOURS, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(last[:, n:], q * net.dx * HOURS, rtol=1e-9, atol=1e-12)

    def test_empty_cells_are_not_covered(self):
        cfg = exact_config(demand={"segments": {}}, process_noise=0.0)
        ds = generate(cfg)
        assert not ds.guest_mask[0].any()
        assert np.all(ds.u_guest[0] == 0.0)

    def test_host_features_cover_detectors_only(self, exact):
        net, ds = exact
        assert ds.x_host.shape[1] == ds.history * len(ds.detector_index)
        counts = ds.x_host[:, -len(ds.detector_index) :]
        flows = ds.labels[:, net.n_cells + ds.detector_index]
        np.testing.assert_allclose(counts, flows * HOURS, rtol=1e-9)

    def test_shapes(self, exact):
        net, ds = exact
        assert ds.labels.shape == (len(ds), 2 * net.n_cells)
        assert ds.x_guest[0].shape == (len(ds), ds.history * 2 * net.n_cells)
        assert ds.u_host.shape == (len(ds), len(ds.detector_index))
        assert len(ds) == 200 - ds.history + 1

    def test_byte_identical_files(self, tmp_path):
        cfg = ScenarioConfig(horizon=120, penetration=[0.3, 0.5], seed=11)
        generate(cfg).save_jsonl(tmp_path / "a.jsonl")
        generate(cfg).save_jsonl(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_jsonl_round_trip(self, tmp_path):
        cfg = ScenarioConfig(horizon=120, penetration=[0.3, 0.5], seed=11)
        ds = generate(cfg)
        ds.save_jsonl(tmp_path / "d.jsonl")
        back = Dataset.load_jsonl(tmp_path / "d.jsonl", json.loads(json.dumps(ds.meta())))
        for name in ("t", "x_host", "labels", "u_host", "demand"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
        for a, b in zip(back.guest_mask, ds.guest_mask):
            np.testing.assert_array_equal(a, b)
        rec = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
        assert {"t", "x_host", "x_guest_1", "x_guest_2", "labels", "u_host", "u_guest_1", "mask_2"} <= set(rec)

    def test_seed_changes_data(self):
        a = generate(ScenarioConfig(horizon=80, seed=1))
        b = generate(ScenarioConfig(horizon=80, seed=2))
        assert not np.array_equal(a.x_guest[0], b.x_guest[0])


class TestThinning:
    def test_density_measurement_unbiased(self):
        k = np.array([[3.0, 25.0, 80.0]])
        q = k * 40.0
        dx = np.array([0.15, 0.15, 0.15])
        est = np.array([sample_fleet(k, q, dx, 10.0, 0.2, np.random.default_rng(s)).density[0] for s in range(1000)])
        se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        assert np.all(np.abs(est.mean(axis=0) - k[0]) <= 3 * se)

    def test_noise_free_speed_at_partial_penetration(self):
        k = np.full((50, 4), 30.0)
        q = k * np.array([10.0, 20.0, 30.0, 45.0])
        fl = sample_fleet(k, q, np.full(4, 0.15), 10.0, 0.3, np.random.default_rng(0))
        has = ~np.isnan(fl.speed)
        np.testing.assert_allclose(fl.speed[has], (q / k)[has], rtol=1e-12)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"penetration": [0.0]},
            {"penetration": [1.5]},
            {"history": 0},
            {"horizon": 5, "history": 9},
            {"detector_cells": ["nope"]},
            {"detector_cells": []},
            {"loop_noise": -1.0},
            {"dt_s": 5.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ScenarioError):
            ScenarioConfig(**kw).validate()

    def test_missing_network_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="not found"):
            ScenarioConfig(network=str(tmp_path / "missing.json")).validate()

    def test_unknown_keys(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig.from_dict({"horizn": 10})

    def test_digest_stable(self):
        a = ScenarioConfig(seed=4)
        assert a.digest() == ScenarioConfig.from_dict(a.to_dict()).digest()
        assert a.digest() != ScenarioConfig(seed=5).digest()


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(1000, (700, 100, 200)), (40, (28, 4, 8))])
    def test_sizes(self, n, sizes):
        assert split_sizes(n) == sizes

    def test_too_short(self):
        with pytest.raises(ScenarioError, match="too short"):
            split_sizes(39)

    @given(st.integers(40, 100_000))
    def test_partition(self, n):
        tr, va, te = split_sizes(n)
        assert tr + va + te == n and min(tr, va, te) > 0
        assert abs(te - 0.2 * n) <= 0.5 and abs(va - 0.1 * n) <= 0.5

    def test_contiguous_chronological(self):
        ds = generate(ScenarioConfig(horizon=120))
        tr, va, te = split(ds)
        assert tr.t[-1] < va.t[0] and va.t[-1] < te.t[0]
        assert len(tr) + len(va) + len(te) == len(ds)
