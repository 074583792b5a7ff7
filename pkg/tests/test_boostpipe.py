import json

import numpy as np
import pytest
import torch

from tcmgan.boostpipe import (
    BoostConfig,
    Condition,
    CountingGenerator,
    build_boost_dataset,
    evaluate_boost,
    ordering_check,
    run_boost,
    slice_dice,
    synthesize_missing,
    train_boost_segmentor,
)
from tcmgan.datapipe import PhantomConfig, build_slice_set, make_phantom_dataset
from tcmgan.errors import ConfigError, DataLeakError, EmptyDataset
from tcmgan.metrics import aggregate, read_report
from tcmgan.nets import ArchConfig, init_params

ARCH = ArchConfig(base_width=4, depth=2)


@pytest.fixture(scope="module")
def slices():
    subs = make_phantom_dataset(PhantomConfig(image_size=16, n_subjects=4, slices_per_subject=4,
                                              tumor_radius_range=(2, 4), seed=3))
    return build_slice_set(subs, out_size=16, threshold=10)


@pytest.fixture(scope="module")
def G():
    return init_params(ARCH, "generator")


def test_synthesize_missing_shapes_and_determinism(slices, G):
    out = synthesize_missing(G, slices.source)
    assert len(out) == 3
    assert all(o.shape == slices.source.shape for o in out)
    assert all(o.min() >= -1 and o.max() <= 1 for o in out)
    again = synthesize_missing(G, slices.source)
    assert all(np.array_equal(a, b) for a, b in zip(out, again))


@pytest.mark.parametrize("cond", ["only_t2", "all_real"])
def test_baselines_never_call_generator(slices, G, cond):
    counter = CountingGenerator(G)
    data = build_boost_dataset(slices, cond, counter)
    assert counter.calls == 0
    assert data.inputs.shape == (len(slices), 4, 16, 16)
    np.testing.assert_array_equal(data.inputs[:, :1], slices.source)


def test_only_t2_zeroes_missing_channels(slices):
    data = build_boost_dataset(slices, "only_t2")
    assert not data.inputs[:, 1:].any()
    single = build_boost_dataset(slices, "only_t2", single_channel=True)
    assert single.inputs.shape[1] == 1


def test_all_real_channel_order(slices):
    data = build_boost_dataset(slices, Condition.ALL_REAL)
    np.testing.assert_array_equal(data.inputs[:, 1:], slices.targets)


def test_synth_condition_replaces_channels(slices, G):
    counter = CountingGenerator(G)
    data = build_boost_dataset(slices, "synth_tcmgan", counter)
    assert counter.calls > 0
    assert np.abs(data.inputs[:, 1:] - slices.targets).mean() > 0
    np.testing.assert_array_equal(data.inputs[:, :1], slices.source)


def test_synth_needs_generator(slices):
    with pytest.raises(ConfigError):
        build_boost_dataset(slices, "synth_mgan")


def test_leak_detected(slices, G):
    with pytest.raises(DataLeakError):
        build_boost_dataset(slices, "all_real", gan_train_ids=[slices.subject_ids[0]])


def test_unknown_condition(slices):
    with pytest.raises(ConfigError):
        build_boost_dataset(slices, "synth_cyclegan")


def test_train_boost_segmentor_trace(slices):
    data = build_boost_dataset(slices, "all_real")
    cfg = BoostConfig(epochs=6, batch_size=8, seed=1)
    _, trace = train_boost_segmentor(data, cfg, ARCH)
    assert len(trace) == 6
    assert trace[-1] < trace[0]
    _, trace2 = train_boost_segmentor(data, cfg, ARCH)
    assert np.allclose(trace, trace2, atol=1e-6, rtol=0)


def test_train_boost_empty(slices):
    data = build_boost_dataset(slices, "all_real")
    data.inputs = data.inputs[:0]
    with pytest.raises(EmptyDataset):
        train_boost_segmentor(data, BoostConfig(epochs=1), ARCH)


class _Oracle(torch.nn.Module):
    def __init__(self, gt, fn):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.gt, self.fn, self.seen = gt, fn, 0

    def forward(self, x):
        out = self.fn(torch.from_numpy(self.gt[self.seen:self.seen + x.shape[0]]).float())
        self.seen += x.shape[0]
        return out


def test_oracle_segmentors(slices):
    data = build_boost_dataset(slices, "all_real")
    perfect = _Oracle(data.gt, lambda g: g)
    assert np.all(slice_dice(perfect, data) == 1.0)
    empty = _Oracle(data.gt, torch.zeros_like)
    d = slice_dice(empty, data)
    has_tumor = data.gt.reshape(len(data), -1).any(1)
    assert np.all(d[has_tumor] == 0.0)


def test_threshold_invariance_under_monotone_recalibration(slices):
    data = build_boost_dataset(slices, "all_real")
    S = init_params(ARCH, "boost_segmentor")
    base = slice_dice(S, data)

    class Recal(torch.nn.Module):
        def __init__(self, net):
            super().__init__()
            self.net = net

        def forward(self, x):
            p = self.net(x)
            # strictly monotone, fixes 0.5
            return 0.5 + torch.sign(p - 0.5) * torch.abs(2 * (p - 0.5)) ** 0.3 / 2

    np.testing.assert_array_equal(slice_dice(Recal(S), data), base)


def test_evaluate_boost_subject_level(slices):
    S = init_params(ARCH, "boost_segmentor")
    recs = evaluate_boost(S, slices, "only_t2")
    assert sorted(r["subject"] for r in recs) == slices.subjects
    assert all(0 <= r["dice"] <= 1 for r in recs)


def test_ordering_check_flags_near_ties():
    recs = [{"method": m, "dice": v} for m, v in
            [("all_real", 0.9), ("synth_tcmgan", 0.898), ("only_t2", 0.7)]]
    rep = aggregate(recs, ("method",), ("dice",))
    out = ordering_check(rep, ["all_real", "synth_tcmgan", "only_t2"])
    assert out["holds"]
    assert out["flagged"] == ["all_real>=synth_tcmgan"]


def test_run_boost_writes_artifacts(tmp_path, G):
    subs = make_phantom_dataset(PhantomConfig(image_size=16, n_subjects=6, slices_per_subject=3,
                                              tumor_radius_range=(2, 4), seed=5))
    a = build_slice_set(subs[:3], out_size=16, threshold=10)
    b = build_slice_set(subs[3:], out_size=16, threshold=10)
    res = run_boost(a, b, {"synth_tcmgan": G}, BoostConfig(epochs=2, batch_size=8), ARCH,
                    out_dir=tmp_path, gan_train_ids=["other"])
    rows = read_report(tmp_path / "dice_report.csv")
    assert [r["method"] for r in rows] == ["only_t2", "synth_tcmgan", "all_real"]
    assert set(rows[0]) == {"method", "dice_mean", "dice_std", "n"}
    assert (tmp_path / "samples" / "boost_synth_tcmgan.png").exists()
    meta = json.loads((tmp_path / "boost_ordering.json").read_text())
    assert meta["ordering"]["chain"] == ["all_real", "synth_tcmgan", "only_t2"]
    assert res["ordering"] == meta["ordering"]
    with pytest.raises(DataLeakError):
        run_boost(a, b, {}, BoostConfig(epochs=1), ARCH, gan_train_ids=a.subjects[:1])
