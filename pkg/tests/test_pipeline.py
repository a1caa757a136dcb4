import json

import numpy as np
import pytest

from atlasfuse.fusion import ProbMap
from atlasfuse.metrics import dice
from atlasfuse.pipeline import (
    ConfigError,
    Mode,
    RunConfig,
    batch_experiment,
    embed,
    grid_configs,
    load_config,
    segment,
    segment_modes,
    summarize,
    with_overrides,
)
from atlasfuse.volume import Atlas, BoundingBox, Volume


def test_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert (cfg.n_atlases_selected, cfg.fusion.k, cfg.fusion.forest.n_tree, cfg.fusion.forest.n_split) == (20, 100, 200, 20)
    assert (cfg.propagation.T, cfg.propagation.sigma, cfg.propagation.beta) == (0.5, 10.0, 0.6)
    assert cfg.mode is Mode.RF_SSLP


def test_config_round_trip(tmp_path):
    cfg = load_config({"mode": "mv-sslp", "fusion": {"k": 50, "patch": {"feature_mode": "intensity"}}, "propagation": {"stencil": 6}})
    assert cfg.fusion.k == 50 and cfg.propagation.stencil == 6 and cfg.mode is Mode.MV_SSLP
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


@pytest.mark.parametrize(
    "bad",
    [{"bogus": 1}, {"fusion": {"kk": 1}}, {"fusion": {"forest": {"n_tree": 0}}}, {"mode": "svm"}, {"propagation": 3}],
)
def test_config_rejected(bad):
    with pytest.raises(ConfigError):
        load_config(bad)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_overrides_and_grid():
    cfg = with_overrides(RunConfig(), {"fusion.k": 30, "propagation.beta": 0.8})
    assert cfg.fusion.k == 30 and cfg.propagation.beta == 0.8
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), {"fusion.kay": 1})
    grid = grid_configs({"fusion.k": [10, 20], "seed": [1, 2, 3]}, RunConfig())
    assert len(grid) == 6
    assert grid[4][0] == {"fusion.k": 20, "seed": 2} and grid[4][1].fusion.k == 20
    with pytest.raises(ConfigError):
        grid_configs({"seed": []}, RunConfig())


def test_embed():
    box = BoundingBox((1, 1, 1), (2, 2, 2))
    p = ProbMap(box, np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2), bool))
    out = embed(p, (4, 4, 4))
    assert out[box.slices].tolist() == np.full((2, 2, 2), 0.5).tolist()
    assert (out == -1).sum() == 64 - 8


@pytest.mark.parametrize("mode", list(Mode))
def test_identical_atlases_reproduce_mask(small_phantom, small_run_config, mode):
    truth = small_phantom.truth
    atlases = [Atlas(small_phantom.target, truth)] * 4
    mask, prob, meta = segment(small_phantom.target, atlases, with_overrides(small_run_config, {"mode": mode.value}))
    assert mask == truth
    assert meta.n_candidates == 0


def test_segment_modes(small_phantom, small_run_config):
    res = segment_modes(small_phantom.target, small_phantom.atlases, small_run_config)
    assert set(res) == set(Mode)
    masks = {m: r[0] for m, r in res.items()}
    box = res[Mode.MV][2].box
    for m, (mask, prob, meta) in res.items():
        assert mask.dims == small_phantom.target.dims and mask.is_label
        outside = np.ones(mask.dims, bool)
        outside[box.slices] = False
        assert not mask.data[outside].any()
        assert len(meta.selected_atlases) == small_run_config.n_atlases_selected
        assert json.dumps(meta.to_dict())
        assert dice(mask, small_phantom.truth) > 0.9
    assert res[Mode.MV_SSLP][2].iterations > 0
    assert res[Mode.LLL_RF][1].info["n_candidates"] == res[Mode.MV][2].n_candidates
    single = segment(small_phantom.target, small_phantom.atlases, small_run_config)
    assert single[0] == masks[Mode.RF_SSLP]


def test_deterministic(small_phantom, small_run_config):
    a = segment(small_phantom.target, small_phantom.atlases, small_run_config)
    b = segment(small_phantom.target, small_phantom.atlases, small_run_config)
    assert a[0] == b[0]
    assert a[1].values.tobytes() == b[1].values.tobytes()


def test_mv_modes_invariant_to_atlas_order(small_phantom, small_run_config):
    modes = [Mode.MV, Mode.MV_SSLP]
    a = segment_modes(small_phantom.target, small_phantom.atlases, small_run_config, modes)
    b = segment_modes(small_phantom.target, small_phantom.atlases[::-1], small_run_config, modes)
    for m in modes:
        assert a[m][0] == b[m][0]


def test_input_errors(small_phantom, small_run_config):
    with pytest.raises(ValueError):
        segment(small_phantom.target, [], small_run_config)
    other = Volume(np.zeros((5, 5, 5)))
    with pytest.raises(ValueError):
        segment(other, small_phantom.atlases, small_run_config)
    empty = [Atlas(a.image, Volume.label(np.zeros(a.label.dims))) for a in small_phantom.atlases]
    with pytest.raises(ValueError):
        segment(small_phantom.target, empty, small_run_config)


def test_batch_and_summary(small_phantom, small_run_config):
    rows = batch_experiment([small_phantom, small_phantom], small_run_config, [Mode.MV, Mode.RF_SSLP])
    assert len(rows) == 4
    assert {r["mode"] for r in rows} == {"mv", "rf-sslp"}
    summary = summarize(rows)
    assert summary["mv"]["n"] == 2 and summary["mv"]["dice_std"] == 0.0
    assert 0.9 < summary["rf-sslp"]["dice_mean"] <= 1.0
