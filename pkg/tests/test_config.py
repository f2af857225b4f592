import pytest

from tamperlab.config import RunConfig, load_run_config, parse_config_text


def test_defaults():
    cfg = RunConfig()
    assert cfg.model.lam == 10 and cfg.model.nms == 0.2
    assert (cfg.model.iou_pos, cfg.model.iou_neg) == (0.7, 0.3)
    assert (cfg.model.proposals_train, cfg.model.proposals_test) == (64, 300)
    assert cfg.model.sketch_dim == 16384
    assert cfg.augment == ("flip",)
    assert cfg.steps == 2000 and cfg.sgd.decay_step == 800


def test_dump_round_trip(tmp_path):
    cfg = load_run_config(None, ["seed=7", "channels=4,8,8,8", "learning_rate=0.003", "clip_norm=5",
                                 "techniques=splice,removal", "fusion_scale=none"])
    path = tmp_path / "run.cfg"
    path.write_text(cfg.dump())
    again = load_run_config(str(path))
    assert again == cfg
    assert again.dump() == cfg.dump()
    assert again.model.backbone.channels == (4, 8, 8, 8) and again.sgd.clip_norm == 5.0


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nsteps = 10\nseed = 1  # trailing\n")
    cfg = load_run_config(str(path), ["steps=3"])
    assert (cfg.steps, cfg.seed) == (3, 1)


@pytest.mark.parametrize("text,match", [("bogus = 1", "unknown"), ("steps 3", ":1:"), ("steps = x", "invalid literal")])
def test_bad_config_text(tmp_path, text, match):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ValueError, match=match):
        load_run_config(str(path))


def test_validation():
    with pytest.raises(ValueError):
        load_run_config(None, ["techniques=splice,blur"])
    with pytest.raises(ValueError):
        load_run_config(None, ["jobs=0"])
    with pytest.raises(ValueError):
        load_run_config(None, ["steps"])
    assert parse_config_text("\n# only comments\n") == {}
