import pytest
import yaml

from proxyworld import config as C
from proxyworld.errors import ConfigInvalid
from proxyworld.fixtures import scene_config


def load(root, **over):
    return C.load_config(scene_config(**over), base_dir=root)


def test_defaults(fixture_root):
    cfg = load(fixture_root)
    assert cfg.bands == {"foreground": [2.0, 10.0], "midground": [20.0, 50.0]}
    assert cfg.placement["count"] == [5, 10]
    assert cfg.budget["triangles"] == 250_000
    assert cfg.backend["mode"] == "stub"


def test_overlapping_bands(fixture_root):
    with pytest.raises(ConfigInvalid) as exc:
        load(fixture_root, bands={"foreground": [2, 30], "midground": [20, 50]})
    assert any(p.startswith("bands") for p in exc.value.problems)


def test_missing_library_names_field(fixture_root):
    cfg = scene_config()
    del cfg["libraries"]["audio"]
    cfg["libraries"]["terrain"] = "nowhere/index.json"
    with pytest.raises(ConfigInvalid) as exc:
        C.load_config(cfg, base_dir=fixture_root)
    text = " ".join(exc.value.problems)
    assert "libraries.audio" in text and "libraries.terrain" in text


def test_collects_all_problems(fixture_root):
    with pytest.raises(ConfigInvalid) as exc:
        load(fixture_root, user_prompt="", seed="x", colour="red",
             resolution={"effects": 96}, backend={"mode": "cloud"})
    assert len(exc.value.problems) >= 5


def test_yaml_file_and_bad_yaml(tmp_path, fixture_root):
    p = fixture_root / "scene.yaml"
    cfg = C.load_config(p)
    assert cfg.path == p
    bad = tmp_path / "bad.yaml"
    bad.write_text("user_prompt: [unclosed\n")
    with pytest.raises(ConfigInvalid):
        C.load_config(bad)
    bad.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ConfigInvalid):
        C.load_config(bad)


def test_digest_ignores_output(fixture_root):
    a = load(fixture_root, output="a")
    b = load(fixture_root, output="b")
    assert a.digest() == b.digest()
    assert a.digest() != load(fixture_root, seed=1).digest()


def test_tags_from_prompt(fixture_root):
    cfg = load(fixture_root)
    assert {"alpine", "lake", "pine", "forest", "mountain"} <= set(cfg.tags)
    assert "the" not in cfg.tags
    assert load(fixture_root, scene_tags=["Beach"]).tags == ["beach"]
