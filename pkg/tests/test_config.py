import pytest

from nargact import config


def test_defaults_and_digest_stable():
    a, b = config.RunConfig.defaults(), config.RunConfig.defaults()
    assert a.digest() == b.digest()
    assert a.run_id().startswith("s0-") and len(a.run_id()) == 3 + 12
    assert a["optim.lr"] == 1e-3 and a["model.dropout"] == 0.5


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\narity = 3\nwidths = 8, 9\n[session2]\nearly_stop = no\n")
    cfg = config.load(p, ["optim.lr=0.01"], seed=5)
    assert cfg["model.arity"] == 3 and cfg["model.widths"] == (8, 9)
    assert cfg["session2.early_stop"] is False and cfg["optim.lr"] == 0.01
    assert cfg.run_id().startswith("s5-")
    again = config.parse_text(cfg.to_text())
    assert again.to_text() == cfg.to_text()


def test_digest_changes_with_values():
    a = config.RunConfig.defaults()
    b = a.copy()
    b.set("optim.lr", "0.002")
    assert a.digest() != b.digest()


@pytest.mark.parametrize(
    "override",
    ["model.nope=1", "nosection.x=1", "optim.lr=fast", "model.layer_norm=maybe", "justakey"],
)
def test_bad_overrides(override):
    with pytest.raises(config.ConfigError):
        config.load(None, [override])


def test_missing_file():
    with pytest.raises(config.ConfigError):
        config.load("/nonexistent/config.ini")


def test_widths_default_per_kind():
    cfg = config.RunConfig.defaults()
    assert cfg.widths() == (64, 64, 64)
    cfg.set("model.kind", "conv")
    assert cfg.widths() == (60, 120, 120, 120)
    spec = cfg.outer_spec((3, 32, 32))
    assert spec.kind == "conv" and spec.arity == 2
