import sys

import pytest

import config
from conftest import DATA_DIR, ROOT


def test_python_floor():
    assert sys.version_info[:2] >= config.MIN_PYTHON
    requirements = (ROOT / "requirements.txt").read_text(encoding="utf-8")
    assert "Python >= 3.10" in requirements
    assert 'tomli>=2.0; python_version < "3.11"' in requirements


def test_load_toml():
    plan = config.load_toml(DATA_DIR / "grid_plan.toml")
    assert plan["random_ods"] == 20
    assert plan["beta"] == [-1.5]


def test_bad_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("beta = [\n", encoding="utf-8")
    with pytest.raises(config.TOMLDecodeError):
        config.load_toml(path)


def test_parse_vector():
    assert config.parse_vector("-0.6, -0.03") == [-0.6, -0.03]
    with pytest.raises(ValueError):
        config.parse_vector(" , ")
