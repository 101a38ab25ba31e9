"""
Tests for settings resolution and validation helpers.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from config.settings import Settings, load_settings
from src.main import build_parser
from src.api.context import settings_from_args
from src.utils.errors import DataMismatchError
from src.utils.validators import ensure, validate_line_image, validate_stochastic_rows, validate_transcript


class TestSettings:
    """Test cases for configuration sources and their precedence."""

    def test_defaults(self, monkeypatch):
        """Test built-in defaults."""
        monkeypatch.delenv("PHMM_JOBS", raising=False)
        settings = Settings()
        assert settings.jobs == 1
        assert settings.hmm.num_states == 5
        assert settings.tying.avg_states == 3.0
        assert settings.classifier.code_dim == 200

    def test_config_file(self, tmp_path):
        """Test values are read from a TOML file."""
        path = tmp_path / "phmm.toml"
        path.write_text("jobs = 3\n[hmm]\nnum_states = 4\n")
        settings = load_settings(path)
        assert settings.jobs == 3
        assert settings.hmm.num_states == 4
        assert settings.hmm.first_iterations == 4

    def test_environment_beats_file(self, tmp_path, monkeypatch):
        """Test environment variables override the config file."""
        path = tmp_path / "phmm.toml"
        path.write_text("[decode]\nlm_scale = 2.0\n")
        monkeypatch.setenv("PHMM_DECODE__LM_SCALE", "4.5")
        assert load_settings(path).decode.lm_scale == 4.5

    def test_flags_beat_everything(self, tmp_path, monkeypatch):
        """Test command-line flags win over environment and file."""
        path = tmp_path / "phmm.toml"
        path.write_text("[tying]\navg_states = 2.0\n")
        monkeypatch.setenv("PHMM_TYING__AVG_STATES", "4.0")
        args = build_parser().parse_args(["tie", "--config", str(path), "--avg-states", "1.5"])
        settings = settings_from_args(args)
        assert settings.tying.avg_states == 1.5
        assert settings.tying.min_occupancy == 50.0

    @pytest.mark.parametrize("value", ["inf", "None", "0"])
    def test_unlimited_beam(self, value):
        """Test the unlimited beam spellings."""
        assert load_settings(decode={"beam": value}).decode.beam is None

    def test_out_of_range(self):
        """Test invalid values are rejected."""
        with pytest.raises(ValidationError):
            load_settings(jobs=0)
        with pytest.raises(ValidationError):
            load_settings(lm={"omega": 1.5})


class TestValidators:
    """Test cases for validation helpers."""

    def test_transcript(self):
        """Test empty transcripts and unknown classes are reported."""
        assert validate_transcript([0, 2], 3)["valid"]
        assert not validate_transcript([], 3)["valid"]
        assert "outside" in validate_transcript([0, 5], 3)["errors"][0]

    def test_line_image(self):
        """Test height and value range checks."""
        assert validate_line_image(np.zeros((16, 30), np.uint8), 16)["valid"]
        assert not validate_line_image(np.zeros((12, 30)), 16)["valid"]
        assert not validate_line_image(np.full((16, 30), 2.0), 16)["valid"]

    def test_stochastic_rows(self):
        """Test offending rows are listed."""
        result = validate_stochastic_rows(np.array([[0.5, 0.5], [0.7, 0.7], [-0.1, 1.1]]))
        assert result["rows"] == [1, 2]

    def test_ensure(self):
        """Test a failed check raises the requested error with context."""
        ensure({"valid": True}, DataMismatchError)
        with pytest.raises(DataMismatchError, match="line 4: Transcript is empty"):
            ensure(validate_transcript([], 3), DataMismatchError, "line 4")
