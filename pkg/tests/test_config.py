import pydantic
import pytest
import yaml

from agents import Ablation, AgentId
from config import DataPaths, EngineConfig, PipelineSettings


def test_defaults(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = EngineConfig.load()
    assert config.pipeline.k_related == 5
    assert config.pipeline.path_cap == 50
    assert config.pipeline.ablation is Ablation.FULL
    assert config.parallelism == 4
    assert config.paths.kg_snapshot == (tmp_path / ".molrag" / "kg").resolve()
    assert config.paths.trace_log.name == "traces.jsonl"


def test_yaml_paths_resolve_against_the_config_file(tmp_path):
    path = tmp_path / "conf" / "engine.yaml"
    path.parent.mkdir()
    path.write_text(
        yaml.safe_dump(
            {
                "backend": {"kind": "mock", "script": "script.tsv"},
                "pipeline": {"k_related": 3, "temperatures": {"prediction": 0.3}},
                "paths": {"workspace": "ws", "embeddings": "/data/embeddings.npz"},
                "parallelism": 2,
            }
        ),
        encoding="utf-8",
    )
    config = EngineConfig.load(path)
    assert config.backend.script == (tmp_path / "conf" / "script.tsv").resolve()
    assert config.paths.annotation_snapshot == (tmp_path / "conf" / "ws" / "annotations.tsv").resolve()
    assert str(config.paths.embeddings) == "/data/embeddings.npz"
    assert config.pipeline.temperature_for(AgentId.PREDICTION) == 0.3
    assert config.pipeline.temperature_for(AgentId.MU) == 0.0
    assert config.parallelism == 2


def test_empty_yaml_is_the_default(tmp_path):
    path = tmp_path / "engine.yaml"
    path.write_text("", encoding="utf-8")
    assert EngineConfig.load(path).pipeline == PipelineSettings()


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        EngineConfig.load(tmp_path / "absent.yaml")


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "engine.yaml"
    path.write_text("pipeline:\n  k_relatd: 3\n", encoding="utf-8")
    with pytest.raises(pydantic.ValidationError):
        EngineConfig.load(path)


@pytest.mark.parametrize(
    "settings",
    [
        {"fingerprint_width": 1000},
        {"fingerprint_width": 32},
        {"k_related": 0},
        {"temperatures": {"oracle": 0.5}},
        {"temperatures": {"mu": -1.0}},
        {"kg_fraction": 0.0},
        {"annotation_fraction": 1.5},
    ],
)
def test_invalid_pipeline_settings(settings):
    with pytest.raises(pydantic.ValidationError):
        PipelineSettings(**settings)


def test_overrides(tmp_path):
    config = EngineConfig().with_overrides(
        {"pipeline.k_related": 7, "pipeline.ablation": "only_mu", "backend.model": None, "parallelism": 8}, tmp_path
    )
    assert config.pipeline.k_related == 7
    assert config.pipeline.ablation is Ablation.ONLY_MU
    assert config.backend.model == EngineConfig().backend.model
    assert config.parallelism == 8
    with pytest.raises(KeyError):
        EngineConfig().with_overrides({"pipeline.beam_width": 2})
    with pytest.raises(pydantic.ValidationError):
        EngineConfig().with_overrides({"parallelism": 0})


def test_api_key_comes_from_the_environment(monkeypatch):
    settings = EngineConfig().backend
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    assert settings.api_key() is None
    monkeypatch.setenv("OPENAI_API_KEY", "sk-env")
    assert settings.api_key() == "sk-env"
    assert "sk-env" not in settings.model_dump_json()


def test_ensure_exist(tmp_path):
    paths = DataPaths(workspace=tmp_path)
    (tmp_path / "annotations.tsv").write_text("smiles\tcaption\n", encoding="utf-8")
    paths.ensure_exist("annotation_snapshot")
    with pytest.raises(FileNotFoundError):
        paths.ensure_exist("annotation_snapshot", "embeddings")
    with pytest.raises(FileNotFoundError):
        paths.ensure_exist("captioning_table")
