import pytest

from src.config import reload_config
from src.core_types import DatasetKind, DatasetSpec, LocalSource, ModelDescriptor, Task
from src.localizer import Backends
from src.mock_backends import FaultScenario, make_mock_backend, make_mock_model
from src.orchestrator import Dataset, DatasetInput


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Fresh settings per test, with the model cache under tmp_path"""
    monkeypatch.setenv("DIFFTOX_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("DIFFTOX_HUB_URL", raising=False)
    monkeypatch.delenv("DIFFTOX_LOG_LEVEL", raising=False)
    config = reload_config()
    yield config
    reload_config()


@pytest.fixture
def make_dataset():
    def _make(count: int, prefix: str = "in") -> Dataset:
        spec = DatasetSpec(kind=DatasetKind.PACKAGED_DATASET_REF, location="memory")
        inputs = tuple(DatasetInput(input_id=f"{prefix}{i:03d}", fields={"text": f"sample {i}"})
                       for i in range(count))
        return Dataset(spec=spec, inputs=inputs)
    return _make


@pytest.fixture
def make_model(tmp_path):
    """Factory for (descriptor, original artifact) over a synthetic model"""
    def _make(task: Task = Task.CLASSIFICATION, seed: int = 0, model_id: str = "m1"):
        artifact = make_mock_model(str(tmp_path / "models" / f"{model_id}.json"), task=task, seed=seed)
        descriptor = ModelDescriptor(id=model_id, task=task, opset=13, source=LocalSource(artifact.path))
        return descriptor, artifact
    return _make


@pytest.fixture
def mock_backends():
    def _make(scenario: FaultScenario) -> Backends:
        optimizer, runner = make_mock_backend(scenario)
        return Backends(optimizer, runner)
    return _make
