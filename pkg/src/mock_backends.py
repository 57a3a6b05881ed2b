"""
Mock Backends
Synthetic optimizer and runner with injectable per-pass faults, so fault
localization can be tested without a real optimizer or inference engine.

Synthetic models are small JSON documents. Each input's payload is derived
deterministically from (model seed, input id); passes carry their injected
faults into the optimized document, where the mock runner replays them.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from src.core_types import (
    AnswerTensor, BinaryLabel, Detection, Detections, GeneratedText, InferenceRecord,
    ModelArtifact, PassCategory, PassSpec, PreprocessConfig, RankedLabels, Task,
    ValidationResult,
)
from src.errors import InvariantError, RunCrash
from src.optimizer_backend import OptimizerBackend, PassRegistry
from src.orchestrator import DatasetInput, load_local_model
from src.runner import InferenceBackend

logger = logging.getLogger(__name__)

MOCK_FORMAT = "difftox-mock"
BASE_IR_VERSION = 3
NUM_LABELS = 20
REQUIRED_FIELDS = ("format", "ir_version", "task", "seed", "graph")
CATEGORY_CYCLE = (PassCategory.FUSE, PassCategory.ELIMINATE, PassCategory.REWRITE)
WORDS = ("the", "model", "graph", "node", "fused", "tensor", "shape", "output", "value",
         "layer", "weight", "input", "score", "label", "batch", "kernel")
UNUSED_INITIALIZER_TEMPLATE = (
    "[W:onnxruntime:, graph.cc:3490 CleanUnusedInitializersAndNodeArgs] "
    "Removing initializer '{name}'. It is not used by any node and should be removed from the model."
)


class FaultKind(str, Enum):
    OPT_CRASH = "OPT_CRASH"
    MALFORMED = "MALFORMED"
    RUN_CRASH = "RUN_CRASH"
    PERTURB_OUTPUTS = "PERTURB_OUTPUTS"
    INJECT_WARNING = "INJECT_WARNING"
    VERSION_BUMP = "VERSION_BUMP"


@dataclass(frozen=True)
class PassFault:
    kind: FaultKind
    magnitude: float = 0.1
    fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if not 0 < self.fraction <= 1:
            raise InvariantError(f"affected-input fraction must lie in (0, 1], got {self.fraction}")
        if self.magnitude <= 0:
            raise InvariantError(f"perturbation magnitude must be positive, got {self.magnitude}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value}
        if self.kind is FaultKind.PERTURB_OUTPUTS:
            data.update(magnitude=self.magnitude, fraction=self.fraction)
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "PassFault":
        if isinstance(data, str):
            return cls(FaultKind(data))
        return cls(kind=FaultKind(data["kind"]), magnitude=float(data.get("magnitude", 0.1)),
                   fraction=float(data.get("fraction", 1.0)))


def mock_pass_names(registry_size: int) -> List[str]:
    return [f"P{i}" for i in range(1, registry_size + 1)]


@dataclass(frozen=True)
class FaultScenario:
    """Injected faults keyed by pass name over a synthetic P1..Pn registry

    The seed picks which inputs a partial-fraction perturbation hits.
    """
    pass_faults: Dict[str, PassFault] = field(default_factory=dict)
    registry_size: int = 47
    seed: int = 0
    unstable_passes: FrozenSet[str] = frozenset()
    task: Task = Task.CLASSIFICATION

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "unstable_passes", frozenset(self.unstable_passes))
        object.__setattr__(self, "pass_faults", {
            name: fault if isinstance(fault, PassFault) else PassFault.from_dict(fault)
            for name, fault in self.pass_faults.items()
        })
        if self.registry_size < 1:
            raise InvariantError("registry_size must be >= 1")
        valid = set(mock_pass_names(self.registry_size))
        unknown = sorted((set(self.pass_faults) | self.unstable_passes) - valid)
        if unknown:
            raise InvariantError(f"scenario names passes outside P1..P{self.registry_size}: {unknown}")

    def injected(self) -> FrozenSet[str]:
        """Faulty passes that should be attributed"""
        return frozenset(self.pass_faults) - self.unstable_passes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass_faults": {name: fault.to_dict() for name, fault in sorted(self.pass_faults.items())},
            "registry_size": self.registry_size,
            "seed": self.seed,
            "unstable_passes": sorted(self.unstable_passes),
            "task": self.task.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FaultScenario":
        return cls(
            pass_faults={name: PassFault.from_dict(f) for name, f in data.get("pass_faults", {}).items()},
            registry_size=int(data.get("registry_size", 47)),
            seed=int(data.get("seed", 0)),
            unstable_passes=frozenset(data.get("unstable_passes", ())),
            task=Task(data.get("task", Task.CLASSIFICATION.value)),
        )

    @classmethod
    def load(cls, path: str) -> "FaultScenario":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _dump(document: Dict[str, Any]) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def _read(path: Path) -> Optional[Dict[str, Any]]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
    return document if isinstance(document, dict) and document.get("format") == MOCK_FORMAT else None


def make_mock_model(path: str, task: Task = Task.CLASSIFICATION, seed: int = 0) -> ModelArtifact:
    """Write a synthetic original model (container version 3)"""
    document = {
        "format": MOCK_FORMAT,
        "ir_version": BASE_IR_VERSION,
        "task": Task(task).value,
        "seed": int(seed),
        "graph": {"applied_passes": [], "num_labels": NUM_LABELS},
        "faults": {"run_crash": [], "perturb": [], "unused_initializers": []},
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(_dump(document), encoding="utf-8")
    return load_local_model(str(target))


class MockOptimizerBackend(OptimizerBackend):
    """Applies passes by recording their injected faults in the output document"""

    id = "mock"

    def __init__(self, scenario: FaultScenario):
        self.scenario = scenario
        passes = []
        for index, name in enumerate(mock_pass_names(scenario.registry_size)):
            category = CATEGORY_CYCLE[index % len(CATEGORY_CYCLE)]
            passes.append(PassSpec(
                name=name,
                category=category,
                in_default_bundle=category in (PassCategory.FUSE, PassCategory.ELIMINATE),
                known_unstable=name in scenario.unstable_passes,
            ))
        self._registry = PassRegistry(passes)

    def list_passes(self) -> PassRegistry:
        return self._registry

    def run_optimizer(self, source: Path, target: Path, passes: Optional[Sequence[str]]) -> Tuple[bool, str]:
        applied = list(self._registry.default_bundle() if passes is None else passes)
        document = _read(source)
        if document is None:
            return False, f"mock optimizer: cannot parse model {source}"
        faults = document.setdefault("faults", {"run_crash": [], "perturb": [], "unused_initializers": []})
        for name in applied:
            fault = self.scenario.pass_faults.get(name)
            if fault is None:
                continue
            if fault.kind is FaultKind.OPT_CRASH:
                return False, f"mock optimizer: pass {name} raised an internal assertion"
            if fault.kind is FaultKind.MALFORMED:
                document.pop("graph", None)
            elif fault.kind is FaultKind.RUN_CRASH:
                faults["run_crash"].append(name)
            elif fault.kind is FaultKind.PERTURB_OUTPUTS:
                faults["perturb"].append({"pass": name, "magnitude": fault.magnitude, "fraction": fault.fraction,
                                          "seed": self.scenario.seed})
            elif fault.kind is FaultKind.INJECT_WARNING:
                faults["unused_initializers"].append(f"{name}_folded_const")
            elif fault.kind is FaultKind.VERSION_BUMP:
                document["ir_version"] = int(document.get("ir_version", BASE_IR_VERSION)) + 1
        if "graph" in document:
            document["graph"]["applied_passes"] = document["graph"].get("applied_passes", []) + applied
        Path(target).write_text(_dump(document), encoding="utf-8")
        return True, ""

    def validate(self, path: Path) -> ValidationResult:
        document = _read(path)
        if document is None:
            return ValidationResult.malformed(["not a mock model document"])
        missing = [f for f in REQUIRED_FIELDS if f not in document]
        if missing:
            return ValidationResult.malformed([f"Missing required field '{f}'" for f in missing])
        return ValidationResult.ok()

    def read_ir_version(self, path: Path) -> Optional[int]:
        document = _read(path)
        if document is None or not isinstance(document.get("ir_version"), int):
            return None
        return document["ir_version"]


def _unit(*parts: Any) -> float:
    """Deterministic value in [0, 1) from its parts"""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2 ** 64


def _rng(*parts: Any) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _base_payload(task: Task, seed: int, input_id: str, num_labels: int):
    rng = _rng(seed, input_id)
    if task is Task.CLASSIFICATION:
        return RankedLabels.from_scores(rng.dirichlet(np.ones(num_labels)).tolist())
    if task is Task.DETECTION:
        items = []
        for _ in range(int(rng.integers(1, 5))):
            x1, y1 = rng.uniform(0, 200, size=2)
            w, h = rng.uniform(10, 60, size=2)
            items.append(Detection(label=int(rng.integers(0, num_labels)), score=float(rng.uniform(0.3, 1.0)),
                                   box=(float(x1), float(y1), float(x1 + w), float(y1 + h))))
        return Detections(tuple(items))
    if task is Task.TEXT_GENERATION:
        return GeneratedText(" ".join(WORDS[i] for i in rng.integers(0, len(WORDS), size=8)))
    if task is Task.SENTIMENT:
        return BinaryLabel(int(rng.integers(0, 2)))
    return AnswerTensor(shape=(1, 4), values=tuple(float(v) for v in rng.normal(size=4)))


def _perturb(payload, magnitude: float):
    if isinstance(payload, RankedLabels):
        # lift the runner-up above the top label
        scores = dict(zip(payload.labels, payload.scores))
        if len(payload.labels) > 1:
            scores[payload.labels[1]] = payload.scores[0] + magnitude
        return RankedLabels.from_scores([scores[label] for label in range(len(scores))])
    if isinstance(payload, Detections):
        top = max(range(len(payload.items)), key=lambda i: payload.items[i].score)
        det = payload.items[top]
        x1, y1, x2, y2 = det.box
        shift = (x2 - x1) * (1 + magnitude)
        moved = Detection(det.label, det.score, (x1 + shift, y1, x2 + shift, y2))
        return Detections(payload.items[:top] + (moved,) + payload.items[top + 1:])
    if isinstance(payload, GeneratedText):
        tokens = payload.text.split()
        tokens[0] = "perturbed"
        return GeneratedText(" ".join(tokens))
    if isinstance(payload, BinaryLabel):
        return BinaryLabel(1 - payload.value)
    values = list(payload.values)
    values[0] += magnitude
    return AnswerTensor(payload.shape, tuple(values))


class MockRunnerBackend(InferenceBackend):
    """Replays the faults recorded in a synthetic model document"""

    id = "mock"

    def run_batch(self, model: ModelArtifact, inputs: Sequence[DatasetInput], task: Task,
                  preprocess: PreprocessConfig) -> List[InferenceRecord]:
        document = _read(Path(model.path))
        if document is None:
            raise RunCrash(f"mock runner: cannot load model {model.path}")
        if "graph" not in document:
            raise RunCrash("mock runner: Missing required field 'graph'")
        faults = document.get("faults", {})
        if faults.get("run_crash"):
            raise RunCrash(f"mock runner: Incompatible shape in node rewritten by {faults['run_crash'][0]}")
        warnings = tuple(UNUSED_INITIALIZER_TEMPLATE.format(name=name)
                         for name in faults.get("unused_initializers", []))
        seed = document["seed"]
        num_labels = document["graph"].get("num_labels", NUM_LABELS)
        records = []
        for item in inputs:
            payload = _base_payload(Task(task), seed, item.input_id, num_labels)
            hits = [entry["magnitude"] for entry in faults.get("perturb", [])
                    if _unit(seed, entry.get("seed", 0), entry["pass"], item.input_id) < entry["fraction"]]
            # several perturbing passes act once, with the strongest magnitude
            if hits:
                payload = _perturb(payload, max(hits))
            records.append(InferenceRecord(item.input_id, payload, warnings, 0.0))
        return records


def make_mock_backend(scenario: FaultScenario) -> Tuple[MockOptimizerBackend, MockRunnerBackend]:
    logger.info(f"✅ Mock backends ready: {scenario.registry_size} passes, "
                f"{len(scenario.pass_faults)} injected fault(s)")
    return MockOptimizerBackend(scenario), MockRunnerBackend()


def generate_scenarios(count: int, seed: int = 0, registry_size: int = 47,
                       task: Task = Task.CLASSIFICATION) -> List[FaultScenario]:
    """
    Reproducible randomized scenarios

    Scenario i always injects fault kind i mod 6, so any batch of six or more
    covers every kind; roughly half inject two or three faults and some mark
    a faulty pass as known-unstable.
    """
    if count < 1:
        raise InvariantError("count must be >= 1")
    kinds = list(FaultKind)
    names = mock_pass_names(registry_size)
    rng = np.random.default_rng(seed)
    scenarios = []
    for i in range(count):
        n_faults = 1 if i % 2 == 0 else int(rng.integers(2, 4))
        chosen = [str(n) for n in rng.choice(names, size=min(n_faults, len(names)), replace=False)]
        faults = {}
        for j, name in enumerate(chosen):
            kind = kinds[i % len(kinds)] if j == 0 else kinds[int(rng.integers(0, len(kinds)))]
            if kind is FaultKind.PERTURB_OUTPUTS:
                faults[name] = PassFault(kind, magnitude=round(float(rng.uniform(0.05, 0.5)), 3),
                                         fraction=float(rng.choice([0.5, 1.0])))
            else:
                faults[name] = PassFault(kind)
        unstable = frozenset()
        if i % 5 == 4:
            unstable = frozenset({chosen[-1]})
        scenarios.append(FaultScenario(pass_faults=faults, registry_size=registry_size,
                                       seed=int(rng.integers(0, 2 ** 31)), unstable_passes=unstable, task=task))
    return scenarios
