"""
Core Types
Shared domain vocabulary: model descriptors, passes, outcomes, records and reports.
All values are immutable after construction and validate their invariants.
"""

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from src.errors import InvariantError

HEX_DIGEST = re.compile(r"^[0-9a-f]+$")
MIN_HUB_OPSET = 7


class Task(str, Enum):
    """Model task; decides the comparator family"""
    CLASSIFICATION = "classification"
    DETECTION = "detection"
    TEXT_GENERATION = "text_generation"
    QUESTION_ANSWERING = "question_answering"
    SENTIMENT = "sentiment"


class PassCategory(str, Enum):
    FUSE = "fuse"
    ELIMINATE = "eliminate"
    REWRITE = "rewrite"
    OTHER = "other"


class OutcomeClass(str, Enum):
    """Primary classification of one (model, pass-set) evaluation"""
    CLEAN = "CLEAN"
    OPT_CRASH = "OPT_CRASH"
    MALFORMED = "MALFORMED"
    RUN_CRASH = "RUN_CRASH"
    DIVERGENT = "DIVERGENT"
    WARNING = "WARNING"

    @property
    def is_crash(self) -> bool:
        return self in (OutcomeClass.OPT_CRASH, OutcomeClass.MALFORMED, OutcomeClass.RUN_CRASH)


class WarningFlag(str, Enum):
    UNUSED_INITIALIZER = "UNUSED_INITIALIZER"
    VERSION_CHANGE = "VERSION_CHANGE"


class OptimizationStatus(str, Enum):
    OK = "ok"
    CRASHED = "crashed"


class DatasetKind(str, Enum):
    IMAGE_DIR = "image_dir"
    TEXT_FILE_PAIRS = "text_file_pairs"
    PACKAGED_DATASET_REF = "packaged_dataset_ref"


def _require(condition: bool, message: str):
    if not condition:
        raise InvariantError(message)


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# Configuration values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """
    Task-specific preprocessing of raw inputs

    Image fields apply to classification and detection; tokenizer fields to
    text generation, question answering and sentiment.
    """
    height: int = 224
    width: int = 224
    channel_order: str = "RGB"
    mean: Tuple[float, ...] = (0.485, 0.456, 0.406)
    std: Tuple[float, ...] = (0.229, 0.224, 0.225)
    scale: float = 1.0 / 255.0
    layout: str = "NCHW"
    resize: str = "resize"
    outputs_logits: bool = True
    tokenizer: Optional[str] = None
    max_length: int = 256
    truncation: bool = True
    max_new_tokens: int = 64
    eos_token_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        _require(self.channel_order in ("RGB", "BGR", "L"), f"Unknown channel order: {self.channel_order}")
        channels = len(self.channel_order) if self.channel_order != "L" else 1
        _require(len(self.mean) == channels and len(self.std) == channels,
                 f"mean/std must have {channels} entries for {self.channel_order}")
        _require(all(s > 0 for s in self.std), "std entries must be positive")
        _require(self.layout in ("NCHW", "NHWC"), f"Unknown layout: {self.layout}")
        _require(self.resize in ("resize", "center_crop"), f"Unknown resize policy: {self.resize}")
        _require(self.height > 0 and self.width > 0, "target height/width must be positive")
        _require(self.max_length > 0, "max sequence length must be positive")
        _require(self.max_new_tokens > 0, "max_new_tokens must be positive")

    @property
    def channels(self) -> int:
        return 1 if self.channel_order == "L" else len(self.channel_order)

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["mean"] = list(self.mean)
        data["std"] = list(self.std)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PreprocessConfig":
        return cls(**data)


@dataclass(frozen=True)
class ComparatorConfig:
    top_k_values: Tuple[int, ...] = (1, 5, 10)
    iou_thresholds: Tuple[float, ...] = (0.5, 0.75, 0.9)
    bleu_max_n: int = 4
    tensor_abs_tol: float = 0.0
    tensor_rel_tol: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "top_k_values", tuple(int(k) for k in self.top_k_values))
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        validate_top_k(self.top_k_values)
        validate_iou_thresholds(self.iou_thresholds)
        _require(self.bleu_max_n > 0, "bleu_max_n must be positive")
        for tol in (self.tensor_abs_tol, self.tensor_rel_tol):
            _require(math.isfinite(tol) and tol >= 0, f"tolerance must be finite and >= 0, got {tol}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "top_k_values": list(self.top_k_values),
            "iou_thresholds": list(self.iou_thresholds),
            "bleu_max_n": self.bleu_max_n,
            "tensor_abs_tol": self.tensor_abs_tol,
            "tensor_rel_tol": self.tensor_rel_tol,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ComparatorConfig":
        return cls(**data)


def validate_top_k(values: Sequence[int]):
    _require(len(values) > 0, "top_k_values must not be empty")
    _require(all(k > 0 for k in values), "top_k_values must be positive")
    _require(_strictly_increasing(values), "top_k_values must be strictly increasing")


def validate_iou_thresholds(values: Sequence[float]):
    _require(len(values) > 0, "iou_thresholds must not be empty")
    _require(all(0 < t <= 1 for t in values), "iou_thresholds must lie in (0, 1]")
    _require(_strictly_increasing(values), "iou_thresholds must be strictly increasing")


@dataclass(frozen=True)
class LocalSource:
    path: str

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "local", "path": self.path}


@dataclass(frozen=True)
class HubSource:
    name: str
    opset: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "hub", "name": self.name, "opset": self.opset}


ModelSource = Union[LocalSource, HubSource]


def source_from_dict(data: Dict[str, Any]) -> ModelSource:
    kind = data.get("type")
    if kind == "local":
        return LocalSource(path=data["path"])
    if kind == "hub":
        return HubSource(name=data["name"], opset=data.get("opset"))
    raise InvariantError(f"Unknown model source type: {kind!r}")


@dataclass(frozen=True)
class ModelDescriptor:
    """Identity and configuration of one model under test"""
    id: str
    task: Task
    opset: int
    source: ModelSource
    checksum: Optional[str] = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    comparator_config: ComparatorConfig = field(default_factory=ComparatorConfig)

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        _require(bool(self.id), "model id must not be empty")
        _require(isinstance(self.opset, int) and self.opset > 0, "opset must be a positive integer")
        if isinstance(self.source, HubSource):
            _require(self.opset >= MIN_HUB_OPSET,
                     f"hub models need opset >= {MIN_HUB_OPSET}, got {self.opset}")
        if self.checksum is not None:
            _require(bool(HEX_DIGEST.match(self.checksum)), f"checksum is not a hex digest: {self.checksum}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "task": self.task.value,
            "opset": self.opset,
            "source": self.source.to_dict(),
            "checksum": self.checksum,
            "preprocess": self.preprocess.to_dict(),
            "comparator_config": self.comparator_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelDescriptor":
        return cls(
            id=data["id"],
            task=Task(data["task"]),
            opset=data["opset"],
            source=source_from_dict(data["source"]),
            checksum=data.get("checksum"),
            preprocess=PreprocessConfig.from_dict(data.get("preprocess", {})),
            comparator_config=ComparatorConfig.from_dict(data.get("comparator_config", {})),
        )


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind
    location: str
    limit: Optional[int] = None
    input_schema: Dict[str, str] = field(default_factory=dict)
    split: Optional[str] = None
    subset: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        _require(self.limit is None or self.limit > 0, "dataset limit must be positive")
        if self.split is not None:
            _require(self.kind is DatasetKind.PACKAGED_DATASET_REF, "only packaged datasets take a split")

    @property
    def is_hub_reference(self) -> bool:
        """Packaged dataset fetched by name and split rather than read from a local export"""
        return self.kind is DatasetKind.PACKAGED_DATASET_REF and bool(self.split)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "location": self.location,
            "limit": self.limit,
            "input_schema": dict(self.input_schema),
            "split": self.split,
            "subset": self.subset,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        return cls(
            kind=DatasetKind(data["kind"]),
            location=data["location"],
            limit=data.get("limit"),
            input_schema=dict(data.get("input_schema", {})),
            split=data.get("split"),
            subset=data.get("subset"),
        )


@dataclass(frozen=True)
class BackendSpec:
    """Backend id plus free-form settings handed to the backend factory"""
    id: str
    settings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "settings": dict(self.settings)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackendSpec":
        return cls(id=data["id"], settings=dict(data.get("settings", {})))


@dataclass(frozen=True)
class RunConfig:
    models: Tuple[ModelDescriptor, ...]
    dataset: DatasetSpec
    optimizer_backend: BackendSpec
    runner_backend: BackendSpec
    output_dir: str
    chunks: int = 1
    top_k_values: Tuple[int, ...] = (1, 5, 10)
    iou_thresholds: Tuple[float, ...] = (0.5, 0.75, 0.9)
    pass_subset: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "top_k_values", tuple(self.top_k_values))
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        if self.pass_subset is not None:
            object.__setattr__(self, "pass_subset", tuple(self.pass_subset))
        _require(isinstance(self.chunks, int) and self.chunks >= 1, "chunks N must be >= 1")
        validate_top_k(self.top_k_values)
        validate_iou_thresholds(self.iou_thresholds)
        ids = [m.id for m in self.models]
        _require(len(ids) == len(set(ids)), "model ids must be unique")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "models": [m.to_dict() for m in self.models],
            "dataset": self.dataset.to_dict(),
            "optimizer_backend": self.optimizer_backend.to_dict(),
            "runner_backend": self.runner_backend.to_dict(),
            "output_dir": self.output_dir,
            "chunks": self.chunks,
            "top_k_values": list(self.top_k_values),
            "iou_thresholds": list(self.iou_thresholds),
            "pass_subset": list(self.pass_subset) if self.pass_subset is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        subset = data.get("pass_subset")
        return cls(
            models=tuple(ModelDescriptor.from_dict(m) for m in data.get("models", ())),
            dataset=DatasetSpec.from_dict(data["dataset"]),
            optimizer_backend=BackendSpec.from_dict(data["optimizer_backend"]),
            runner_backend=BackendSpec.from_dict(data["runner_backend"]),
            output_dir=data["output_dir"],
            chunks=data.get("chunks", 1),
            top_k_values=tuple(data.get("top_k_values", (1, 5, 10))),
            iou_thresholds=tuple(data.get("iou_thresholds", (0.5, 0.75, 0.9))),
            pass_subset=tuple(subset) if subset is not None else None,
        )


# ---------------------------------------------------------------------------
# Optimizer values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PassSpec:
    """One named optimization pass, the unit of fault attribution"""
    name: str
    category: PassCategory
    in_default_bundle: bool = False
    known_unstable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "category", PassCategory(self.category))
        _require(bool(self.name), "pass name must not be empty")
        if self.in_default_bundle:
            _require(self.category in (PassCategory.FUSE, PassCategory.ELIMINATE),
                     f"default-bundle pass {self.name} must be fuse or eliminate, not {self.category.value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "category": self.category.value,
            "in_default_bundle": self.in_default_bundle,
            "known_unstable": self.known_unstable,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PassSpec":
        return cls(
            name=data["name"],
            category=PassCategory(data["category"]),
            in_default_bundle=bool(data.get("in_default_bundle", False)),
            known_unstable=bool(data.get("known_unstable", False)),
        )


@dataclass(frozen=True)
class ModelArtifact:
    """Opaque handle on a model file; backends interpret the bytes"""
    path: str
    byte_length: int
    digest: str

    def to_dict(self) -> Dict[str, Any]:
        return {"path": self.path, "byte_length": self.byte_length, "digest": self.digest}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelArtifact":
        return cls(**data)


@dataclass(frozen=True)
class OptimizationResult:
    status: OptimizationStatus
    optimized_model: Optional[ModelArtifact] = None
    diagnostics: str = ""
    applied_passes: Tuple[str, ...] = ()
    ir_version_before: Optional[int] = None
    ir_version_after: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "status", OptimizationStatus(self.status))
        object.__setattr__(self, "applied_passes", tuple(self.applied_passes))
        if self.status is OptimizationStatus.OK:
            _require(self.optimized_model is not None, "status ok requires an optimized model")
        else:
            _require(bool(self.diagnostics), "status crashed requires diagnostics")

    @property
    def ok(self) -> bool:
        return self.status is OptimizationStatus.OK

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status.value,
            "optimized_model": self.optimized_model.to_dict() if self.optimized_model else None,
            "diagnostics": self.diagnostics,
            "applied_passes": list(self.applied_passes),
            "ir_version_before": self.ir_version_before,
            "ir_version_after": self.ir_version_after,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimizationResult":
        model = data.get("optimized_model")
        return cls(
            status=OptimizationStatus(data["status"]),
            optimized_model=ModelArtifact.from_dict(model) if model else None,
            diagnostics=data.get("diagnostics", ""),
            applied_passes=tuple(data.get("applied_passes", ())),
            ir_version_before=data.get("ir_version_before"),
            ir_version_after=data.get("ir_version_after"),
        )


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    reasons: Tuple[str, ...] = ()

    @classmethod
    def ok(cls) -> "ValidationResult":
        return cls(valid=True)

    @classmethod
    def malformed(cls, reasons: Iterable[str]) -> "ValidationResult":
        reasons = tuple(r for r in reasons if r) or ("malformed model",)
        return cls(valid=False, reasons=reasons)

    def to_dict(self) -> Dict[str, Any]:
        return {"valid": self.valid, "reasons": list(self.reasons)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ValidationResult":
        return cls(valid=bool(data["valid"]), reasons=tuple(data.get("reasons", ())))


@dataclass(frozen=True)
class VersionChangeWarning:
    before: int
    after: int

    def __str__(self) -> str:
        return f"Implicit format version update: v{self.before} -> v{self.after}"

    def to_dict(self) -> Dict[str, Any]:
        return {"before": self.before, "after": self.after}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VersionChangeWarning":
        return cls(before=int(data["before"]), after=int(data["after"]))


# ---------------------------------------------------------------------------
# Inference payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankedLabels:
    """Labels sorted by score descending, ties broken by ascending label"""
    labels: Tuple[int, ...]
    scores: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        _require(len(self.labels) == len(self.scores), "labels and scores must align")
        for (l1, s1), (l2, s2) in zip(zip(self.labels, self.scores), zip(self.labels[1:], self.scores[1:])):
            _require(s1 > s2 or (s1 == s2 and l1 < l2),
                     "ranked labels must be sorted by score descending, ties by label")

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "RankedLabels":
        order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
        return cls(labels=tuple(order), scores=tuple(float(scores[i]) for i in order))

    def top(self, k: int) -> Tuple[int, ...]:
        return self.labels[:k]


@dataclass(frozen=True)
class Detection:
    label: int
    score: float
    box: Tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        _require(len(self.box) == 4, "box must have four corner coordinates")
        x1, y1, x2, y2 = self.box
        _require(x1 <= x2 and y1 <= y2, f"box corners out of order: {self.box}")


@dataclass(frozen=True)
class Detections:
    items: Tuple[Detection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def ranked_labels(self) -> RankedLabels:
        """Detection labels ordered by score, keeping one entry per label"""
        best: Dict[int, float] = {}
        for det in self.items:
            best[det.label] = max(best.get(det.label, -math.inf), det.score)
        order = sorted(best, key=lambda label: (-best[label], label))
        return RankedLabels(labels=tuple(order), scores=tuple(best[l] for l in order))


@dataclass(frozen=True)
class GeneratedText:
    text: str


@dataclass(frozen=True)
class AnswerTensor:
    shape: Tuple[int, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _require(math.prod(self.shape) == len(self.values), "tensor values do not match shape")


@dataclass(frozen=True)
class BinaryLabel:
    value: int

    def __post_init__(self):
        _require(self.value in (0, 1), f"binary label must be 0 or 1, got {self.value}")


@dataclass(frozen=True)
class ErrorPayload:
    """Per-input inference failure; the run continues"""
    message: str


Payload = Union[RankedLabels, Detections, GeneratedText, AnswerTensor, BinaryLabel, ErrorPayload]


def payload_to_dict(payload: Payload) -> Dict[str, Any]:
    if isinstance(payload, RankedLabels):
        return {"kind": "ranked_labels", "labels": list(payload.labels), "scores": list(payload.scores)}
    if isinstance(payload, Detections):
        return {"kind": "detections", "items": [
            {"label": d.label, "score": d.score, "box": list(d.box)} for d in payload.items
        ]}
    if isinstance(payload, GeneratedText):
        return {"kind": "text", "text": payload.text}
    if isinstance(payload, AnswerTensor):
        return {"kind": "tensor", "shape": list(payload.shape), "values": list(payload.values)}
    if isinstance(payload, BinaryLabel):
        return {"kind": "binary", "value": payload.value}
    if isinstance(payload, ErrorPayload):
        return {"kind": "error", "message": payload.message}
    raise InvariantError(f"Unknown payload type: {type(payload).__name__}")


def payload_from_dict(data: Dict[str, Any]) -> Payload:
    kind = data.get("kind")
    if kind == "ranked_labels":
        return RankedLabels(labels=tuple(data["labels"]), scores=tuple(data["scores"]))
    if kind == "detections":
        return Detections(items=tuple(
            Detection(label=d["label"], score=d["score"], box=tuple(d["box"])) for d in data["items"]
        ))
    if kind == "text":
        return GeneratedText(text=data["text"])
    if kind == "tensor":
        return AnswerTensor(shape=tuple(data["shape"]), values=tuple(data["values"]))
    if kind == "binary":
        return BinaryLabel(value=int(data["value"]))
    if kind == "error":
        return ErrorPayload(message=data["message"])
    raise InvariantError(f"Unknown payload kind: {kind!r}")


@dataclass(frozen=True)
class InferenceRecord:
    input_id: str
    payload: Payload
    runtime_warnings: Tuple[str, ...] = ()
    wall_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "runtime_warnings", tuple(self.runtime_warnings))

    def same_payload(self, other: "InferenceRecord") -> bool:
        return self.input_id == other.input_id and self.payload == other.payload

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_id": self.input_id,
            "payload": payload_to_dict(self.payload),
            "runtime_warnings": list(self.runtime_warnings),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InferenceRecord":
        return cls(
            input_id=data["input_id"],
            payload=payload_from_dict(data["payload"]),
            runtime_warnings=tuple(data.get("runtime_warnings", ())),
            wall_time=float(data.get("wall_time", 0.0)),
        )


@dataclass(frozen=True)
class ComparisonRecord:
    input_id: str
    metrics: Dict[str, float]
    diverged: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"input_id": self.input_id, "metrics": dict(sorted(self.metrics.items())),
                "diverged": self.diverged}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ComparisonRecord":
        return cls(input_id=data["input_id"], metrics=dict(data["metrics"]), diverged=bool(data["diverged"]))


# ---------------------------------------------------------------------------
# Outcomes and fault reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Outcome:
    """
    Primary outcome class plus warning flags

    Flags coexist with CLEAN or DIVERGENT, never with crash classes. A CLEAN
    outcome carrying flags counts as WARNING for attribution purposes.
    """
    primary: OutcomeClass
    flags: FrozenSet[WarningFlag] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "primary", OutcomeClass(self.primary))
        object.__setattr__(self, "flags", frozenset(WarningFlag(f) for f in self.flags))
        _require(self.primary is not OutcomeClass.WARNING,
                 "WARNING is a flag set, use CLEAN with flags")
        if self.primary.is_crash:
            _require(not self.flags, "crash outcomes cannot carry warning flags")

    @property
    def effective(self) -> OutcomeClass:
        if self.primary is OutcomeClass.CLEAN and self.flags:
            return OutcomeClass.WARNING
        return self.primary

    @property
    def is_clean(self) -> bool:
        return self.effective is OutcomeClass.CLEAN

    def to_dict(self) -> Dict[str, Any]:
        return {"primary": self.primary.value, "flags": sorted(f.value for f in self.flags)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Outcome":
        return cls(primary=OutcomeClass(data["primary"]), flags=frozenset(data.get("flags", ())))


@dataclass(frozen=True)
class Evidence:
    diverged_inputs: Tuple[str, ...] = ()
    diagnostics: str = ""
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "diverged_inputs", tuple(self.diverged_inputs))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def is_empty(self) -> bool:
        return not (self.diverged_inputs or self.diagnostics or self.warnings)

    def summary(self, limit: int = 80) -> str:
        if self.diagnostics:
            text = self.diagnostics.strip().splitlines()[0] if self.diagnostics.strip() else ""
        elif self.diverged_inputs:
            text = f"{len(self.diverged_inputs)} diverged input(s)"
        elif self.warnings:
            text = self.warnings[0]
        else:
            text = ""
        return text if len(text) <= limit else text[: limit - 3] + "..."

    def to_dict(self) -> Dict[str, Any]:
        return {
            "diverged_inputs": list(self.diverged_inputs),
            "diagnostics": self.diagnostics,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Evidence":
        return cls(
            diverged_inputs=tuple(data.get("diverged_inputs", ())),
            diagnostics=data.get("diagnostics", ""),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass(frozen=True)
class PassOutcome:
    """Sweep result for one pass applied alone to the original model"""
    category: PassCategory
    known_unstable: bool
    outcome: Outcome
    evidence: Evidence = field(default_factory=Evidence)

    def __post_init__(self):
        object.__setattr__(self, "category", PassCategory(self.category))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "category": self.category.value,
            "known_unstable": self.known_unstable,
            "outcome": self.outcome.to_dict(),
            "evidence": self.evidence.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PassOutcome":
        return cls(
            category=PassCategory(data["category"]),
            known_unstable=bool(data["known_unstable"]),
            outcome=Outcome.from_dict(data["outcome"]),
            evidence=Evidence.from_dict(data.get("evidence", {})),
        )


def attribution_of(per_pass: Dict[str, PassOutcome]) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    """
    Split non-clean passes into (attributed, excluded)

    Args:
        per_pass: Ordered sweep outcomes keyed by pass name

    Returns:
        Attributed (stable) and excluded (known-unstable) pass names, in sweep order
    """
    attributed = tuple(n for n, p in per_pass.items() if not p.outcome.is_clean and not p.known_unstable)
    excluded = tuple(n for n, p in per_pass.items() if not p.outcome.is_clean and p.known_unstable)
    return attributed, excluded


@dataclass(frozen=True)
class FaultReport:
    model_id: str
    trigger: Outcome
    trigger_evidence: Evidence
    per_pass: Dict[str, PassOutcome]
    attributed_passes: Tuple[str, ...]
    excluded_passes: Tuple[str, ...]
    incomplete: bool = False
    failed_pass_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "attributed_passes", tuple(self.attributed_passes))
        object.__setattr__(self, "excluded_passes", tuple(self.excluded_passes))
        attributed, excluded = attribution_of(self.per_pass)
        _require(self.attributed_passes == attributed,
                 "attributed_passes must be exactly the stable non-clean passes")
        _require(self.excluded_passes == excluded,
                 "excluded_passes must be exactly the known-unstable non-clean passes")
        _require(self.incomplete or self.failed_pass_index is None,
                 "failed_pass_index is only set on incomplete reports")

    @classmethod
    def assemble(cls, model_id: str, trigger: Outcome, trigger_evidence: Evidence,
                 per_pass: Dict[str, PassOutcome], incomplete: bool = False,
                 failed_pass_index: Optional[int] = None) -> "FaultReport":
        attributed, excluded = attribution_of(per_pass)
        return cls(model_id=model_id, trigger=trigger, trigger_evidence=trigger_evidence,
                   per_pass=dict(per_pass), attributed_passes=attributed, excluded_passes=excluded,
                   incomplete=incomplete, failed_pass_index=failed_pass_index)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model_id": self.model_id,
            "trigger": {"outcome": self.trigger.to_dict(), "evidence": self.trigger_evidence.to_dict()},
            "per_pass": [dict(name=name, **entry.to_dict()) for name, entry in self.per_pass.items()],
            "attributed_passes": list(self.attributed_passes),
            "excluded_passes": list(self.excluded_passes),
            "incomplete": self.incomplete,
            "failed_pass_index": self.failed_pass_index,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FaultReport":
        per_pass = {}
        for row in data["per_pass"]:
            row = dict(row)
            per_pass[row.pop("name")] = PassOutcome.from_dict(row)
        return cls(
            model_id=data["model_id"],
            trigger=Outcome.from_dict(data["trigger"]["outcome"]),
            trigger_evidence=Evidence.from_dict(data["trigger"].get("evidence", {})),
            per_pass=per_pass,
            attributed_passes=tuple(data["attributed_passes"]),
            excluded_passes=tuple(data["excluded_passes"]),
            incomplete=bool(data.get("incomplete", False)),
            failed_pass_index=data.get("failed_pass_index"),
        )


def records_by_id(records: Iterable[InferenceRecord]) -> Dict[str, InferenceRecord]:
    return {r.input_id: r for r in records}


def input_ids(records: Iterable[InferenceRecord]) -> List[str]:
    return [r.input_id for r in records]
