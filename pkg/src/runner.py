"""
Runner Module
Executes original and optimized models over a dataset in N chunks through an
inference backend, with task-specific pre/post-processing and runtime-warning capture.
"""

import json
import logging
import re
import subprocess
import tempfile
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from src.core_types import InferenceRecord, ModelArtifact, PreprocessConfig, RankedLabels, Task
from src.errors import BackendUnavailable, InvariantError, RunCrash
from src.orchestrator import Dataset, DatasetInput

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0

UNUSED_INITIALIZER = re.compile(
    r"Removing initializer ['\"]?(?P<name>[^'\"]+?)['\"]?\.\s*It is not used by any node"
)
WARNING_LINE = re.compile(r"warn|\[W:", re.IGNORECASE)
# "2026-10-18 09:14:03.512 [W:onnxruntime:, graph.cc:3490 CleanUnusedInitializers] "
LOG_PREFIX = re.compile(r"^\s*(?:\d{4}-\d{2}-\d{2}[ T][\d:.]+\s*)?(?:\[[A-Z]:[^\]]*\]\s*)?")


@dataclass(frozen=True)
class ChunkRange:
    index: int
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


def plan_chunks(dataset_len: int, n: int) -> List[ChunkRange]:
    """
    Split [0, dataset_len) into N contiguous chunks

    Every chunk but the last holds floor(len/N) inputs; the remainder goes
    to the final chunk.

    Args:
        dataset_len: Number of inputs
        n: Chunk count (>= 1)

    Returns:
        Chunk ranges in order; empty when dataset_len is 0
    """
    if n < 1:
        raise InvariantError(f"chunk count must be >= 1, got {n}")
    if dataset_len <= 0:
        return []
    size = dataset_len // n
    chunks = []
    for index in range(n):
        start = index * size
        end = dataset_len if index == n - 1 else start + size
        chunks.append(ChunkRange(index=index, start=start, end=end))
    return chunks


# ---------------------------------------------------------------------------
# Pre/post-processing
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.asarray(logits, dtype=np.float64) - np.max(logits)
    exp = np.exp(shifted)
    return exp / exp.sum()


def rank_scores(scores: Sequence[float], outputs_logits: bool = False) -> RankedLabels:
    """Full ranked label list, softmax-normalized when the model emits logits"""
    values = np.asarray(scores, dtype=np.float64).ravel()
    if outputs_logits:
        values = softmax(values)
    return RankedLabels.from_scores(values.tolist())


def preprocess_image(path: str, cfg: PreprocessConfig) -> np.ndarray:
    """
    Decode and normalize one image into a batched float32 tensor

    Args:
        path: Image file
        cfg: Target size, channel order, mean/std, layout and resize policy

    Returns:
        Array shaped (1, C, H, W) or (1, H, W, C)
    """
    with Image.open(path) as img:
        img = img.convert("L" if cfg.channel_order == "L" else "RGB")
        if cfg.resize == "center_crop":
            scale = max(cfg.width / img.width, cfg.height / img.height)
            resized = img.resize((max(cfg.width, round(img.width * scale)),
                                  max(cfg.height, round(img.height * scale))), Image.BILINEAR)
            left = (resized.width - cfg.width) // 2
            top = (resized.height - cfg.height) // 2
            img = resized.crop((left, top, left + cfg.width, top + cfg.height))
        else:
            img = img.resize((cfg.width, cfg.height), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    if cfg.channel_order == "BGR":
        array = array[:, :, ::-1]
    array = array * np.float32(cfg.scale)
    array = (array - np.asarray(cfg.mean, dtype=np.float32)) / np.asarray(cfg.std, dtype=np.float32)
    if cfg.layout == "NCHW":
        array = array.transpose(2, 0, 1)
    return np.ascontiguousarray(array[None, ...], dtype=np.float32)


def greedy_generate(step: Callable[[List[int]], np.ndarray], prompt_ids: Sequence[int],
                    eos_id: Optional[int], max_new_tokens: int = 64,
                    window: Optional[int] = None) -> List[int]:
    """
    Greedy next-token generation over a sliding context window

    Args:
        step: Maps the current context ids to next-token logits
        prompt_ids: Tokenized prompt
        eos_id: End-of-sequence token; generation stops when produced
        max_new_tokens: Upper bound on generated tokens
        window: Context length fed to step (full context when None)

    Returns:
        Generated token ids, excluding the prompt and the stop token
    """
    context = list(prompt_ids)
    generated: List[int] = []
    for _ in range(max_new_tokens):
        feed = context[-window:] if window else context
        # argmax takes the lowest id on ties
        token = int(np.argmax(np.asarray(step(feed)).ravel()))
        if eos_id is not None and token == eos_id:
            break
        generated.append(token)
        context.append(token)
    return generated


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class InferenceBackend(ABC):
    """Runs one model over a batch of inputs"""

    id: str = "runner"

    @abstractmethod
    def run_batch(self, model: ModelArtifact, inputs: Sequence[DatasetInput], task: Task,
                  preprocess: PreprocessConfig) -> List[InferenceRecord]:
        """
        Run a batch; one record per input, in input order

        Raises:
            RunCrash: If the backend crashes or cannot load the model
        """


class AdapterRunnerBackend(InferenceBackend):
    """
    Inference through an external adapter program

    Grammar: --model <path> --inputs <batch-file> --task <enum> --out <records-file>
    [--preprocess <json-file>]. The batch file holds one JSON object per line
    (input id, resolved location, text fields); the records file is a JSON
    array of inference records. Warning lines on stderr are attached to every
    record of the batch.
    """

    id = "adapter"

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_TIMEOUT):
        if not command:
            raise BackendUnavailable("no runner adapter command configured")
        self.command = list(command)
        self.timeout = timeout

    def run_batch(self, model: ModelArtifact, inputs: Sequence[DatasetInput], task: Task,
                  preprocess: PreprocessConfig) -> List[InferenceRecord]:
        with tempfile.TemporaryDirectory(prefix="difftox-run-") as tmp:
            tmp_dir = Path(tmp)
            batch = tmp_dir / "batch.jsonl"
            batch.write_text("".join(json.dumps(i.to_dict()) + "\n" for i in inputs), encoding="utf-8")
            prep = tmp_dir / "preprocess.json"
            prep.write_text(json.dumps(preprocess.to_dict()), encoding="utf-8")
            out = tmp_dir / "records.json"
            args = ["--model", model.path, "--inputs", str(batch), "--task", task.value,
                    "--out", str(out), "--preprocess", str(prep)]
            try:
                proc = subprocess.run(self.command + args, capture_output=True, timeout=self.timeout)
            except subprocess.TimeoutExpired:
                raise RunCrash("timeout")
            except (FileNotFoundError, PermissionError) as e:
                raise BackendUnavailable(f"runner adapter cannot be started: {e}")
            stderr = proc.stderr.decode("utf-8", errors="backslashreplace")
            if proc.returncode != 0:
                raise RunCrash(stderr or f"runner exited with code {proc.returncode}")
            try:
                records = [InferenceRecord.from_dict(r) for r in json.loads(out.read_text(encoding="utf-8"))]
            except (OSError, ValueError, KeyError) as e:
                raise RunCrash(f"runner wrote unreadable records: {e}\n{stderr}")
        warnings = tuple(line for line in stderr.splitlines() if WARNING_LINE.search(line))
        if warnings:
            records = [InferenceRecord(r.input_id, r.payload, r.runtime_warnings + warnings, r.wall_time)
                       for r in records]
        return records


def run_inference(backend: InferenceBackend, model: ModelArtifact, dataset: Dataset, chunk: ChunkRange,
                  preprocess: PreprocessConfig, task: Task) -> List[InferenceRecord]:
    """
    Run one chunk of the dataset through a model

    Returns:
        One record per input in the chunk, in dataset order

    Raises:
        RunCrash: Backend crash or model load failure (evidence, not a framework bug)
    """
    inputs = dataset.inputs[chunk.start:chunk.end]
    if not inputs:
        return []
    started = time.perf_counter()
    records = backend.run_batch(model, inputs, task, preprocess)
    wanted = [i.input_id for i in inputs]
    got = {r.input_id: r for r in records}
    missing = [i for i in wanted if i not in got]
    if missing:
        raise RunCrash(f"runner returned no record for {len(missing)} input(s), first: {missing[0]}")
    logger.debug(f"chunk {chunk.index} [{chunk.start}, {chunk.end}) done in {time.perf_counter() - started:.2f}s")
    return [got[i] for i in wanted]


@dataclass(frozen=True)
class RunResult:
    """Records of a full dataset run, or the crash that stopped it"""
    records: Tuple[InferenceRecord, ...] = ()
    crash: Optional[str] = None

    @property
    def crashed(self) -> bool:
        return self.crash is not None


def run_dataset(backend: InferenceBackend, model: ModelArtifact, dataset: Dataset, chunks: int,
                preprocess: PreprocessConfig, task: Task, workers: int = 1) -> RunResult:
    """
    Run every chunk and merge records by input id into dataset order

    Args:
        chunks: Chunk count N
        workers: Chunks executed in parallel

    Returns:
        RunResult; the first RunCrash in any chunk becomes the run's crash
    """
    plan = [c for c in plan_chunks(len(dataset), chunks) if len(c)]
    merged: Dict[str, InferenceRecord] = {}
    try:
        if workers > 1 and len(plan) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda c: run_inference(backend, model, dataset, c, preprocess, task), plan))
        else:
            results = [run_inference(backend, model, dataset, c, preprocess, task) for c in plan]
    except RunCrash as e:
        logger.warning(f"❌ Run crash on {Path(model.path).name}: {str(e)[:120]}")
        return RunResult(crash=e.diagnostics)
    for chunk_records in results:
        for record in chunk_records:
            merged[record.input_id] = record
    return RunResult(records=tuple(merged[i] for i in dataset.ids()))


class WarningKind(str, Enum):
    UNUSED_INITIALIZER = "UNUSED_INITIALIZER"
    OTHER = "OTHER"


@dataclass(frozen=True)
class ParsedWarning:
    input_id: str
    warning_kind: WarningKind
    raw: str
    initializer: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str]:
        """Identity of the warning independent of timestamp and logger prefix"""
        if self.warning_kind is WarningKind.UNUSED_INITIALIZER and self.initializer:
            return self.warning_kind.value, self.initializer
        return self.warning_kind.value, LOG_PREFIX.sub("", self.raw).strip()


def parse_runtime_warnings(records: Sequence[InferenceRecord]) -> List[ParsedWarning]:
    """Classify every runtime warning line; raw text is preserved"""
    parsed = []
    for record in records:
        for raw in record.runtime_warnings:
            match = UNUSED_INITIALIZER.search(raw)
            if match:
                parsed.append(ParsedWarning(record.input_id, WarningKind.UNUSED_INITIALIZER, raw,
                                            match.group("name")))
            else:
                parsed.append(ParsedWarning(record.input_id, WarningKind.OTHER, raw))
    return parsed
