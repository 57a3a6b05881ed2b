"""
Model Orchestrator
Loads local models, fetches hub models through a checksum-verified cache,
reads run configurations and materializes datasets.
"""

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple
from urllib.parse import urljoin

import requests
from PIL import Image, UnidentifiedImageError

from src.config import get_config
from src.core_types import (
    HEX_DIGEST, BackendSpec, ComparatorConfig, DatasetKind, DatasetSpec, HubSource,
    LocalSource, ModelArtifact, ModelDescriptor, PreprocessConfig, RunConfig, Task,
)
from src.errors import (
    ChecksumMismatch, ConfigError, EmptyDataset, HubUnavailable, InvalidArtifact,
    InvariantError, ModelNotInHub, NotFound,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CHUNK_BYTES = 1 << 16
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

RUN_CONFIG_KEYS = {
    "models", "dataset", "chunks", "top_k_values", "iou_thresholds",
    "optimizer_backend", "runner_backend", "output_dir", "pass_subset",
}
MODEL_KEYS = {"id", "task", "opset", "source", "checksum", "preprocess", "comparator_config"}


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_BYTES), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_local_model(path: str) -> ModelArtifact:
    """
    Load a model file from disk as an opaque artifact

    Args:
        path: Model file path

    Returns:
        Artifact with byte length and SHA-256 digest

    Raises:
        NotFound: If the file does not exist
        InvalidArtifact: If the file is unreadable or empty
    """
    model_path = Path(path)
    if not model_path.exists():
        raise NotFound(f"model file not found: {path}")
    try:
        size = model_path.stat().st_size
        if size == 0:
            raise InvalidArtifact(f"model file is empty: {path}")
        digest = sha256_file(model_path)
    except (OSError, IsADirectoryError) as e:
        raise InvalidArtifact(f"model file unreadable: {path}: {e}")
    return ModelArtifact(path=str(model_path.resolve()), byte_length=size, digest=digest)


# ---------------------------------------------------------------------------
# Hub access
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HubManifestEntry:
    model_name: str
    opset: int
    download_url: str
    checksum: str
    file_bytes: int

    def __post_init__(self):
        if len(self.checksum) != 64 or not HEX_DIGEST.match(self.checksum):
            raise InvariantError(f"manifest checksum for {self.model_name} is not a 64-hex digest")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], hub_base: str) -> "HubManifestEntry":
        return cls(
            model_name=data["model_name"],
            opset=int(data["opset"]),
            download_url=urljoin(_with_slash(hub_base), data["download_url"]),
            checksum=str(data["checksum"]).lower(),
            file_bytes=int(data.get("file_bytes", 0)),
        )


def _with_slash(url: str) -> str:
    return url if url.endswith("/") else url + "/"


def _get_with_retry(url: str, stream: bool = False) -> requests.Response:
    config = get_config()
    attempts = max(1, config.get_retry_attempts())
    for attempt in range(attempts):
        try:
            response = requests.get(url, timeout=config.get_request_timeout(), stream=stream)
            response.raise_for_status()
            return response
        except requests.RequestException as e:
            logger.warning(f"⚠️ Hub request failed (attempt {attempt + 1}/{attempts}): {url}: {e}")
            if attempt < attempts - 1:
                time.sleep(2 ** attempt)
            else:
                raise HubUnavailable(f"hub unreachable after {attempts} attempts: {url}: {e}")


def read_hub_manifest(hub_base: str) -> List[HubManifestEntry]:
    """
    Fetch and parse the hub manifest

    Args:
        hub_base: Base URL of a hub serving manifest.json

    Returns:
        List of manifest entries

    Raises:
        HubUnavailable: If the manifest cannot be fetched or parsed
    """
    if not hub_base:
        raise HubUnavailable("no hub base URL configured")
    response = _get_with_retry(urljoin(_with_slash(hub_base), MANIFEST_NAME))
    try:
        raw = response.json()
        return [HubManifestEntry.from_dict(item, hub_base) for item in raw]
    except (ValueError, KeyError, TypeError) as e:
        raise HubUnavailable(f"hub manifest is malformed: {e}")


def resolve_manifest_entry(entries: Sequence[HubManifestEntry], name: str,
                           opset: Optional[int] = None) -> HubManifestEntry:
    """Pick the entry for (name, opset); the highest opset wins when opset is None"""
    candidates = [e for e in entries if e.model_name == name and (opset is None or e.opset == opset)]
    if not candidates:
        wanted = f"{name} (opset {opset})" if opset is not None else name
        raise ModelNotInHub(f"model not in hub: {wanted}")
    if opset is None:
        return max(candidates, key=lambda e: e.opset)
    if len(candidates) > 1:
        logger.warning(f"⚠️ {len(candidates)} manifest entries for {name} opset {opset}, using the first")
    return candidates[0]


class ModelCache:
    """
    Content-addressed model cache

    Layout: <root>/<model_name>/<opset>/<digest>.model plus a <digest>.json
    sidecar. Entries are never evicted or overwritten; a different digest
    under the same name lands in a separate file.
    """

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else get_config().get_cache_dir()
        self._locks: Dict[Tuple[str, int, str], threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.downloads = 0

    def lock_for(self, key: Tuple[str, int, str]) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def path_for(self, entry: HubManifestEntry) -> Path:
        return self.root / entry.model_name / str(entry.opset) / f"{entry.checksum}.model"

    def lookup(self, entry: HubManifestEntry) -> Optional[ModelArtifact]:
        path = self.path_for(entry)
        if path.exists() and sha256_file(path) == entry.checksum:
            return load_local_model(str(path))
        if path.exists():
            logger.warning(f"⚠️ Cached file {path} fails verification, refetching")
            path.unlink()
        return None

    def store(self, entry: HubManifestEntry, response: requests.Response) -> ModelArtifact:
        path = self.path_for(entry)
        path.parent.mkdir(parents=True, exist_ok=True)
        partial = path.with_suffix(".part")
        digest = hashlib.sha256()
        with open(partial, "wb") as f:
            for chunk in response.iter_content(chunk_size=CHUNK_BYTES):
                if chunk:
                    f.write(chunk)
                    digest.update(chunk)
        self.downloads += 1
        actual = digest.hexdigest()
        if actual != entry.checksum:
            partial.unlink(missing_ok=True)
            raise ChecksumMismatch(entry.model_name, entry.checksum, actual)
        os.replace(partial, path)
        sidecar = {
            "model_name": entry.model_name,
            "opset": entry.opset,
            "checksum": entry.checksum,
            "download_url": entry.download_url,
            "file_bytes": entry.file_bytes,
            "fetched_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return load_local_model(str(path))


def fetch_hub_model(name: str, opset: Optional[int] = None, hub_base: Optional[str] = None,
                    cache: Optional[ModelCache] = None,
                    manifest: Optional[Sequence[HubManifestEntry]] = None) -> ModelArtifact:
    """
    Fetch a hub model through the local cache

    Args:
        name: Model name in the hub manifest
        opset: Wanted opset; highest available when None
        hub_base: Hub base URL (defaults to settings)
        cache: Cache instance (defaults to the configured cache root)
        manifest: Already-fetched manifest entries, to avoid refetching

    Returns:
        Verified cached artifact

    Raises:
        HubUnavailable, ModelNotInHub, ChecksumMismatch
    """
    hub_base = hub_base or get_config().get_hub_base_url()
    cache = cache or ModelCache()
    entries = manifest if manifest is not None else read_hub_manifest(hub_base)
    entry = resolve_manifest_entry(entries, name, opset)
    with cache.lock_for((entry.model_name, entry.opset, entry.checksum)):
        cached = cache.lookup(entry)
        if cached is not None:
            logger.info(f"✅ Cache hit for {name} (opset {entry.opset})")
            return cached
        logger.info(f"Downloading {name} (opset {entry.opset}) from {entry.download_url}")
        response = _get_with_retry(entry.download_url, stream=True)
        artifact = cache.store(entry, response)
        logger.info(f"✅ Fetched {name} (opset {entry.opset}), {artifact.byte_length} bytes")
        return artifact


def fetch_hub_models(wanted: Sequence[Tuple[str, Optional[int]]], hub_base: Optional[str] = None,
                     cache: Optional[ModelCache] = None, workers: Optional[int] = None) -> List[ModelArtifact]:
    """Fetch several hub models concurrently; results follow request order"""
    hub_base = hub_base or get_config().get_hub_base_url()
    cache = cache or ModelCache()
    workers = workers or get_config().get_fetch_workers()
    manifest = read_hub_manifest(hub_base)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(fetch_hub_model, name, opset, hub_base, cache, manifest)
                   for name, opset in wanted]
        return [f.result() for f in futures]


def resolve_model(model: ModelDescriptor, cache: Optional[ModelCache] = None,
                  hub_base: Optional[str] = None) -> ModelArtifact:
    """Materialize a descriptor's source as an artifact, checking the pinned checksum"""
    if isinstance(model.source, LocalSource):
        artifact = load_local_model(model.source.path)
    else:
        artifact = fetch_hub_model(model.source.name, model.source.opset or model.opset,
                                   hub_base=hub_base, cache=cache)
    if model.checksum and artifact.digest != model.checksum:
        raise ChecksumMismatch(model.id, model.checksum, artifact.digest)
    return artifact


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _resolve_path(base: Path, value: str) -> str:
    path = Path(value).expanduser()
    return str(path if path.is_absolute() else (base / path).resolve())


def _parse_model(data: Dict[str, Any], base: Path, top_k: Sequence[int],
                 thresholds: Sequence[float]) -> ModelDescriptor:
    unknown = set(data) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model keys: {', '.join(sorted(unknown))}")
    try:
        task = Task(data["task"])
    except ValueError:
        valid = ", ".join(t.value for t in Task)
        raise ConfigError(f"unknown task {data['task']!r} for model {data.get('id')}; valid tasks: {valid}")
    source = data.get("source", {})
    if source.get("type") == "local":
        source_value = LocalSource(path=_resolve_path(base, source["path"]))
    elif source.get("type") == "hub":
        source_value = HubSource(name=source["name"], opset=source.get("opset", data.get("opset")))
    else:
        raise ConfigError(f"model {data.get('id')} needs a source of type 'local' or 'hub'")
    comparator = {"top_k_values": list(top_k), "iou_thresholds": list(thresholds)}
    comparator.update(data.get("comparator_config", {}))
    preprocess = {"max_new_tokens": get_config().get_max_new_tokens()}
    preprocess.update(data.get("preprocess", {}))
    return ModelDescriptor(
        id=data["id"],
        task=task,
        opset=data["opset"],
        source=source_value,
        checksum=data.get("checksum"),
        preprocess=PreprocessConfig.from_dict(preprocess),
        comparator_config=ComparatorConfig.from_dict(comparator),
    )


def load_run_config(path: str, valid_passes: Optional[Sequence[str]] = None) -> RunConfig:
    """
    Load a run configuration file

    Args:
        path: JSON file whose keys match RunConfig fields
        valid_passes: Registry pass names used to check pass_subset

    Returns:
        RunConfig with defaults filled in

    Raises:
        NotFound: If the file is missing
        ConfigError: On unknown keys, unknown tasks, invalid values or unknown passes
    """
    config_path = Path(path)
    if not config_path.exists():
        raise NotFound(f"run config not found: {path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    unknown = set(data) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    base = config_path.parent.resolve()
    try:
        top_k = tuple(data.get("top_k_values", (1, 5, 10)))
        thresholds = tuple(data.get("iou_thresholds", (0.5, 0.75, 0.9)))
        dataset = dict(data["dataset"])
        if not dataset.get("split"):
            dataset["location"] = _resolve_path(base, dataset["location"])
        run_config = RunConfig(
            models=tuple(_parse_model(m, base, top_k, thresholds) for m in data.get("models", [])),
            dataset=DatasetSpec.from_dict(dataset),
            optimizer_backend=BackendSpec.from_dict(data.get("optimizer_backend", {"id": "adapter"})),
            runner_backend=BackendSpec.from_dict(data.get("runner_backend", {"id": "adapter"})),
            output_dir=_resolve_path(base, data.get("output_dir", "results")),
            chunks=data.get("chunks", 1),
            top_k_values=top_k,
            iou_thresholds=thresholds,
            pass_subset=tuple(data["pass_subset"]) if data.get("pass_subset") is not None else None,
        )
    except (InvariantError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid run config {path}: {e}")
    if valid_passes is not None:
        check_pass_subset(run_config, valid_passes)
    logger.info(f"Loaded run config {path}: {len(run_config.models)} model(s), N={run_config.chunks}")
    return run_config


def check_pass_subset(run_config: RunConfig, valid_passes: Sequence[str]):
    if run_config.pass_subset is None:
        return
    unknown = [p for p in run_config.pass_subset if p not in set(valid_passes)]
    if unknown:
        raise ConfigError(
            f"unknown pass(es) in pass_subset: {', '.join(unknown)}; valid passes: {', '.join(valid_passes)}"
        )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetInput:
    """One raw input: a file location and/or named text fields"""
    input_id: str
    location: Optional[str] = None
    fields: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"input_id": self.input_id, "location": self.location, "fields": dict(self.fields)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetInput":
        return cls(input_id=data["input_id"], location=data.get("location"), fields=dict(data.get("fields", {})))


@dataclass(frozen=True)
class Dataset:
    """Ordered, read-only sequence of inputs (lexicographic by input id)"""
    spec: DatasetSpec
    inputs: Tuple[DatasetInput, ...]
    warnings: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.inputs)

    def __iter__(self) -> Iterator[DatasetInput]:
        return iter(self.inputs)

    def __getitem__(self, index):
        return self.inputs[index]

    def ids(self) -> List[str]:
        return [i.input_id for i in self.inputs]

    def subset(self, wanted: Sequence[str]) -> "Dataset":
        keep = set(wanted)
        return Dataset(self.spec, tuple(i for i in self.inputs if i.input_id in keep), self.warnings)


def _image_inputs(root: Path, limit: Optional[int], warnings: List[str]) -> List[DatasetInput]:
    inputs = []
    for path in sorted(p for p in root.iterdir() if p.is_file()):
        if limit is not None and len(inputs) >= limit:
            break
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with Image.open(path) as img:
                img.verify()
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            warnings.append(f"skipped unreadable image {path.name}: {e}")
            continue
        inputs.append(DatasetInput(input_id=path.name, location=str(path.resolve())))
    return inputs


def _text_pair_inputs(root: Path, schema: Dict[str, str], warnings: List[str]) -> List[DatasetInput]:
    # <input_id>.<field>.txt, one file per schema field
    schema = schema or {"text": "text"}
    grouped: Dict[str, Dict[str, Path]] = {}
    for path in sorted(root.glob("*.txt")):
        stem, _, suffix = path.stem.rpartition(".")
        if stem and suffix in schema.values():
            grouped.setdefault(stem, {})[suffix] = path
    inputs = []
    for input_id, files in sorted(grouped.items()):
        missing = [f for f in schema.values() if f not in files]
        if missing:
            warnings.append(f"skipped {input_id}: missing field file(s) {', '.join(missing)}")
            continue
        try:
            fields = {name: files[suffix].read_text(encoding="utf-8").strip() for name, suffix in schema.items()}
        except (OSError, UnicodeDecodeError) as e:
            warnings.append(f"skipped {input_id}: {e}")
            continue
        inputs.append(DatasetInput(input_id=input_id, fields=fields))
    return inputs


def _schema_and_id_key(schema: Dict[str, str]) -> Tuple[Dict[str, str], str]:
    schema = dict(schema or {"text": "text"})
    id_key = schema.pop("id", "id")
    return schema, id_key


def _row_input(row: Dict[str, Any], schema: Dict[str, str], id_key: str, fallback_id: str) -> DatasetInput:
    fields = {name: str(row[key]) for name, key in schema.items()}
    return DatasetInput(input_id=str(row.get(id_key, fallback_id)), fields=fields)


def _unique_ids(inputs: List[DatasetInput], warnings: List[str]) -> List[DatasetInput]:
    """Rename repeated input ids to `<id>#2`, `<id>#3`, ... in source order"""
    taken = {i.input_id for i in inputs}
    used = set()
    unique = []
    for item in inputs:
        if item.input_id in used:
            n = 2
            while f"{item.input_id}#{n}" in taken:
                n += 1
            renamed = f"{item.input_id}#{n}"
            taken.add(renamed)
            warnings.append(f"duplicate input id {item.input_id} renamed to {renamed}")
            item = replace(item, input_id=renamed)
        used.add(item.input_id)
        unique.append(item)
    return unique


def _packaged_inputs(path: Path, schema: Dict[str, str], warnings: List[str]) -> List[DatasetInput]:
    schema, id_key = _schema_and_id_key(schema)
    inputs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                inputs.append(_row_input(json.loads(line), schema, id_key, f"{line_no:08d}"))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
                warnings.append(f"skipped line {line_no + 1}: {e}")
    return sorted(_unique_ids(inputs, warnings), key=lambda i: i.input_id)


def _hub_dataset_inputs(spec: DatasetSpec, warnings: List[str]) -> List[DatasetInput]:
    # optional dependency, only needed for packaged datasets named by split
    try:
        import datasets
    except ImportError:
        raise ConfigError("packaged dataset splits need the `datasets` package (pip install datasets)")
    logger.info(f"Fetching packaged dataset {spec.location} split={spec.split}")
    try:
        rows = datasets.load_dataset(spec.location, spec.subset, split=spec.split)
    except Exception as e:
        raise NotFound(f"packaged dataset {spec.location} (split {spec.split}) unavailable: {e}")
    schema, id_key = _schema_and_id_key(dict(spec.input_schema))
    inputs = []
    for index, row in enumerate(rows):
        try:
            inputs.append(_row_input(row, schema, id_key, f"{index:08d}"))
        except (KeyError, TypeError) as e:
            warnings.append(f"skipped row {index}: {e}")
    return sorted(_unique_ids(inputs, warnings), key=lambda i: i.input_id)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """
    Materialize a dataset in stable lexicographic input-id order

    Args:
        spec: Dataset kind, location and schema

    Returns:
        Dataset with at most spec.limit inputs; unreadable entries are
        skipped and recorded as ingestion warnings

    Raises:
        NotFound: If the location (or packaged dataset split) does not exist
        EmptyDataset: If no usable inputs remain
    """
    warnings: List[str] = []
    if spec.is_hub_reference:
        inputs = _hub_dataset_inputs(spec, warnings)
    else:
        location = Path(spec.location)
        if not location.exists():
            raise NotFound(f"dataset location not found: {spec.location}")
        if spec.kind is DatasetKind.IMAGE_DIR:
            inputs = _image_inputs(location, spec.limit, warnings)
        elif spec.kind is DatasetKind.TEXT_FILE_PAIRS:
            inputs = _text_pair_inputs(location, dict(spec.input_schema), warnings)
        else:
            inputs = _packaged_inputs(location, dict(spec.input_schema), warnings)
    if spec.limit is not None:
        inputs = inputs[: spec.limit]
    for warning in warnings:
        logger.warning(f"⚠️ Dataset ingestion: {warning}")
    if not inputs:
        raise EmptyDataset(f"dataset at {spec.location} has no usable inputs")
    logger.info(f"Loaded {len(inputs)} input(s) from {spec.location}")
    return Dataset(spec=spec, inputs=tuple(inputs), warnings=tuple(warnings))
