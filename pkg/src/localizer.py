"""
Fault Localizer
Classifies the outcome of optimize -> validate -> run -> compare and, when the
default bundle misbehaves, re-optimizes the original model with every pass
alone to attribute the fault.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.comparators import aggregate_comparisons, compare_runs
from src.core_types import (
    ComparisonRecord, Evidence, FaultReport, ModelArtifact, ModelDescriptor, Outcome, OutcomeClass,
    OptimizationResult, PassOutcome, ValidationResult, VersionChangeWarning, WarningFlag,
)
from src.errors import BackendUnavailable, PipelineError
from src.optimizer_backend import (
    OptimizeMode, OptimizerBackend, PassRegistry, detect_ir_version_change, optimize,
    optimized_artifact_path, validate_model,
)
from src.orchestrator import Dataset
from src.runner import InferenceBackend, ParsedWarning, RunResult, WarningKind, parse_runtime_warnings, run_dataset

logger = logging.getLogger(__name__)

StageWarning = Union[ParsedWarning, VersionChangeWarning]


@dataclass(frozen=True)
class Backends:
    optimizer: OptimizerBackend
    runner: InferenceBackend


def classify_outcome(opt: OptimizationResult, validation: Optional[ValidationResult] = None,
                     run: Optional[RunResult] = None, comparisons: Optional[Sequence[ComparisonRecord]] = None,
                     warnings: Sequence[StageWarning] = ()) -> Outcome:
    """
    Outcome class of one pipeline evaluation

    Stages are checked in pipeline order: OPT_CRASH, MALFORMED, RUN_CRASH,
    DIVERGENT, CLEAN. Unused-initializer and version-change warnings become
    flags unless the primary class is a crash.

    Raises:
        PipelineError: If a later stage is present after a failed or missing one
    """
    if comparisons is not None and run is None:
        raise PipelineError("comparison present without a run")
    if not opt.ok:
        if validation is not None or run is not None:
            raise PipelineError("stages present after an optimizer crash")
        return Outcome(OutcomeClass.OPT_CRASH)
    if validation is not None and not validation.valid:
        if run is not None:
            raise PipelineError("run present after a failed validation")
        return Outcome(OutcomeClass.MALFORMED)
    if run is not None and run.crashed:
        if comparisons is not None:
            raise PipelineError("comparison present after a run crash")
        return Outcome(OutcomeClass.RUN_CRASH)

    flags = set()
    for warning in warnings:
        if isinstance(warning, VersionChangeWarning):
            flags.add(WarningFlag.VERSION_CHANGE)
        elif warning.warning_kind is WarningKind.UNUSED_INITIALIZER:
            flags.add(WarningFlag.UNUSED_INITIALIZER)
    if comparisons is not None and any(c.diverged for c in comparisons):
        return Outcome(OutcomeClass.DIVERGENT, frozenset(flags))
    return Outcome(OutcomeClass.CLEAN, frozenset(flags))


@dataclass(frozen=True)
class Evaluation:
    """Everything one optimize -> validate -> run -> compare pass produced"""
    mode: OptimizeMode
    optimization: OptimizationResult
    outcome: Outcome
    evidence: Evidence
    validation: Optional[ValidationResult] = None
    reference: Optional[RunResult] = None
    run: Optional[RunResult] = None
    comparisons: Optional[Tuple[ComparisonRecord, ...]] = None
    warnings: Tuple[StageWarning, ...] = ()
    aggregate: Dict[str, Any] = field(default_factory=dict)

    @property
    def diverged_inputs(self) -> Tuple[str, ...]:
        return self.evidence.diverged_inputs

    def warning_texts(self) -> List[str]:
        return [w.raw if isinstance(w, ParsedWarning) else str(w) for w in self.warnings]


def run_reference(model: ModelDescriptor, original: ModelArtifact, dataset: Dataset, backends: Backends,
                  chunks: int = 1, workers: int = 1) -> RunResult:
    """
    Run the unoptimized model once

    Raises:
        PipelineError: If the original model itself cannot run
    """
    result = run_dataset(backends.runner, original, dataset, chunks, model.preprocess, model.task, workers)
    if result.crashed:
        raise PipelineError(f"original model {model.id} failed to run: {result.crash}")
    return result


def _introduced_warnings(reference: RunResult, run: RunResult) -> List[ParsedWarning]:
    # warnings the original model already emits are not evidence
    seen = {w.key for w in parse_runtime_warnings(reference.records)}
    unique: Dict[Tuple[str, str], ParsedWarning] = {}
    for warning in parse_runtime_warnings(run.records):
        if warning.key not in seen and warning.key not in unique:
            unique[warning.key] = warning
    return list(unique.values())


def evaluate(model: ModelDescriptor, original: ModelArtifact, dataset: Dataset, backends: Backends,
             mode: OptimizeMode, output_dir: str, chunks: int = 1, workers: int = 1,
             reference: Optional[RunResult] = None) -> Evaluation:
    """
    Optimize, validate, run and compare one pass set against the original model

    Args:
        model: Model descriptor (task, preprocessing, comparator settings)
        original: Original model artifact
        dataset: Inputs to run
        backends: Optimizer and runner
        mode: Default bundle or explicit pass list
        output_dir: Root for optimized artifacts
        chunks: Chunk count N for both runs
        workers: Chunks run in parallel
        reference: Original-model records already computed over dataset

    Returns:
        Evaluation with outcome and evidence
    """
    if reference is None:
        reference = run_reference(model, original, dataset, backends, chunks, workers)
    target = optimized_artifact_path(output_dir, model.id, mode)
    opt = optimize(backends.optimizer, original, mode, target)
    if not opt.ok:
        outcome = classify_outcome(opt)
        return Evaluation(mode, opt, outcome, Evidence(diagnostics=opt.diagnostics), reference=reference)

    validation = validate_model(backends.optimizer, opt.optimized_model)
    if not validation.valid:
        outcome = classify_outcome(opt, validation)
        return Evaluation(mode, opt, outcome, Evidence(diagnostics="\n".join(validation.reasons)),
                          validation=validation, reference=reference)

    run = run_dataset(backends.runner, opt.optimized_model, dataset, chunks, model.preprocess, model.task, workers)
    if run.crashed:
        outcome = classify_outcome(opt, validation, run)
        return Evaluation(mode, opt, outcome, Evidence(diagnostics=run.crash), validation=validation,
                          reference=reference, run=run)

    comparisons = tuple(compare_runs(model.task, reference.records, run.records, model.comparator_config))
    warnings: List[StageWarning] = list(_introduced_warnings(reference, run))
    version_change = detect_ir_version_change(opt)
    if version_change is not None:
        warnings.append(version_change)
    outcome = classify_outcome(opt, validation, run, comparisons, warnings)
    aggregate = aggregate_comparisons(model.task, comparisons, reference.records, run.records,
                                      model.comparator_config)
    evaluation = Evaluation(mode, opt, outcome, Evidence(), validation, reference, run, comparisons,
                            tuple(warnings), aggregate)
    if not outcome.is_clean:
        evaluation = Evaluation(
            mode, opt, outcome,
            Evidence(diverged_inputs=tuple(c.input_id for c in comparisons if c.diverged),
                     warnings=tuple(evaluation.warning_texts())),
            validation, reference, run, comparisons, tuple(warnings), aggregate,
        )
    return evaluation


def select_sweep_inputs(dataset: Dataset, diverged_ids: Sequence[str], sample_size: Optional[int],
                        seed: int = 0) -> Dataset:
    """
    Diverged inputs plus a seeded random sample of the rest

    Returns:
        Subset in dataset order; the whole dataset when sample_size is None
        or covers every remaining input
    """
    if sample_size is None:
        return dataset
    diverged = set(diverged_ids)
    rest = [i for i in dataset.ids() if i not in diverged]
    if sample_size >= len(rest):
        return dataset
    rng = np.random.default_rng(seed)
    sampled = [rest[i] for i in rng.choice(len(rest), size=sample_size, replace=False)] if sample_size > 0 else []
    return dataset.subset(list(diverged) + sampled)


def localize(model: ModelDescriptor, original: ModelArtifact, dataset: Dataset, backends: Backends,
             registry: PassRegistry, output_dir: str, trigger: Optional[Evaluation] = None,
             chunks: int = 1, workers: int = 1, sample_size: Optional[int] = None,
             seed: int = 0) -> FaultReport:
    """
    Sweep every registry pass alone over the original model

    Args:
        model: Model descriptor
        original: Original model artifact
        dataset: Dataset of the triggering run
        backends: Optimizer and runner
        registry: Passes to sweep
        output_dir: Root for single-pass artifacts
        trigger: The non-clean evaluation that prompted the sweep; None forces one
        chunks: Chunk count N
        workers: Passes evaluated in parallel
        sample_size: Random inputs added to the diverged ones; None sweeps the full dataset
        seed: Sampling seed

    Returns:
        FaultReport over every pass; incomplete with the failing pass index
        when a backend becomes unavailable
    """
    diverged = trigger.diverged_inputs if trigger is not None else ()
    sweep_set = select_sweep_inputs(dataset, diverged, sample_size, seed)
    if trigger is not None and trigger.reference is not None and len(sweep_set) == len(dataset):
        reference = trigger.reference
    else:
        reference = run_reference(model, original, sweep_set, backends, chunks)
    names = registry.names()
    logger.info(f"Sweeping {len(names)} passes over {len(sweep_set)} input(s) for {model.id}")

    def job(name: str) -> Evaluation:
        return evaluate(model, original, sweep_set, backends, OptimizeMode.pass_list([name]), output_dir,
                        chunks=chunks, reference=reference)

    results: Dict[str, Evaluation] = {}
    failed: Optional[int] = None
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(job, name): index for index, name in enumerate(names)}
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[names[index]] = future.result()
            except BackendUnavailable as e:
                logger.error(f"❌ Backend unavailable while sweeping {names[index]}: {e}")
                failed = index if failed is None else min(failed, index)

    per_pass: Dict[str, PassOutcome] = {}
    for index, name in enumerate(names):
        if name not in results or (failed is not None and index >= failed):
            continue
        spec = registry.get(name)
        evaluation = results[name]
        per_pass[name] = PassOutcome(category=spec.category, known_unstable=spec.known_unstable,
                                     outcome=evaluation.outcome, evidence=evaluation.evidence)

    trigger_outcome = trigger.outcome if trigger is not None else Outcome(OutcomeClass.CLEAN)
    trigger_evidence = trigger.evidence if trigger is not None else Evidence()
    report = FaultReport.assemble(model.id, trigger_outcome, trigger_evidence, per_pass,
                                  incomplete=failed is not None, failed_pass_index=failed)
    for name in report.attributed_passes:
        logger.info(f"⚠️ {model.id}: pass {name} -> {per_pass[name].outcome.effective.value}")
    return report