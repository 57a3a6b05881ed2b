import json

import pytest

from src.core_types import (
    ComparatorConfig, Detection, Detections, Evidence, FaultReport, HubSource, InferenceRecord,
    ModelDescriptor, OptimizationResult, OptimizationStatus, Outcome, OutcomeClass, PassCategory,
    PassOutcome, PassSpec, RankedLabels, RunConfig, Task, WarningFlag, attribution_of, payload_from_dict,
    payload_to_dict, AnswerTensor, BinaryLabel, ErrorPayload, GeneratedText, DatasetSpec, BackendSpec,
    LocalSource, ValidationResult, VersionChangeWarning,
)
from src.errors import InvariantError


def _pass(outcome, unstable=False, evidence=None):
    return PassOutcome(category=PassCategory.FUSE, known_unstable=unstable, outcome=outcome,
                       evidence=evidence or Evidence())


class TestOutcome:
    def test_clean_with_flags_counts_as_warning(self):
        outcome = Outcome(OutcomeClass.CLEAN, frozenset({WarningFlag.UNUSED_INITIALIZER}))
        assert outcome.effective is OutcomeClass.WARNING
        assert not outcome.is_clean

    def test_crash_cannot_carry_flags(self):
        with pytest.raises(InvariantError):
            Outcome(OutcomeClass.RUN_CRASH, frozenset({WarningFlag.VERSION_CHANGE}))

    def test_divergent_keeps_flags(self):
        outcome = Outcome(OutcomeClass.DIVERGENT, frozenset({WarningFlag.VERSION_CHANGE}))
        assert outcome.effective is OutcomeClass.DIVERGENT
        assert Outcome.from_dict(outcome.to_dict()) == outcome

    def test_warning_is_not_a_primary_class(self):
        with pytest.raises(InvariantError):
            Outcome(OutcomeClass.WARNING)


class TestValues:
    def test_ranked_labels_sorted_with_label_tiebreak(self):
        ranked = RankedLabels.from_scores([0.2, 0.5, 0.2, 0.1])
        assert ranked.labels == (1, 0, 2, 3)
        with pytest.raises(InvariantError):
            RankedLabels(labels=(0, 1), scores=(0.1, 0.9))

    def test_box_corners_must_be_ordered(self):
        with pytest.raises(InvariantError):
            Detection(label=0, score=0.9, box=(5, 0, 1, 1))

    def test_hub_model_needs_opset_seven(self):
        with pytest.raises(InvariantError):
            ModelDescriptor(id="old", task=Task.CLASSIFICATION, opset=6, source=HubSource("resnet50"))

    def test_comparator_config_rejects_unsorted_k(self):
        with pytest.raises(InvariantError):
            ComparatorConfig(top_k_values=(5, 1))
        with pytest.raises(InvariantError):
            ComparatorConfig(iou_thresholds=(0.0, 0.5))

    def test_run_config_rejects_zero_chunks(self):
        with pytest.raises(InvariantError):
            RunConfig(models=(), dataset=DatasetSpec("image_dir", "x"), optimizer_backend=BackendSpec("mock"),
                      runner_backend=BackendSpec("mock"), output_dir="out", chunks=0)

    def test_crashed_optimization_needs_diagnostics(self):
        with pytest.raises(InvariantError):
            OptimizationResult(status=OptimizationStatus.CRASHED)

    def test_default_bundle_pass_must_be_fuse_or_eliminate(self):
        with pytest.raises(InvariantError):
            PassSpec("rewrite_input_dtype", PassCategory.REWRITE, in_default_bundle=True)

    @pytest.mark.parametrize("payload", [
        RankedLabels.from_scores([0.1, 0.7, 0.2]),
        Detections((Detection(2, 0.8, (0, 0, 4, 4)),)),
        GeneratedText("the model output"),
        AnswerTensor(shape=(2, 2), values=(1.0, 2.0, 3.0, 4.0)),
        BinaryLabel(1),
        ErrorPayload("decode failed"),
    ])
    def test_payload_serialization(self, payload):
        assert payload_from_dict(payload_to_dict(payload)) == payload

    def test_record_keeps_warnings_verbatim(self):
        record = InferenceRecord("a", BinaryLabel(0), ("Removing initializer 'w'.",), 0.5)
        assert InferenceRecord.from_dict(record.to_dict()) == record

    @pytest.mark.parametrize("value", [
        RunConfig(models=(ModelDescriptor(id="m1", task=Task.DETECTION, opset=12, source=LocalSource("/m/m1.onnx")),
                          ModelDescriptor(id="r50", task=Task.CLASSIFICATION, opset=13,
                                          source=HubSource("resnet50", 13))),
                  dataset=DatasetSpec("packaged_dataset_ref", "glue", 200, {"text": "sentence", "id": "idx"},
                                      split="validation", subset="sst2"),
                  optimizer_backend=BackendSpec("adapter", {"timeout": 30}), runner_backend=BackendSpec("mock"),
                  output_dir="results", chunks=4, top_k_values=(1, 3), iou_thresholds=(0.5,),
                  pass_subset=("fuse_bn_into_conv", "eliminate_identity")),
        RunConfig(models=(), dataset=DatasetSpec("image_dir", "/data/images"), optimizer_backend=BackendSpec("mock"),
                  runner_backend=BackendSpec("mock"), output_dir="out"),
        PassSpec("fuse_bn_into_conv", PassCategory.FUSE, in_default_bundle=True, known_unstable=True),
        PassSpec("rewrite_input_dtype", PassCategory.REWRITE),
        ValidationResult.ok(),
        ValidationResult.malformed(["Missing required field 'graph'", "Node 3 has no op_type"]),
        VersionChangeWarning(3, 4),
    ])
    def test_json_round_trip(self, value):
        assert type(value).from_dict(json.loads(json.dumps(value.to_dict()))) == value


class TestFaultReport:
    def test_attribution_splits_stable_and_unstable(self):
        per_pass = {
            "fuse_bn_into_conv": _pass(Outcome(OutcomeClass.RUN_CRASH), evidence=Evidence(diagnostics="boom")),
            "split_init": _pass(Outcome(OutcomeClass.OPT_CRASH), unstable=True),
            "eliminate_nop_pad": _pass(Outcome(OutcomeClass.CLEAN)),
            "fuse_qkv": _pass(Outcome(OutcomeClass.CLEAN, frozenset({WarningFlag.UNUSED_INITIALIZER}))),
        }
        attributed, excluded = attribution_of(per_pass)
        assert attributed == ("fuse_bn_into_conv", "fuse_qkv")
        assert excluded == ("split_init",)

    def test_inconsistent_attribution_rejected(self):
        per_pass = {"P1": _pass(Outcome(OutcomeClass.DIVERGENT))}
        with pytest.raises(InvariantError):
            FaultReport("m", Outcome(OutcomeClass.DIVERGENT), Evidence(), per_pass, (), ())

    def test_failed_index_only_on_incomplete(self):
        with pytest.raises(InvariantError):
            FaultReport.assemble("m", Outcome(OutcomeClass.CLEAN), Evidence(), {}, failed_pass_index=3)

    def test_round_trip_keeps_pass_order(self):
        per_pass = {f"P{i}": _pass(Outcome(OutcomeClass.DIVERGENT if i % 3 == 0 else OutcomeClass.CLEAN))
                    for i in range(1, 10)}
        report = FaultReport.assemble("m", Outcome(OutcomeClass.DIVERGENT), Evidence(("a",)), per_pass)
        restored = FaultReport.from_dict(report.to_dict())
        assert restored == report
        assert list(restored.per_pass) == list(per_pass)
        assert restored.attributed_passes == ("P3", "P6", "P9")

    def test_evidence_summary_truncates(self):
        evidence = Evidence(diagnostics="x" * 200)
        assert len(evidence.summary()) == 80
        assert Evidence(diverged_inputs=("a", "b")).summary() == "2 diverged input(s)"
