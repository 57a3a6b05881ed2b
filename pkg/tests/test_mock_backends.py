import json
from pathlib import Path

import pytest

from src.core_types import OutcomeClass, PassCategory, PreprocessConfig, Task, WarningFlag
from src.errors import InvariantError
from src.localizer import evaluate
from src.mock_backends import (
    FaultKind, FaultScenario, MockRunnerBackend, PassFault, generate_scenarios, make_mock_backend,
)
from src.optimizer_backend import OptimizeMode


class TestScenario:
    def test_fraction_bounds(self):
        with pytest.raises(InvariantError):
            PassFault(FaultKind.PERTURB_OUTPUTS, fraction=0.0)
        with pytest.raises(InvariantError):
            PassFault(FaultKind.PERTURB_OUTPUTS, fraction=1.5)

    def test_pass_names_within_registry(self):
        with pytest.raises(InvariantError):
            FaultScenario(pass_faults={"P48": PassFault(FaultKind.OPT_CRASH)})

    def test_round_trip_and_load(self, tmp_path):
        scenario = FaultScenario(
            pass_faults={"P2": PassFault(FaultKind.RUN_CRASH),
                         "P8": PassFault(FaultKind.PERTURB_OUTPUTS, magnitude=0.2, fraction=0.5)},
            seed=3, unstable_passes=frozenset({"P2"}), task=Task.DETECTION,
        )
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(scenario.to_dict()))
        assert FaultScenario.load(str(path)) == scenario
        assert scenario.injected() == {"P8"}

    def test_bare_kind_strings(self):
        scenario = FaultScenario.from_dict({"pass_faults": {"P1": "VERSION_BUMP"}})
        assert scenario.pass_faults["P1"].kind is FaultKind.VERSION_BUMP


class TestMockRegistry:
    def test_categories_cycle(self):
        optimizer, _ = make_mock_backend(FaultScenario())
        registry = optimizer.list_passes()
        assert len(registry) == 47
        assert [p.category for p in list(registry)[:4]] == [
            PassCategory.FUSE, PassCategory.ELIMINATE, PassCategory.REWRITE, PassCategory.FUSE]
        assert "P3" not in registry.default_bundle()
        assert "P1" in registry.default_bundle() and "P2" in registry.default_bundle()


class TestBundleOutcome:
    def _evaluate(self, scenario, make_model, make_dataset, mock_backends, tmp_path, task=Task.CLASSIFICATION):
        model, original = make_model(task=task)
        return evaluate(model, original, make_dataset(12), mock_backends(scenario), OptimizeMode.default_bundle(),
                        str(tmp_path / "out"))

    def test_empty_scenario_is_clean(self, make_model, make_dataset, mock_backends, tmp_path):
        evaluation = self._evaluate(FaultScenario(), make_model, make_dataset, mock_backends, tmp_path)
        assert evaluation.outcome.effective is OutcomeClass.CLEAN

    def test_bundle_member_crash(self, make_model, make_dataset, mock_backends, tmp_path):
        scenario = FaultScenario(pass_faults={"P5": PassFault(FaultKind.OPT_CRASH)})
        evaluation = self._evaluate(scenario, make_model, make_dataset, mock_backends, tmp_path)
        assert evaluation.outcome.primary is OutcomeClass.OPT_CRASH

    def test_worst_fault_wins(self, make_model, make_dataset, mock_backends, tmp_path):
        scenario = FaultScenario(pass_faults={
            "P1": PassFault(FaultKind.PERTURB_OUTPUTS),
            "P2": PassFault(FaultKind.RUN_CRASH),
            "P4": PassFault(FaultKind.MALFORMED),
            "P5": PassFault(FaultKind.INJECT_WARNING),
        })
        evaluation = self._evaluate(scenario, make_model, make_dataset, mock_backends, tmp_path)
        assert evaluation.outcome.primary is OutcomeClass.MALFORMED

    def test_faults_outside_bundle_ignored(self, make_model, make_dataset, mock_backends, tmp_path):
        scenario = FaultScenario(pass_faults={"P3": PassFault(FaultKind.OPT_CRASH)})
        evaluation = self._evaluate(scenario, make_model, make_dataset, mock_backends, tmp_path)
        assert evaluation.outcome.is_clean

    def test_divergent_with_warning_flag(self, make_model, make_dataset, mock_backends, tmp_path):
        scenario = FaultScenario(pass_faults={"P1": PassFault(FaultKind.PERTURB_OUTPUTS),
                                              "P2": PassFault(FaultKind.INJECT_WARNING)})
        evaluation = self._evaluate(scenario, make_model, make_dataset, mock_backends, tmp_path)
        assert evaluation.outcome.primary is OutcomeClass.DIVERGENT
        assert evaluation.outcome.flags == {WarningFlag.UNUSED_INITIALIZER}

    @pytest.mark.parametrize("task", list(Task))
    def test_perturbation_diverges_every_task(self, task, make_model, make_dataset, mock_backends, tmp_path):
        scenario = FaultScenario(pass_faults={"P9": PassFault(FaultKind.PERTURB_OUTPUTS, 0.1, 1.0)}, task=task)
        model, original = make_model(task=task)
        evaluation = evaluate(model, original, make_dataset(10), mock_backends(scenario),
                              OptimizeMode.pass_list(["P9"]), str(tmp_path / "out"))
        assert evaluation.outcome.primary is OutcomeClass.DIVERGENT
        assert len(evaluation.diverged_inputs) == 10
        if task is Task.CLASSIFICATION:
            assert all(c.metrics["tau@1"] < 1.0 for c in evaluation.comparisons)


class TestDeterminism:
    def test_generate_scenarios_reproducible(self):
        assert generate_scenarios(50, seed=7) == generate_scenarios(50, seed=7)
        assert generate_scenarios(5, seed=7) != generate_scenarios(5, seed=8)

    def test_every_kind_in_batches_of_six(self):
        for seed in range(5):
            batch = generate_scenarios(6, seed=seed)
            kinds = {fault.kind for s in batch for fault in s.pass_faults.values()}
            assert kinds == set(FaultKind)

    def test_batches_include_multi_fault(self):
        assert any(len(s.pass_faults) > 1 for s in generate_scenarios(6, seed=1))

    def test_identical_artifacts_and_records(self, make_model, make_dataset, tmp_path):
        scenario = FaultScenario(pass_faults={"P1": PassFault(FaultKind.PERTURB_OUTPUTS, 0.3, 0.5)})
        outputs = []
        for attempt in range(2):
            optimizer, runner = make_mock_backend(scenario)
            _, original = make_model(seed=4)
            target = tmp_path / f"run{attempt}" / "model.json"
            target.parent.mkdir()
            assert optimizer.run_optimizer(Path(original.path), target, ["P1"])[0]
            records = MockRunnerBackend().run_batch(
                type(original)(str(target), target.stat().st_size, "0" * 64), list(make_dataset(6)),
                Task.CLASSIFICATION, PreprocessConfig())
            outputs.append((target.read_bytes(), records))
        assert outputs[0] == outputs[1]

    def test_scenario_seed_picks_perturbed_inputs(self, make_model, make_dataset, mock_backends, tmp_path):
        model, original = make_model()
        dataset = make_dataset(40)

        def diverged(seed):
            scenario = FaultScenario(pass_faults={"P1": PassFault(FaultKind.PERTURB_OUTPUTS, 0.3, 0.5)}, seed=seed)
            evaluation = evaluate(model, original, dataset, mock_backends(scenario), OptimizeMode.pass_list(["P1"]),
                                  str(tmp_path / f"seed{seed}"))
            return set(evaluation.diverged_inputs)

        assert diverged(1) == diverged(1)
        assert diverged(1) != diverged(2)
        assert 0 < len(diverged(2)) < 40
