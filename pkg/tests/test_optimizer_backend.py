import subprocess
from pathlib import Path

import pytest

from src.core_types import OptimizationResult, OptimizationStatus, PassCategory
from src.errors import BackendUnavailable, InvalidArtifact, UnknownPass
from src.mock_backends import FaultScenario, MockOptimizerBackend, PassFault
from src.optimizer_backend import (
    KNOWN_UNSTABLE_PASSES, AdapterOptimizerBackend, OptimizeMode, build_registry, categorize,
    detect_ir_version_change, list_passes, optimize, optimized_artifact_path, reference_registry,
    validate_model,
)
from src.orchestrator import load_local_model


class TestRegistry:
    def test_reference_registry_has_47_passes(self):
        registry = reference_registry()
        assert len(registry) == 47
        assert len(set(registry.names())) == 47

    def test_default_bundle_is_fuse_and_eliminate(self):
        registry = reference_registry()
        bundle = registry.default_bundle()
        assert bundle
        assert all(registry.get(n).category in (PassCategory.FUSE, PassCategory.ELIMINATE) for n in bundle)
        assert set(bundle) == {p.name for p in registry
                               if p.category in (PassCategory.FUSE, PassCategory.ELIMINATE)}

    def test_known_unstable_marked(self):
        registry = reference_registry()
        assert {p.name for p in registry if p.known_unstable} == set(KNOWN_UNSTABLE_PASSES)

    @pytest.mark.parametrize("name, category", [
        ("fuse_bn_into_conv", PassCategory.FUSE),
        ("eliminate_nop_reshape", PassCategory.ELIMINATE),
        ("lift_lexical_references", PassCategory.REWRITE),
        ("nop", PassCategory.OTHER),
    ])
    def test_categorize(self, name, category):
        assert categorize(name) is category

    def test_backend_bundle_metadata_wins(self):
        registry = build_registry([("fuse_a", ("default",)), ("fuse_b", ()), ("split_x", ("unstable",))])
        assert registry.default_bundle() == ("fuse_a",)
        assert registry.get("split_x").known_unstable

    def test_unknown_pass_lists_valid_names(self):
        with pytest.raises(UnknownPass, match="fuse_bn_into_conv"):
            reference_registry().check_names(["no_such_pass"])


def _scenario(**faults):
    return FaultScenario(pass_faults={name: PassFault(kind) for name, kind in faults.items()})


class TestOptimize:
    def test_bundle_applies_exactly_bundle(self, make_model, tmp_path):
        backend = MockOptimizerBackend(FaultScenario())
        _, original = make_model()
        result = optimize(backend, original, OptimizeMode.default_bundle(),
                          optimized_artifact_path(str(tmp_path), "m1", OptimizeMode.default_bundle()))
        assert result.ok
        assert result.applied_passes == backend.list_passes().default_bundle()
        assert validate_model(backend, result.optimized_model).valid

    def test_input_untouched(self, make_model, tmp_path):
        _, original = make_model()
        before = Path(original.path).read_bytes()
        optimize(MockOptimizerBackend(_scenario(P1="VERSION_BUMP")), original, OptimizeMode.pass_list(["P1"]),
                 tmp_path / "out.json")
        assert Path(original.path).read_bytes() == before

    def test_version_bump_3_to_4(self, make_model, tmp_path):
        _, original = make_model()
        result = optimize(MockOptimizerBackend(_scenario(P2="VERSION_BUMP")), original,
                          OptimizeMode.pass_list(["P2"]), tmp_path / "out.json")
        assert (result.ir_version_before, result.ir_version_after) == (3, 4)
        warning = detect_ir_version_change(result)
        assert (warning.before, warning.after) == (3, 4)

    def test_crash_captures_diagnostics(self, make_model, tmp_path):
        _, original = make_model()
        result = optimize(MockOptimizerBackend(_scenario(P4="OPT_CRASH")), original,
                          OptimizeMode.pass_list(["P4"]), tmp_path / "out.json")
        assert result.status is OptimizationStatus.CRASHED
        assert "P4" in result.diagnostics

    def test_unknown_pass_is_caller_error(self, make_model, tmp_path):
        _, original = make_model()
        with pytest.raises(UnknownPass):
            optimize(MockOptimizerBackend(FaultScenario()), original, OptimizeMode.pass_list(["P99"]),
                     tmp_path / "out.json")

    def test_malformed_output_fails_validation(self, make_model, tmp_path):
        _, original = make_model()
        backend = MockOptimizerBackend(_scenario(P5="MALFORMED"))
        result = optimize(backend, original, OptimizeMode.pass_list(["P5"]), tmp_path / "out.json")
        validation = validate_model(backend, result.optimized_model)
        assert not validation.valid
        assert validation.reasons == ("Missing required field 'graph'",)

    def test_validate_missing_file(self, make_model, tmp_path):
        _, original = make_model()
        gone = load_local_model(original.path)
        Path(original.path).unlink()
        with pytest.raises(InvalidArtifact):
            validate_model(MockOptimizerBackend(FaultScenario()), gone)


class TestVersionChange:
    def _result(self, before, after):
        return OptimizationResult(status=OptimizationStatus.CRASHED, diagnostics="x",
                                  ir_version_before=before, ir_version_after=after)

    def test_same_version(self):
        assert detect_ir_version_change(self._result(4, 4)) is None

    def test_unknown_version(self):
        assert detect_ir_version_change(self._result(None, 4)) is None


class FakeAdapter:
    """Stands in for subprocess.run against an optimizer adapter"""

    def __init__(self, listing="fuse_bn_into_conv default\neliminate_nop_pad default\nsplit_init unstable\n",
                 optimize_code=0, stderr=b"", timeout=False):
        self.listing = listing
        self.optimize_code = optimize_code
        self.stderr = stderr
        self.timeout = timeout
        self.calls = []

    def __call__(self, cmd, capture_output=True, timeout=None):
        self.calls.append(cmd)
        args = cmd[2:]
        if "--list-passes" in args:
            return subprocess.CompletedProcess(cmd, 0, self.listing.encode(), b"")
        if "--ir-version" in args:
            return subprocess.CompletedProcess(cmd, 0, b"7\n", b"")
        if "--validate" in args:
            return subprocess.CompletedProcess(cmd, 1, b"", b"Multiple usage of output name\n")
        if self.timeout:
            raise subprocess.TimeoutExpired(cmd, timeout)
        if self.optimize_code == 0:
            Path(args[args.index("--output") + 1]).write_bytes(b"optimized")
        return subprocess.CompletedProcess(cmd, self.optimize_code, b"", self.stderr)


class TestAdapterBackend:
    def _backend(self, monkeypatch, fake):
        monkeypatch.setattr("src.optimizer_backend.subprocess.run", fake)
        return AdapterOptimizerBackend(["python", "adapter.py"], timeout=5)

    def test_listing_parsed_once(self, monkeypatch):
        fake = FakeAdapter()
        backend = self._backend(monkeypatch, fake)
        registry = list_passes(backend)
        list_passes(backend)
        assert registry.names() == ["fuse_bn_into_conv", "eliminate_nop_pad", "split_init"]
        assert registry.default_bundle() == ("fuse_bn_into_conv", "eliminate_nop_pad")
        assert registry.get("split_init").known_unstable
        assert len(fake.calls) == 1

    def test_timeout_is_crash(self, monkeypatch, make_model, tmp_path):
        backend = self._backend(monkeypatch, FakeAdapter(timeout=True))
        _, original = make_model()
        result = optimize(backend, original, OptimizeMode.default_bundle(), tmp_path / "out.onnx")
        assert result.status is OptimizationStatus.CRASHED
        assert result.diagnostics.startswith("timeout")

    def test_nonzero_exit_keeps_stderr(self, monkeypatch, make_model, tmp_path):
        backend = self._backend(monkeypatch, FakeAdapter(optimize_code=1, stderr=b"Removes used value references"))
        _, original = make_model()
        result = optimize(backend, original, OptimizeMode.pass_list(["fuse_bn_into_conv"]), tmp_path / "o.onnx")
        assert not result.ok
        assert "Removes used value references" in result.diagnostics
        assert result.applied_passes == ("fuse_bn_into_conv",)

    def test_success_and_validation_reasons(self, monkeypatch, make_model, tmp_path):
        fake = FakeAdapter()
        backend = self._backend(monkeypatch, fake)
        _, original = make_model()
        result = optimize(backend, original, OptimizeMode.default_bundle(), tmp_path / "o.onnx")
        assert result.ok
        assert (result.ir_version_before, result.ir_version_after) == (7, 7)
        assert ["--default"] == fake.calls[-2][-1:]
        validation = validate_model(backend, result.optimized_model)
        assert validation.reasons == ("Multiple usage of output name",)

    def test_missing_program(self, monkeypatch):
        def missing(*args, **kwargs):
            raise FileNotFoundError("no such file")

        monkeypatch.setattr("src.optimizer_backend.subprocess.run", missing)
        with pytest.raises(BackendUnavailable):
            AdapterOptimizerBackend(["absent-adapter"]).list_passes()
