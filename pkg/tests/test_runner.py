import json
import subprocess

import numpy as np
import pytest
from PIL import Image

from src.core_types import BinaryLabel, InferenceRecord, PreprocessConfig, RankedLabels, Task
from src.errors import BackendUnavailable, InvariantError, RunCrash
from src.mock_backends import (
    UNUSED_INITIALIZER_TEMPLATE, FaultScenario, MockOptimizerBackend, MockRunnerBackend, PassFault,
)
from src.optimizer_backend import OptimizeMode, optimize
from src.runner import (
    AdapterRunnerBackend, ChunkRange, WarningKind, greedy_generate, parse_runtime_warnings, plan_chunks,
    preprocess_image, rank_scores, run_dataset, run_inference, softmax,
)


class TestPlanChunks:
    def test_remainder_goes_to_last_chunk(self):
        assert plan_chunks(10, 3) == [ChunkRange(0, 0, 3), ChunkRange(1, 3, 6), ChunkRange(2, 6, 10)]

    def test_single_chunk(self):
        assert plan_chunks(7, 1) == [ChunkRange(0, 0, 7)]

    def test_unit_chunks(self):
        assert [len(c) for c in plan_chunks(5, 5)] == [1] * 5

    def test_empty_dataset(self):
        assert plan_chunks(0, 4) == []

    def test_invalid_n(self):
        with pytest.raises(InvariantError):
            plan_chunks(10, 0)

    @pytest.mark.parametrize("length, n", [(97, 1), (97, 2), (97, 7), (97, 97), (3, 5), (100, 9)])
    def test_partition_covers_every_index_once(self, length, n):
        covered = [i for chunk in plan_chunks(length, n) for i in range(chunk.start, chunk.end)]
        assert covered == list(range(length))


class TestRunDataset:
    @pytest.mark.parametrize("chunks", [1, 2, 7, 97])
    def test_records_independent_of_chunking(self, make_model, make_dataset, chunks):
        _, original = make_model()
        dataset = make_dataset(97)
        baseline = run_dataset(MockRunnerBackend(), original, dataset, 1, PreprocessConfig(), Task.CLASSIFICATION)
        chunked = run_dataset(MockRunnerBackend(), original, dataset, chunks, PreprocessConfig(),
                              Task.CLASSIFICATION, workers=4)
        assert chunked.records == baseline.records
        assert [r.input_id for r in chunked.records] == dataset.ids()

    def test_classification_payload_is_ranked(self, make_model, make_dataset):
        _, original = make_model()
        result = run_dataset(MockRunnerBackend(), original, make_dataset(5), 2, PreprocessConfig(),
                             Task.CLASSIFICATION)
        for record in result.records:
            assert isinstance(record.payload, RankedLabels)
            assert list(record.payload.scores) == sorted(record.payload.scores, reverse=True)

    def test_crash_becomes_run_result(self, make_model, make_dataset, tmp_path):
        _, original = make_model()
        scenario = FaultScenario(pass_faults={"P1": PassFault("RUN_CRASH")})
        opt = optimize(MockOptimizerBackend(scenario), original, OptimizeMode.pass_list(["P1"]), tmp_path / "o.json")
        result = run_dataset(MockRunnerBackend(), opt.optimized_model, make_dataset(8), 3, PreprocessConfig(),
                             Task.CLASSIFICATION)
        assert result.crashed
        assert "Incompatible shape" in result.crash

    def test_missing_record_is_crash(self, make_model, make_dataset):
        class DroppingRunner(MockRunnerBackend):
            def run_batch(self, model, inputs, task, preprocess):
                return super().run_batch(model, inputs, task, preprocess)[1:]

        _, original = make_model()
        dataset = make_dataset(4)
        with pytest.raises(RunCrash):
            run_inference(DroppingRunner(), original, dataset, ChunkRange(0, 0, 4), PreprocessConfig(),
                          Task.CLASSIFICATION)


class TestWarnings:
    def test_unused_initializer_extracted(self):
        raw = UNUSED_INITIALIZER_TEMPLATE.format(name="conv1.bias_folded")
        parsed = parse_runtime_warnings([InferenceRecord("a", BinaryLabel(0), (raw,))])
        assert len(parsed) == 1
        assert parsed[0].warning_kind is WarningKind.UNUSED_INITIALIZER
        assert parsed[0].initializer == "conv1.bias_folded"
        assert parsed[0].raw == raw

    def test_plain_message_without_quotes(self):
        raw = "Removing initializer X. It is not used by any node and should be removed from the model."
        assert parse_runtime_warnings([InferenceRecord("a", BinaryLabel(0), (raw,))])[0].initializer == "X"

    def test_other_and_empty(self):
        assert parse_runtime_warnings([InferenceRecord("a", BinaryLabel(0))]) == []
        parsed = parse_runtime_warnings([InferenceRecord("a", BinaryLabel(0), ("some other warning",))])
        assert parsed[0].warning_kind is WarningKind.OTHER
        assert parsed[0].raw == "some other warning"

    def test_key_ignores_timestamp_prefix(self):
        message = UNUSED_INITIALIZER_TEMPLATE.format(name="w")
        first = f"2026-10-18 09:14:03.512331 [W:onnxruntime:, graph.cc:3490 CleanUnusedInitializers] {message}"
        second = f"2026-10-18 09:15:47.001200 [W:onnxruntime:, graph.cc:3490 CleanUnusedInitializers] {message}"
        records = [InferenceRecord("a", BinaryLabel(0), (first,)), InferenceRecord("b", BinaryLabel(0), (second,))]
        a, b = parse_runtime_warnings(records)
        assert a.raw != b.raw
        assert a.key == b.key == ("UNUSED_INITIALIZER", "w")

    def test_key_of_other_warning_strips_prefix(self):
        lines = ("2026-10-18 09:14:03.5 [W:onnxruntime:Default, env.cc:12] thread pool sized to 4",
                 "2026-10-18 11:02:59.9 [W:onnxruntime:Default, env.cc:12] thread pool sized to 4",
                 "thread pool sized to 8")
        keys = [w.key for w in parse_runtime_warnings([InferenceRecord("a", BinaryLabel(0), lines)])]
        assert keys[0] == keys[1] == ("OTHER", "thread pool sized to 4")
        assert keys[2] != keys[0]


class TestPreprocessing:
    def test_image_tensor_layout(self, tmp_path):
        path = tmp_path / "red.png"
        Image.new("RGB", (40, 30), (255, 0, 0)).save(path)
        cfg = PreprocessConfig(height=16, width=16, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        x = preprocess_image(str(path), cfg)
        assert x.shape == (1, 3, 16, 16)
        assert x.dtype == np.float32
        assert np.allclose(x[0, 0], 1.0) and np.allclose(x[0, 1:], 0.0)

    def test_bgr_nhwc_center_crop(self, tmp_path):
        path = tmp_path / "red.png"
        Image.new("RGB", (40, 30), (255, 0, 0)).save(path)
        cfg = PreprocessConfig(height=8, width=8, channel_order="BGR", layout="NHWC", resize="center_crop",
                               mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        x = preprocess_image(str(path), cfg)
        assert x.shape == (1, 8, 8, 3)
        assert np.allclose(x[0, :, :, 2], 1.0)

    def test_preprocessing_is_pure(self, tmp_path):
        path = tmp_path / "img.png"
        Image.fromarray((np.arange(48 * 48 * 3) % 256).astype(np.uint8).reshape(48, 48, 3)).save(path)
        cfg = PreprocessConfig(height=32, width=32)
        assert preprocess_image(str(path), cfg).tobytes() == preprocess_image(str(path), cfg).tobytes()

    def test_softmax_and_ranking(self):
        probs = softmax(np.array([1.0, 3.0, 2.0]))
        assert probs.sum() == pytest.approx(1.0)
        assert rank_scores([1.0, 3.0, 2.0], outputs_logits=True).labels == (1, 2, 0)

    def test_greedy_generation_stops_at_eos(self):
        table = {0: 5, 5: 6, 6: 2}

        def step(ids):
            logits = np.zeros(8)
            logits[table.get(ids[-1], 2)] = 1.0
            return logits

        assert greedy_generate(step, [0], eos_id=2) == [5, 6]
        assert greedy_generate(step, [0], eos_id=None, max_new_tokens=3) == [5, 6, 2]

    def test_greedy_ties_take_lowest_id(self):
        assert greedy_generate(lambda ids: np.ones(4), [1], eos_id=None, max_new_tokens=2) == [0, 0]


class TestAdapterRunner:
    def _fake(self, returncode=0, stderr=b"", write=True, raise_exc=None):
        def run(cmd, capture_output=True, timeout=None):
            if raise_exc is not None:
                raise raise_exc
            if write:
                batch = cmd[cmd.index("--inputs") + 1]
                out = cmd[cmd.index("--out") + 1]
                ids = [json.loads(line)["input_id"] for line in open(batch, encoding="utf-8")]
                records = [InferenceRecord(i, BinaryLabel(1)).to_dict() for i in ids]
                with open(out, "w", encoding="utf-8") as f:
                    json.dump(records, f)
            return subprocess.CompletedProcess(cmd, returncode, b"", stderr)
        return run

    def test_records_and_stderr_warnings(self, monkeypatch, make_model, make_dataset):
        stderr = b"2024 [W:onnxruntime:, graph.cc:3490] Removing initializer 'w'. It is not used by any node\ninfo\n"
        monkeypatch.setattr("src.runner.subprocess.run", self._fake(stderr=stderr))
        _, original = make_model()
        result = run_dataset(AdapterRunnerBackend(["runner"]), original, make_dataset(3), 1, PreprocessConfig(),
                             Task.SENTIMENT)
        assert not result.crashed
        assert all(len(r.runtime_warnings) == 1 for r in result.records)
        assert parse_runtime_warnings(result.records)[0].initializer == "w"

    def test_nonzero_exit_is_crash(self, monkeypatch, make_model, make_dataset):
        monkeypatch.setattr("src.runner.subprocess.run",
                            self._fake(returncode=1, stderr=b"Incompatible shape error.", write=False))
        _, original = make_model()
        result = run_dataset(AdapterRunnerBackend(["runner"]), original, make_dataset(3), 1, PreprocessConfig(),
                             Task.SENTIMENT)
        assert result.crash == "Incompatible shape error."

    def test_timeout_is_crash(self, monkeypatch, make_model, make_dataset):
        monkeypatch.setattr("src.runner.subprocess.run",
                            self._fake(raise_exc=subprocess.TimeoutExpired("runner", 1)))
        _, original = make_model()
        result = run_dataset(AdapterRunnerBackend(["runner"]), original, make_dataset(2), 1, PreprocessConfig(),
                             Task.SENTIMENT)
        assert result.crash == "timeout"

    def test_missing_program_is_unavailable(self, monkeypatch, make_model, make_dataset):
        monkeypatch.setattr("src.runner.subprocess.run", self._fake(raise_exc=FileNotFoundError("runner")))
        _, original = make_model()
        with pytest.raises(BackendUnavailable):
            run_dataset(AdapterRunnerBackend(["runner"]), original, make_dataset(2), 1, PreprocessConfig(),
                        Task.SENTIMENT)
