"""
Runner adapter over onnxruntime (CPU)

Usage:
    python adapters/onnxruntime_runner_adapter.py --model m.onnx --inputs batch.jsonl \
        --task classification --out records.json [--preprocess prep.json]

Writes a JSON array of inference records, one per batch line. Inputs that
cannot be decoded or tokenized become error payloads; a session that cannot
be created or a kernel failure exits nonzero (a run crash). onnxruntime
warnings go to stderr where the caller collects them.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import onnxruntime

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core_types import (  # noqa: E402
    AnswerTensor, BinaryLabel, Detection, Detections, ErrorPayload, GeneratedText, InferenceRecord,
    PreprocessConfig, Task,
)
from src.orchestrator import DatasetInput  # noqa: E402
from src.runner import greedy_generate, preprocess_image, rank_scores  # noqa: E402

# severity 1 = warning
SESSION_LOG_LEVEL = 1


class InputError(Exception):
    """An input that cannot be turned into model feeds"""


def open_session(model_path: str) -> onnxruntime.InferenceSession:
    options = onnxruntime.SessionOptions()
    options.log_severity_level = SESSION_LOG_LEVEL
    # keep the optimized graph as written
    options.graph_optimization_level = onnxruntime.GraphOptimizationLevel.ORT_DISABLE_ALL
    return onnxruntime.InferenceSession(model_path, sess_options=options, providers=["CPUExecutionProvider"])


def load_tokenizer(cfg: PreprocessConfig):
    if not cfg.tokenizer:
        raise InputError("text tasks need a 'tokenizer' in the preprocessing settings")
    from transformers import AutoTokenizer
    return AutoTokenizer.from_pretrained(cfg.tokenizer)


def _image(item: DatasetInput, cfg: PreprocessConfig) -> np.ndarray:
    if not item.location:
        raise InputError(f"{item.input_id}: no image location")
    try:
        return preprocess_image(item.location, cfg)
    except OSError as e:
        raise InputError(f"{item.input_id}: {e}")


def _text_feeds(session, encoded) -> dict:
    names = {i.name for i in session.get_inputs()}
    return {k: np.asarray(v, dtype=np.int64) for k, v in encoded.items() if k in names}


def classify(session, item, cfg):
    x = _image(item, cfg)
    scores = session.run(None, {session.get_inputs()[0].name: x})[0]
    return rank_scores(np.asarray(scores).ravel(), cfg.outputs_logits)


def detect(session, item, cfg):
    # outputs: boxes [N, 4] in (x1, y1, x2, y2), labels [N], scores [N]
    x = _image(item, cfg)
    boxes, labels, scores = session.run(None, {session.get_inputs()[0].name: x})[:3]
    boxes = np.asarray(boxes).reshape(-1, 4)
    items = [
        Detection(label=int(l), score=float(s), box=tuple(float(v) for v in b))
        for b, l, s in zip(boxes, np.asarray(labels).ravel(), np.asarray(scores).ravel())
    ]
    return Detections(items=tuple(sorted(items, key=lambda d: (-d.score, d.label))))


def generate(session, item, cfg, tokenizer):
    prompt = item.fields.get("prompt", item.fields.get("text", ""))
    prompt_ids = tokenizer(prompt, truncation=cfg.truncation, max_length=cfg.max_length)["input_ids"]
    input_name = session.get_inputs()[0].name

    def step(ids):
        logits = session.run(None, {input_name: np.asarray([ids], dtype=np.int64)})[0]
        return np.asarray(logits)[0, -1]

    eos = cfg.eos_token_id if cfg.eos_token_id is not None else tokenizer.eos_token_id
    ids = greedy_generate(step, prompt_ids, eos, max_new_tokens=cfg.max_new_tokens, window=cfg.max_length)
    return GeneratedText(text=tokenizer.decode(ids, skip_special_tokens=True))


def answer(session, item, cfg, tokenizer):
    question, context = item.fields.get("question", ""), item.fields.get("context", "")
    encoded = tokenizer(question, context, truncation=cfg.truncation, max_length=cfg.max_length,
                        return_tensors="np")
    outputs = [np.asarray(o, dtype=np.float64) for o in session.run(None, _text_feeds(session, encoded))]
    # start and end logits stack into one (outputs, ...) tensor
    if all(o.shape == outputs[0].shape for o in outputs):
        tensor = np.stack(outputs)
    else:
        tensor = np.concatenate([o.ravel() for o in outputs])
    return AnswerTensor(shape=tensor.shape, values=tuple(tensor.ravel().tolist()))


def sentiment(session, item, cfg, tokenizer):
    encoded = tokenizer(item.fields.get("text", ""), truncation=cfg.truncation, max_length=cfg.max_length,
                        return_tensors="np")
    logits = np.asarray(session.run(None, _text_feeds(session, encoded))[0]).ravel()
    if logits.size == 1:
        return BinaryLabel(value=int(logits[0] > 0))
    return BinaryLabel(value=int(np.argmax(logits) == 1))


HANDLERS = {
    Task.CLASSIFICATION: classify,
    Task.DETECTION: detect,
    Task.TEXT_GENERATION: generate,
    Task.QUESTION_ANSWERING: answer,
    Task.SENTIMENT: sentiment,
}
TEXT_TASKS = {Task.TEXT_GENERATION, Task.QUESTION_ANSWERING, Task.SENTIMENT}


def run(args) -> int:
    task = Task(args.task)
    cfg = PreprocessConfig.from_dict(json.loads(Path(args.preprocess).read_text(encoding="utf-8"))) \
        if args.preprocess else PreprocessConfig()
    items = [DatasetInput.from_dict(json.loads(line))
             for line in Path(args.inputs).read_text(encoding="utf-8").splitlines() if line.strip()]

    session = open_session(args.model)
    handler = HANDLERS[task]
    extra = (load_tokenizer(cfg),) if task in TEXT_TASKS else ()

    records = []
    for item in items:
        started = time.perf_counter()
        try:
            payload = handler(session, item, cfg, *extra)
        except (InputError, ValueError, KeyError) as e:
            payload = ErrorPayload(message=str(e))
        records.append(InferenceRecord(item.input_id, payload, wall_time=time.perf_counter() - started))

    Path(args.out).write_text(json.dumps([r.to_dict() for r in records]), encoding="utf-8")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="onnxruntime runner adapter")
    parser.add_argument("--model", required=True)
    parser.add_argument("--inputs", required=True)
    parser.add_argument("--task", required=True, choices=[t.value for t in Task])
    parser.add_argument("--out", required=True)
    parser.add_argument("--preprocess")
    args = parser.parse_args(argv)
    try:
        return run(args)
    except Exception as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
