"""
Optimizer adapter over onnx + onnxoptimizer

Usage:
    python adapters/onnx_optimizer_adapter.py --list-passes
    python adapters/onnx_optimizer_adapter.py --input in.onnx --output out.onnx --default
    python adapters/onnx_optimizer_adapter.py --input in.onnx --output out.onnx --passes a,b
    python adapters/onnx_optimizer_adapter.py --validate --input out.onnx
    python adapters/onnx_optimizer_adapter.py --ir-version --input out.onnx

Exit status is nonzero when optimization fails or the model is invalid;
diagnostics go to stderr.
"""

import argparse
import sys
import traceback
from pathlib import Path

import onnx
import onnxoptimizer

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.optimizer_backend import KNOWN_UNSTABLE_PASSES  # noqa: E402


def list_passes() -> int:
    default = set(onnxoptimizer.get_fuse_and_elimination_passes())
    for name in onnxoptimizer.get_available_passes():
        tags = (["default"] if name in default else []) + (["unstable"] if name in KNOWN_UNSTABLE_PASSES else [])
        print(" ".join([name] + tags))
    return 0


def optimize(source: str, target: str, passes) -> int:
    model = onnx.load(source)
    # None selects the fuse-and-elimination bundle
    optimized = onnxoptimizer.optimize(model, passes)
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    onnx.save(optimized, target)
    return 0


def validate(path: str) -> int:
    try:
        onnx.checker.check_model(onnx.load(path), full_check=True)
    except (onnx.checker.ValidationError, onnx.shape_inference.InferenceError) as e:
        print(str(e), file=sys.stderr)
        return 1
    return 0


def ir_version(path: str) -> int:
    print(onnx.load(path, load_external_data=False).ir_version)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="onnxoptimizer adapter")
    parser.add_argument("--list-passes", action="store_true")
    parser.add_argument("--validate", action="store_true")
    parser.add_argument("--ir-version", action="store_true")
    parser.add_argument("--input")
    parser.add_argument("--output")
    parser.add_argument("--passes", help="comma-separated pass names")
    parser.add_argument("--default", action="store_true")
    args = parser.parse_args(argv)

    if args.list_passes:
        return list_passes()
    if not args.input:
        parser.error("--input is required")
    if args.validate:
        return validate(args.input)
    if args.ir_version:
        return ir_version(args.input)
    if not args.output or not (args.default or args.passes):
        parser.error("optimization needs --output and one of --passes or --default")

    passes = None if args.default else [p for p in args.passes.split(",") if p]
    try:
        return optimize(args.input, args.output, passes)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
