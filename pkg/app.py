"""
Command-line entry point for the differential-testing framework

Usage:
    python app.py list-passes
    python app.py run --config run.json [--chunks N] [--passes a,b | --default]
    python app.py localize --config run.json --model <id>
    python app.py report --summary results/
"""

from src.cli import main

if __name__ == "__main__":
    main()
