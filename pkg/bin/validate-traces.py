#!/usr/bin/env python
"""Validate a trace file or a corpus manifest against the LinkML schema.

Trace files are read with the same reader the CLI uses, so the header record
becomes the ``flags`` slot and every episode line becomes an ``Episode``.
Manifests are recognised by name (manifest.jsonl).

Usage:
    poetry run python bin/validate-traces.py <traces.jsonl | manifest.jsonl>
"""
import json
import os
import sys
from pathlib import Path

from linkml.validator import validate

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.campaign_eval import read_traces, trace_record  # noqa: E402
from src.corpus_tools import MANIFEST_NAME, load_manifest  # noqa: E402

SCHEMA = Path(__file__).resolve().parent.parent / "schema" / "testbed_outputs.linkml.yaml"


def load_instance(path: Path) -> tuple:
    if path.name == MANIFEST_NAME:
        entries = [
            {"path": e.path, "sha256": e.sha256, "label": e.label, "manifest_category": e.category, "seed": e.seed}
            for e in load_manifest(path).entries
        ]
        return {"entries": entries}, "Manifest"
    flags, traces = read_traces(path)
    episodes = [trace_record(t) for t in traces]
    return {"flags": json.dumps(flags, sort_keys=True), "episodes": episodes}, "TraceFile"


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__)
        return 2
    path = Path(sys.argv[1])
    instance, target = load_instance(path)
    report = validate(instance, str(SCHEMA), target)
    if not report.results:
        print(f"VALID: {path} conforms to {SCHEMA.name}")
        return 0
    print(f"INVALID: {len(report.results)} problem(s) in {path}")
    for res in report.results[:25]:
        print(f"  [{res.severity}] {res.message}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
