"""Validation of exported files, including an end-to-end run through the
inference engine's CLI (its reader re-validates every record on the way in).
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import snfx

ROW_SUM_TOL = 1e-4
ENGINE_CLI = "schema-infer"


@dataclass
class VerifyReport:
    header: snfx.Header
    records_checked: int = 0
    problems: list[str] = field(default_factory=list)
    engine_ran: bool = False
    engine_ok: bool = False

    @property
    def passed(self) -> bool:
        return not self.problems and (self.engine_ok or not self.engine_ran)

    def format(self) -> str:
        h = self.header
        lines = [
            f"header: n={h.n} zeta={h.zeta} d={h.d} grid={h.grid_h}x{h.grid_w} "
            f"layer={h.layer_index} records={h.record_count}",
            f"records checked: {self.records_checked}",
        ]
        for p in self.problems:
            lines.append(f"  problem: {p}")
        if self.engine_ran:
            lines.append(f"engine pipeline (build-vocab + feat2graph): {'ok' if self.engine_ok else 'FAILED'}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def check_records(path) -> VerifyReport:
    header, records = snfx.read(path)
    report = VerifyReport(header=header)
    for rec in records:
        if not np.isfinite(rec.X).all():
            report.problems.append(f"record {rec.image_id}: non-finite embedding")
        if not np.isfinite(rec.attn).all():
            report.problems.append(f"record {rec.image_id}: non-finite attention")
        sums = rec.attn.sum(axis=1, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > ROW_SUM_TOL:
            report.problems.append(
                f"record {rec.image_id}: attention row sum off by {worst:.2e} (> {ROW_SUM_TOL})"
            )
        report.records_checked += 1
    if report.records_checked != header.record_count:
        report.problems.append(
            f"header declares {header.record_count} records, file held {report.records_checked}"
        )
    return report


def run_engine_pipeline(path, vocab_size: int = 8, seed: int = 0, cli: str = ENGINE_CLI) -> tuple[bool, str]:
    """Feed the file through the engine's build-vocab and feat2graph stages."""
    exe = shutil.which(cli)
    if exe is None:
        return False, f"{cli} not on PATH"
    with tempfile.TemporaryDirectory() as tmp:
        vocab = Path(tmp) / "vocab.snvw"
        graphs = Path(tmp) / "graphs.sngr"
        for argv in (
            [exe, "build-vocab", "--input", str(path), "--size", str(vocab_size), "--seed", str(seed), "--out", str(vocab)],
            [exe, "feat2graph", "--input", str(path), "--vocab", str(vocab), "--out", str(graphs)],
        ):
            proc = subprocess.run(argv, capture_output=True, text=True)
            if proc.returncode != 0:
                return False, f"{' '.join(argv[1:3])} failed: {proc.stderr.strip()}"
        if not graphs.exists():
            return False, "engine produced no graph file"
    return True, "ok"


def verify_export(path, run_engine: bool = True, vocab_size: int = 8) -> VerifyReport:
    report = check_records(path)
    if run_engine:
        ok, detail = run_engine_pipeline(path, vocab_size=vocab_size)
        report.engine_ran = True
        report.engine_ok = ok
        if not ok:
            report.problems.append(detail)
    return report
