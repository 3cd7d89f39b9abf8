#!/usr/bin/env python3
"""
Artifact Service
Output files of a scenario run: KRF1 field checkpoints, CSV tables, PGM
heatmaps and the per-directory manifest.
"""

import csv
import io
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from PIL import Image

from krflow import __version__
from krflow.config import log
from krflow.models import (
    CheckResult,
    DiagnosticRow,
    DistanceField,
    EstimateReport,
    FlowState,
    HolderFit,
    Manifest,
    ScalarField,
    TorusGrid,
)

MAGIC = "KRF1"
MANIFEST = "manifest.json"

DISTANCE_COLUMNS = ["source_x", "source_y", "target_x", "target_y", "d_value", "method", "metric_tag", "t_or_limit"]
HOLDER_COLUMNS = ["label", "exponent", "constant", "residual", "direction", "pairs", "slope"]
REPORT_COLUMNS = ["check_id", "scenario", "verdict", "value", "tolerance", "provenance", "optional", "detail"]


def _number(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


class ArtifactService:
    def __init__(self, directory: str, config_hash: str, seed: int, force: bool = False):
        """Initialize artifact service for one output directory"""
        self.directory = Path(directory)
        self.config_hash = config_hash
        self.seed = seed
        os.makedirs(self.directory, exist_ok=True)
        self.manifest = self._open_manifest(force)

    # ------------------------------------------------------------------
    # Manifest
    # ------------------------------------------------------------------

    def _open_manifest(self, force: bool) -> Manifest:
        path = self.directory / MANIFEST
        if path.exists():
            existing = Manifest.model_validate_json(path.read_text(encoding="utf-8"))
            if existing.config_hash == self.config_hash:
                return existing
            if not force:
                raise ValueError(
                    f"mixed provenance: {self.directory} holds outputs of config "
                    f"{existing.config_hash[:12]}, this run is {self.config_hash[:12]}; use --force to replace them"
                )
            log(f"⚠️ Replacing outputs of config {existing.config_hash[:12]} in {self.directory}")
            for name in existing.files:
                stale = self.directory / name
                if stale.exists():
                    stale.unlink()
        return Manifest(
            config_hash=self.config_hash,
            seed=self.seed,
            versions={"krflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
            created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def _register(self, path: Path) -> Path:
        name = path.name
        if name not in self.manifest.files:
            self.manifest.files.append(name)
        (self.directory / MANIFEST).write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        log(f"📄 Wrote {path}")
        return path

    def path(self, name: str) -> Path:
        return self.directory / name

    # ------------------------------------------------------------------
    # KRF1 fields
    # ------------------------------------------------------------------

    def write_field(self, name: str, kind: str, t: float, blocks: Sequence[np.ndarray]) -> Path:
        """Header 'KRF1 <kind> <n> <t> hash=<hash>' then little-endian float64 blocks."""
        n = blocks[0].shape[0]
        if any(b.shape != (n, n) for b in blocks):
            raise ValueError("KRF1 blocks must all be n x n")
        header = f"{MAGIC} {kind} {n} {t!r} hash={self.config_hash}\n".encode("ascii")
        payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
        path = self.path(name)
        path.write_bytes(header + payload)
        return self._register(path)

    @staticmethod
    def read_field(path) -> Tuple[str, int, float, List[np.ndarray], Optional[str]]:
        """(kind, n, t, blocks, config hash or None) of a KRF1 file."""
        data = Path(path).read_bytes()
        end = data.find(b"\n")
        if end < 0:
            raise ValueError(f"{path}: missing KRF1 header line")
        parts = data[:end].decode("ascii").split()
        if len(parts) not in (4, 5) or parts[0] != MAGIC:
            raise ValueError(f"{path}: not a KRF1 file (header {data[:end][:40]!r})")
        kind, n, t = parts[1], int(parts[2]), float(parts[3])
        stamp = parts[4][len("hash="):] if len(parts) == 5 and parts[4].startswith("hash=") else None
        values = np.frombuffer(data[end + 1:], dtype="<f8")
        if values.size == 0 or values.size % (n * n):
            raise ValueError(f"{path}: payload of {values.size} values is not a whole number of {n}x{n} blocks")
        blocks = [b.reshape(n, n).copy() for b in np.split(values, values.size // (n * n))]
        return kind, n, t, blocks, stamp

    def write_checkpoint(self, index: int, state: FlowState) -> Path:
        return self.write_field(
            f"checkpoint_{index:02d}.krf", f"checkpoint-j{state.level}", state.t,
            [state.phi.values, state.u.values],
        )

    def load_checkpoints(self) -> List[FlowState]:
        """States of the checkpoints in the directory, ascending t."""
        states = []
        for path in sorted(self.directory.glob("checkpoint_*.krf")):
            kind, n, t, blocks, stamp = self.read_field(path)
            if stamp is not None and stamp != self.config_hash:
                raise ValueError(f"{path} belongs to config {stamp[:12]}")
            if len(blocks) != 2:
                raise ValueError(f"{path}: checkpoint needs phi and u blocks, found {len(blocks)}")
            grid = TorusGrid(n)
            level = int(kind.split("-j")[-1]) if "-j" in kind else 0
            states.append(FlowState(t=t, phi=ScalarField(grid, blocks[0]), u=ScalarField(grid, blocks[1]), level=level))
        return sorted(states, key=lambda s: s.t)

    def checkpoint_at(self, t: float) -> FlowState:
        states = self.load_checkpoints()
        if not states:
            raise FileNotFoundError(f"no checkpoints in {self.directory}; run the 'run' subcommand first")
        for state in states:
            if abs(state.t - t) <= 1e-12 * max(1.0, t):
                return state
        raise ValueError(f"time {t} not on ladder; available: {[s.t for s in states]}")

    # ------------------------------------------------------------------
    # CSV tables
    # ------------------------------------------------------------------

    def _write_csv(self, name: str, columns: List[str], rows: Iterable[Iterable], append: bool = False) -> Path:
        path = self.path(name)
        fresh = not append or not path.exists()
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        if fresh:
            buffer.write(f"# config_hash={self.config_hash}\n")
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_number(v) for v in row])
        with open(path, "w" if fresh else "a", encoding="utf-8", newline="") as handle:
            handle.write(buffer.getvalue())
        return self._register(path)

    @staticmethod
    def read_csv(path) -> Tuple[Optional[str], List[Dict[str, str]]]:
        """(config hash, rows) of a table written by this service."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        stamp = None
        if lines and lines[0].startswith("# config_hash="):
            stamp = lines[0][len("# config_hash="):]
            lines = lines[1:]
        return stamp, list(csv.DictReader(lines))

    def write_diagnostics(self, rows: Sequence[DiagnosticRow]) -> Path:
        columns = list(DiagnosticRow.model_fields)
        return self._write_csv("diagnostics.csv", columns, ([getattr(r, c) for c in columns] for r in rows))

    def write_distances(self, fields: Sequence[DistanceField], t_or_limit: str, stride: int = None,
                        append: bool = False) -> Path:
        """Distance values on a node sublattice (stride chosen for at most 64 x 64 targets per source)."""
        rows = []
        for f in fields:
            n = f.grid.n
            step = stride or max(1, n // 64)
            for iy in range(0, n, step):
                for ix in range(0, n, step):
                    tx, ty = f.grid.point_of(iy, ix)
                    rows.append((f.source[0], f.source[1], tx, ty, f.values[iy, ix], f.method, f.metric_tag, t_or_limit))
        return self._write_csv("distances.csv", DISTANCE_COLUMNS, rows, append=append)

    def append_holder(self, label: str, fit: HolderFit) -> Path:
        row = (label, fit.exponent, fit.constant, fit.residual, fit.direction, fit.pairs,
               "" if fit.slope is None else fit.slope)
        return self._write_csv("holder.csv", HOLDER_COLUMNS, [row], append=True)

    def write_report(self, report: EstimateReport, name: str = "report.csv") -> Path:
        rows = (
            (c.check_id, c.scenario, c.verdict, c.value, c.tolerance, c.provenance, c.optional, c.detail)
            for c in report.checks
        )
        return self._write_csv(name, REPORT_COLUMNS, rows)

    def read_report(self) -> EstimateReport:
        path = self.path("report.csv")
        if not path.exists():
            raise FileNotFoundError(f"no report.csv in {self.directory}; run the 'verify' subcommand first")
        stamp, rows = self.read_csv(path)
        if stamp is not None and stamp != self.config_hash:
            raise ValueError(f"{path} belongs to config {stamp[:12]}")
        checks = [
            CheckResult(
                check_id=r["check_id"], scenario=r["scenario"], verdict=r["verdict"],
                value=float(r["value"]), tolerance=float(r["tolerance"]), provenance=r["provenance"],
                optional=r["optional"] == "true", detail=r["detail"],
            )
            for r in rows
        ]
        return EstimateReport(scenario=checks[0].scenario if checks else "", checks=checks)

    # ------------------------------------------------------------------
    # Heatmaps
    # ------------------------------------------------------------------

    def write_heatmap(self, name: str, values: np.ndarray) -> Path:
        """8-bit portable graymap, min -> black, max -> white, y axis up."""
        values = np.asarray(values, dtype=float)
        finite = np.isfinite(values)
        if not finite.any():
            raise ValueError(f"heatmap {name} has no finite values")
        low, high = values[finite].min(), values[finite].max()
        span = high - low if high > low else 1.0
        scaled = np.where(finite, (values - low) / span, 0.0)
        pixels = np.flipud(np.rint(255.0 * scaled).astype(np.uint8))
        path = self.path(name)
        Image.fromarray(pixels).save(path, format="PPM")
        return self._register(path)
