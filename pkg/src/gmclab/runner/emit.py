"""Result files: long-format CSV, JSON summary and manifest.

The CSV schema is ``replica,checkpoint,statistic,value``.  Rows that are
aggregates rather than per-replica values (closed forms, capacities) use
``replica = -1``.  Floats are written with ``repr`` so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

__all__ = ["Check", "Report", "emit_results", "CSV_HEADER"]

CSV_HEADER = ("replica", "checkpoint", "statistic", "value")


@dataclass
class Check:
    """One acceptance check: ``passed`` plus the numbers behind it."""

    name: str
    passed: bool
    value: float = math.nan
    target: float = math.nan
    se: float = math.nan
    detail: str = ""


@dataclass
class Report:
    """In-memory outcome of one experiment run."""

    experiment: str
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str = ""

    def add_values(self, t, statistic, values, replica_offset=0):
        """Per-replica values of one statistic at one checkpoint."""
        v = np.asarray(values, dtype=float).reshape(-1)
        self.rows.extend((replica_offset + i, float(t), statistic, float(x)) for i, x in enumerate(v))

    def add_aggregate(self, t, statistic, value):
        self.rows.append((-1, float(t), statistic, float(value)))

    def check(self, name, passed, value=math.nan, target=math.nan, se=math.nan, detail=""):
        c = Check(name, bool(passed), float(value), float(target), float(se), detail)
        self.checks.append(c)
        return c

    def moments(self, t, statistic, values):
        """Record mean and SE (sample SD over sqrt N) of per-replica values."""
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        self.summary.setdefault("moments", []).append(
            {"t": float(t), "statistic": statistic, "n": int(v.size), "mean": float(v.mean()), "se": se}
        )
        return float(v.mean()), se

    @property
    def passed(self):
        return not self.error and all(c.passed for c in self.checks)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return _json_safe(x.item())
    return x


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "scikit-learn", "pydantic", "click"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    from .. import __version__

    out["gmclab"] = __version__
    return out


def emit_results(report: Report, out_dir, config=None, config_sha=None, seed=None):
    """Write ``data.csv``, ``summary.json`` and ``manifest.json`` into ``out_dir``.

    Returns the paths written.  I/O errors propagate with the offending path.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    csv_path, json_path, man_path = out / "data.csv", out / "summary.json", out / "manifest.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep, t, stat, val in report.rows:
            w.writerow((int(rep), repr(float(t)), stat, repr(float(val))))
    summary = {
        "experiment": report.experiment,
        "passed": report.passed,
        "error": report.error,
        "checks": [asdict(c) for c in report.checks],
        **report.summary,
    }
    json_path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    manifest = {
        "experiment": report.experiment,
        "config_sha256": config_sha,
        "seed": seed,
        "config": config,
        "versions": _versions(),
        "files": {p.name: _sha256(p) for p in (csv_path, json_path)},
    }
    man_path.write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n")
    return [csv_path, json_path, man_path]
