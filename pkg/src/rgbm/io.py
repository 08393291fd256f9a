"""Dataset loaders, table writers and the run manifest.

Input CSVs: ``shares.csv`` (``year,q,share``), ``wealth_per_capita.csv``
(``year,value``) and ``closes.csv`` (``date,close``, ISO dates).  Output
tables are rendered with 12 significant digits and ``\\n`` line endings; a
missing value is an empty field.  Every write goes to a temporary file in
the destination directory and is renamed into place.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from datetime import date
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .calibration import CalibrationConfig, Datasets, TauSeries, ValidationResult
from .ensemble import Ensemble
from .errors import (
    DataError,
    DuplicateKeyError,
    EmptyDatasetError,
    ManifestError,
    ParseError,
    ValidationError,
)
from .inequality import ShareTarget

__all__ = [
    "FORMAT_VERSION",
    "DatasetPaths",
    "RunManifest",
    "fmt",
    "atomic_write_text",
    "write_table",
    "read_table",
    "load_share_series",
    "load_wealth_per_capita",
    "load_daily_closes",
    "load_datasets",
    "write_tau_series",
    "read_tau_series",
    "write_validation",
    "write_snapshot",
    "read_snapshot",
    "load_manifest",
    "dump_manifest",
]

FORMAT_VERSION = "1"


def fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return format(v, ".12g")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_table(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_table(path, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    """Rows of a CSV with exactly ``header``, as ``(line_number, fields)``."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: dataset file not found") from None
    if not lines or all(not any(f.strip() for f in row) for row in lines):
        raise EmptyDatasetError(f"{path}: file is empty")
    got = [h.strip() for h in lines[0]]
    if got != list(header):
        raise ParseError(f"{path}:1: expected header {','.join(header)!r}, got {','.join(got)!r}")
    rows = []
    for lineno, row in enumerate(lines[1:], start=2):
        if not any(f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rows.append((lineno, [f.strip() for f in row]))
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    return rows


def _parse(path, lineno: int, text: str, kind):
    try:
        value = kind(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: cannot parse {text!r} as {kind.__name__}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ValidationError(f"{path}:{lineno}: non-finite value {text!r}")
    return value


def load_share_series(path) -> dict[int, tuple[ShareTarget, ...]]:
    out: dict[int, dict[float, ShareTarget]] = {}
    for lineno, (y, q, s) in read_table(path, ("year", "q", "share")):
        year = _parse(path, lineno, y, int)
        q, share = _parse(path, lineno, q, float), _parse(path, lineno, s, float)
        if not 0.0 < q < 1.0:
            raise ValidationError(f"{path}:{lineno}: q={q} outside (0, 1)")
        if not 0.0 < share <= 1.0:
            raise ValidationError(f"{path}:{lineno}: share={share} outside (0, 1]")
        per_year = out.setdefault(year, {})
        if q in per_year:
            raise DuplicateKeyError(f"{path}:{lineno}: duplicate (year, q) = ({year}, {q})")
        per_year[q] = ShareTarget(q, share)
    return {y: tuple(sorted(v.values(), key=lambda t: -t.q)) for y, v in sorted(out.items())}


def load_wealth_per_capita(path) -> dict[int, float]:
    out: dict[int, float] = {}
    for lineno, (y, v) in read_table(path, ("year", "value")):
        year = _parse(path, lineno, y, int)
        if year in out:
            raise DuplicateKeyError(f"{path}:{lineno}: duplicate year {year}")
        out[year] = _parse(path, lineno, v, float)
    return dict(sorted(out.items()))


def load_daily_closes(path) -> dict[date, float]:
    out: dict[date, float] = {}
    for lineno, (d, c) in read_table(path, ("date", "close")):
        day = _parse(path, lineno, d, date.fromisoformat)
        close = _parse(path, lineno, c, float)
        if not close > 0:
            raise ValidationError(f"{path}:{lineno}: close must be positive, got {close}")
        if day in out:
            raise DuplicateKeyError(f"{path}:{lineno}: duplicate date {day.isoformat()}")
        out[day] = close
    return dict(sorted(out.items()))


def load_datasets(shares, wealth_per_capita=None, closes=None) -> Datasets:
    return Datasets(
        shares=load_share_series(shares),
        wealth_per_capita=load_wealth_per_capita(wealth_per_capita) if wealth_per_capita else None,
        daily_closes=load_daily_closes(closes) if closes else None,
    )


TAU_HEADER = ("year", "tau", "stderr", "spinup_flag")


def write_tau_series(path, series: TauSeries) -> None:
    write_table(path, TAU_HEADER,
                zip(series.years, series.tau, series.stderr, series.spinup))


def read_tau_series(path, provenance: str = "raw") -> TauSeries:
    years, tau, se, spin = [], [], [], []
    for lineno, (y, t, s, f) in read_table(path, TAU_HEADER):
        years.append(_parse(path, lineno, y, int))
        tau.append(_parse(path, lineno, t, float))
        se.append(_parse(path, lineno, s, float) if s else math.nan)
        spin.append(_parse(path, lineno, f, int) == 1 if f else False)
    return TauSeries(years=years, tau=tau, stderr=se, provenance=provenance, spinup=spin)


def write_validation(path, result: ValidationResult) -> None:
    write_table(path, ("year", "share_data", "share_model", "abs_err"),
                zip(result.years, result.share_data, result.share_model, result.abs_err))


def write_snapshot(path, ensemble: Ensemble) -> None:
    write_table(path, ("agent", "wealth"), enumerate(ensemble.wealths))


def read_snapshot(path, time: float = 0.0, seed: int = 0, step_count: int = 0) -> Ensemble:
    rows = read_table(path, ("agent", "wealth"))
    w = np.array([_parse(path, n, v, float) for n, (_, v) in rows])
    return Ensemble(wealths=w, time=time, seed=seed, step_count=step_count)


# -- manifest --------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetPaths:
    shares: str
    wealth_per_capita: Optional[str] = None
    closes: Optional[str] = None


@dataclass(frozen=True)
class RunManifest:
    datasets: DatasetPaths
    q: float = 0.1
    output_dir: str = "out"
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    format_version: str = FORMAT_VERSION
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    def load_datasets(self) -> Datasets:
        d = self.datasets
        return load_datasets(self.resolve(d.shares), self.resolve(d.wealth_per_capita),
                             self.resolve(d.closes))


def _check_keys(block: Any, allowed: Iterable[str], where: str) -> dict:
    if not isinstance(block, dict):
        raise ManifestError(f"{where} must be an object")
    allowed = set(allowed)
    for key in block:
        if key not in allowed:
            raise ManifestError(f"unknown field {where}.{key}" if where else f"unknown field {key}")
    return block


_TOP_FIELDS = ("format_version", "q", "output_dir", "datasets", "calibration")
_CAL_FIELDS = tuple(f.name for f in fields(CalibrationConfig))
_INT_FIELDS = ("n_agents", "n_runs", "seed", "substeps_per_year", "spin_up_years",
               "smoothing_window_years", "max_iter")


def manifest_from_dict(raw: Any, base_dir: Path = Path(".")) -> RunManifest:
    _check_keys(raw, _TOP_FIELDS, "")
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"format_version must be {FORMAT_VERSION!r}, got {version!r}")
    ds = _check_keys(raw.get("datasets"), (f.name for f in fields(DatasetPaths)), "datasets")
    if not isinstance(ds.get("shares"), str):
        raise ManifestError("datasets.shares must name the share-series CSV")
    cal = _check_keys(raw.get("calibration", {}), _CAL_FIELDS, "calibration")
    for name in _INT_FIELDS:
        if name in cal and (isinstance(cal[name], bool) or not isinstance(cal[name], int)):
            raise ManifestError(f"calibration.{name} must be an integer, got {cal[name]!r}")
    try:
        calibration = CalibrationConfig(**cal)
        q = float(raw.get("q", 0.1))
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid calibration block: {exc}") from None
    return RunManifest(datasets=DatasetPaths(**ds), q=q,
                       output_dir=str(raw.get("output_dir", "out")),
                       calibration=calibration, format_version=version, base_dir=base_dir)


def load_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return manifest_from_dict(raw, base_dir=path.parent)


def manifest_to_dict(manifest: RunManifest) -> dict:
    cal = asdict(manifest.calibration)
    cal["objective"] = manifest.calibration.objective.value
    cal["tau_bracket"] = list(manifest.calibration.tau_bracket)
    return {
        "format_version": manifest.format_version,
        "q": manifest.q,
        "output_dir": manifest.output_dir,
        "datasets": asdict(manifest.datasets),
        "calibration": cal,
    }


def dump_manifest(path, manifest: RunManifest) -> None:
    atomic_write_text(path, json.dumps(manifest_to_dict(manifest), indent=2) + "\n")
