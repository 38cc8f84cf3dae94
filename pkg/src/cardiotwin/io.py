"""CSV/JSON persistence with provenance metadata.

CSV files start with one ``# meta: {...}`` comment line holding the seeds
and config hash that produced them; numbers are written with 9 significant
digits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import FinetuneDataset, Measurement, PretextDataset, PretextExample
from .model import LEARNABLE


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(_jsonable(dict(config)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def with_provenance(meta: Mapping[str, Any]) -> dict:
    out = _jsonable(dict(meta))
    out["config_hash"] = config_hash({k: v for k, v in out.items() if k != "config_hash"})
    return out


def fmt(x: float) -> str:
    return f"{x:.9g}"


def csv_text(header: Sequence[str], rows: Iterable[Sequence[float]], meta: Mapping[str, Any] | None = None) -> str:
    buf = io.StringIO()
    if meta is not None:
        buf.write("# meta: " + json.dumps(with_provenance(meta), sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, meta=None) -> Path:
    path = Path(path)
    path.write_text(csv_text(header, rows, meta))
    return path


def prepend_meta(text: str, meta: Mapping[str, Any]) -> str:
    return "# meta: " + json.dumps(with_provenance(meta), sort_keys=True) + "\n" + text


def read_csv(path) -> tuple[list[str], np.ndarray, dict]:
    meta: dict = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# meta: "):
            meta = json.loads(line[len("# meta: "):])
        elif line and not line.startswith("#"):
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    table = np.array([[float(v) for v in row] for row in reader], dtype=float)
    if table.size == 0:
        table = table.reshape(0, len(header))
    return header, table, meta


def write_json(path, obj: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    payload = _jsonable(dict(obj))
    if meta is not None:
        payload["meta"] = with_provenance(meta)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


PRETEXT_HEADER = [f"theta_{i + 1}" for i in range(len(LEARNABLE))] + ["v_ed", "v_es"]


def finetune_header(dim: int) -> list[str]:
    return [f"y_{i + 1}" for i in range(dim)] + ["v_ed", "v_es"] + [f"theta_{i + 1}" for i in range(len(LEARNABLE))]


def save_pretext(ds: PretextDataset, csv_path) -> tuple[Path, Path]:
    csv_path = Path(csv_path)
    rows = [[*e.theta, e.v_ed, e.v_es] for e in ds.examples]
    meta = {**ds.meta, "columns_theta": list(LEARNABLE), "n_examples": len(ds)}
    write_csv(csv_path, PRETEXT_HEADER, rows, meta)
    sidecar = csv_path.with_suffix(".json")
    write_json(sidecar, {"failed_indices": ds.failed}, meta)
    return csv_path, sidecar


def load_pretext(csv_path) -> PretextDataset:
    header, table, meta = read_csv(csv_path)
    if header != PRETEXT_HEADER:
        raise ValueError(f"not a pretext dataset header: {header[:3]}...")
    k = len(LEARNABLE)
    examples = [PretextExample(row[:k].copy(), float(row[k]), float(row[k + 1])) for row in table]
    return PretextDataset(examples, [], meta)


def save_finetune(ds: FinetuneDataset, csv_path) -> tuple[Path, Path]:
    csv_path = Path(csv_path)
    dim = len(ds.measurements[0].y)
    rows = [[*m.y, m.v_ed, m.v_es, *m.true_theta] for m in ds.measurements]
    meta = {**ds.meta, "columns_theta": list(LEARNABLE), "n_examples": len(ds), "measurement_dim": dim}
    write_csv(csv_path, finetune_header(dim), rows, meta)
    sidecar = csv_path.with_suffix(".json")
    write_json(sidecar, {"failed_indices": ds.failed}, meta)
    return csv_path, sidecar


def load_finetune(csv_path) -> FinetuneDataset:
    header, table, meta = read_csv(csv_path)
    k = len(LEARNABLE)
    dim = len(header) - 2 - k
    if dim < 1 or header != finetune_header(dim):
        raise ValueError("not a finetune dataset header")
    ms = [Measurement(row[:dim].copy(), float(row[dim]), float(row[dim + 1]), row[dim + 2:].copy())
          for row in table]
    return FinetuneDataset(ms, [], meta)
