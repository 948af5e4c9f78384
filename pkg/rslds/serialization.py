"""Reading and writing run artifacts.

JSON for parameters and metrics, CSV for time series, newline-delimited JSON
for sampler traces. Every I/O failure is re-raised as ArtifactError naming
the file.
"""

import csv
import hashlib
import json
import logging
import os
from typing import Iterable, Optional, Sequence

import numpy as np

from rslds.errors import ArtifactError, ValidationError
from rslds.model import Dataset, EmissionFamily, LatentPath, ModelParams, from_json_dict, to_json_dict
from rslds.settings import FILES

logger = logging.getLogger(__name__)

ENCODING = FILES['encoding']


def run_length_encode(z: np.ndarray) -> list[list[int]]:
    """[[state, length], ...] for a discrete path."""
    z = np.asarray(z, dtype=int)
    if z.size == 0:
        return []
    starts = np.flatnonzero(np.diff(z)) + 1
    bounds = np.concatenate([[0], starts, [z.size]])
    return [[int(z[a]), int(b - a)] for a, b in zip(bounds[:-1], bounds[1:])]


def run_length_decode(runs: Sequence[Sequence[int]]) -> np.ndarray:
    return np.concatenate([np.full(n, s, dtype=int) for s, n in runs]) if runs else np.zeros(0, dtype=int)


def params_digest(params: ModelParams) -> str:
    """sha256 of the canonical JSON form of the parameters."""
    blob = json.dumps(to_json_dict(params), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(blob.encode(ENCODING)).hexdigest()


def _ensure_dir(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_json(path: str, doc: dict):
    try:
        _ensure_dir(path)
        with open(path, 'w', encoding=ENCODING) as f:
            json.dump(doc, f, indent=2, sort_keys=True)
    except OSError as exc:
        raise ArtifactError(f'could not write {path}: {exc}') from exc
    logger.info(f'Wrote {path}')


def read_json(path: str) -> dict:
    try:
        with open(path, 'r', encoding=ENCODING) as f:
            return json.load(f)
    except OSError as exc:
        raise ArtifactError(f'could not read {path}: {exc}') from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f'{path} is not valid JSON: {exc}') from exc


def save_params(path: str, params: ModelParams, extra: Optional[dict] = None):
    doc = to_json_dict(params)
    if extra:
        doc.update(extra)
    write_json(path, doc)


def load_params(path: str) -> ModelParams:
    return from_json_dict(read_json(path))


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]):
    try:
        _ensure_dir(path)
        with open(path, 'w', encoding=ENCODING, newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise ArtifactError(f'could not write {path}: {exc}') from exc
    logger.info(f'Wrote {path}')


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, 'r', encoding=ENCODING, newline='') as f:
            reader = csv.reader(f)
            header = next(reader)
            return header, [row for row in reader]
    except OSError as exc:
        raise ArtifactError(f'could not read {path}: {exc}') from exc
    except StopIteration as exc:
        raise ValidationError(f'{path} is empty') from exc


def _fmt(v: float) -> str:
    return repr(float(v))


def write_paths(path: str, latent: LatentPath, data: Optional[Dataset] = None):
    """Time series export: t, z, x_0.., and y_0.. when data is given (masked y left blank)."""
    M = latent.x.shape[1]
    header = ['t', 'z'] + [f'x{m}' for m in range(M)]
    if data is not None:
        header += [f'y{n}' for n in range(data.N)]
    rows = []
    for t in range(latent.T):
        row = [t, int(latent.z[t])] + [_fmt(v) for v in latent.x[t]]
        if data is not None:
            row += [_fmt(v) for v in data.y[t]] if data.mask[t] else [''] * data.N
        rows.append(row)
    write_csv(path, header, rows)


def write_data(path: str, data: Dataset):
    header = ['t', 'observed'] + [f'y{n}' for n in range(data.N)]
    rows = [[t, int(data.mask[t])] + ([_fmt(v) for v in data.y[t]] if data.mask[t] else [''] * data.N)
            for t in range(data.T)]
    write_csv(path, header, rows)


def read_data(path: str, emission_family: EmissionFamily) -> Dataset:
    header, rows = read_csv(path)
    if header[:2] != ['t', 'observed']:
        raise ValidationError(f'{path} does not start with t,observed columns')
    N = len(header) - 2
    mask = np.array([row[1] == '1' for row in rows], dtype=bool)
    y = np.array([[float(v) if v != '' else 0.0 for v in row[2:2 + N]] for row in rows]).reshape(len(rows), N)
    return Dataset(y=y, mask=mask, emission_family=emission_family)


def read_paths(path: str) -> LatentPath:
    header, rows = read_csv(path)
    M = sum(1 for h in header if h.startswith('x'))
    z = np.array([int(row[1]) for row in rows], dtype=int)
    x = np.array([[float(v) for v in row[2:2 + M]] for row in rows]).reshape(len(rows), M)
    return LatentPath(z=z, x=x)


class NdjsonWriter:
    """Append-only newline-delimited JSON writer for sampler traces."""

    def __init__(self, path: str):
        self.path = path
        try:
            _ensure_dir(path)
            self._f = open(path, 'w', encoding=ENCODING)
        except OSError as exc:
            raise ArtifactError(f'could not open {path}: {exc}') from exc

    def write(self, record: dict):
        try:
            self._f.write(json.dumps(record, sort_keys=True) + '\n')
            self._f.flush()
        except OSError as exc:
            raise ArtifactError(f'could not append to {self.path}: {exc}') from exc

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_ndjson(path: str) -> list[dict]:
    try:
        with open(path, 'r', encoding=ENCODING) as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as exc:
        raise ArtifactError(f'could not read {path}: {exc}') from exc
