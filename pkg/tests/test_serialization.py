"""Tests for artifact reading and writing."""

import os

import numpy as np
import pytest

from rslds.errors import ArtifactError, ValidationError
from rslds.model import Dataset, EmissionFamily
from rslds.serialization import (
    NdjsonWriter,
    load_params,
    params_digest,
    read_csv,
    read_data,
    read_json,
    read_ndjson,
    read_paths,
    run_length_decode,
    run_length_encode,
    save_params,
    write_data,
    write_paths,
)

from conftest import make_model


def test_run_length_encoding():
    """Runs are [state, length] pairs that decode back to the path."""
    z = np.array([2, 2, 0, 1, 1, 1])
    assert run_length_encode(z) == [[2, 2], [0, 1], [1, 3]]
    np.testing.assert_array_equal(run_length_decode(run_length_encode(z)), z)
    assert run_length_encode(np.zeros(0)) == []


def test_params_file_round_trip(tmp_path):
    """Saved parameters load back identically, and extra keys are ignored on load."""
    params, _ = make_model('rslds-sticky', K=3)
    path = os.path.join(tmp_path, 'nested', 'params.json')
    save_params(path, params, extra={'generator': 'test'})
    loaded = load_params(path)
    assert read_json(path)['generator'] == 'test'
    for name in ('A', 'b', 'Q', 'C', 'd', 'S', 'R', 'r', 'pi'):
        np.testing.assert_allclose(getattr(loaded, name), getattr(params, name), rtol=1e-15)
    assert loaded.transitions == params.transitions
    assert params_digest(loaded) == params_digest(params)


def test_params_digest_detects_changes():
    """Any parameter change alters the digest."""
    params, _ = make_model('rslds')
    assert params_digest(params) != params_digest(params.with_updates(b=params.b + 1e-9))


def test_malformed_params_document(tmp_path):
    """Missing keys and invalid JSON are validation errors; missing files are artifact errors."""
    path = os.path.join(tmp_path, 'bad.json')
    with open(path, 'w', encoding='utf-8') as f:
        f.write('{"variant": "rslds"}')
    with pytest.raises(ValidationError):
        load_params(path)
    with open(path, 'w', encoding='utf-8') as f:
        f.write('{not json')
    with pytest.raises(ValidationError):
        read_json(path)
    with pytest.raises(ArtifactError):
        read_json(os.path.join(tmp_path, 'missing.json'))


def test_data_csv_leaves_masked_rows_blank(tmp_path):
    """Masked rows are written empty and read back as masked."""
    y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    data = Dataset(y=y, mask=np.array([True, False, True]), emission_family=EmissionFamily.BERNOULLI)
    path = os.path.join(tmp_path, 'data.csv')
    write_data(path, data)
    header, rows = read_csv(path)
    assert header == ['t', 'observed', 'y0', 'y1']
    assert rows[1] == ['1', '0', '', '']
    back = read_data(path, EmissionFamily.BERNOULLI)
    np.testing.assert_array_equal(back.mask, data.mask)
    np.testing.assert_array_equal(back.y, data.y)


def test_paths_csv_round_trip(tmp_path, small_problem):
    """Latent paths survive the CSV export, with y columns alongside."""
    _, _, path, data = small_problem
    out = os.path.join(tmp_path, 'paths.csv')
    write_paths(out, path, data)
    header, _ = read_csv(out)
    assert header[:4] == ['t', 'z', 'x0', 'x1'] and header[-1] == 'y2'
    back = read_paths(out)
    np.testing.assert_array_equal(back.z, path.z)
    np.testing.assert_array_equal(back.x, path.x)


def test_read_data_rejects_foreign_csv(tmp_path):
    """A CSV without the t,observed prefix is rejected."""
    path = os.path.join(tmp_path, 'other.csv')
    with open(path, 'w', encoding='utf-8') as f:
        f.write('a,b\n1,2\n')
    with pytest.raises(ValidationError):
        read_data(path, EmissionFamily.GAUSSIAN)


def test_ndjson_writer(tmp_path):
    """Records are appended one JSON object per line."""
    path = os.path.join(tmp_path, 'trace.ndjson')
    with NdjsonWriter(path) as writer:
        writer.write({'iteration': 1})
        writer.write({'iteration': 2, 'z': [[0, 3]]})
    assert read_ndjson(path) == [{'iteration': 1}, {'iteration': 2, 'z': [[0, 3]]}]
