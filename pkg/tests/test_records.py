import re

import numpy as np
import pytest

from lambdappo.records import Record, RecordTable
from lambdappo.storages import CsvStorage, MemoryStorage

COLUMNS = ['t', 'demand', 'c1']


@pytest.fixture(params=['memory', 'csv'])
def table(request, tmp_path):
    if request.param == 'csv':
        storage = CsvStorage(str(tmp_path / 'table.csv'))
    else:
        storage = MemoryStorage()

    table_ = RecordTable(storage, COLUMNS, meta={'seed': 3})
    table_.insert_multiple({'t': t, 'demand': 1.0 - 0.1 * t, 'c1': t % 2}
                           for t in range(3))

    yield table_

    storage.close()


def test_insert(table):
    row_id = table.insert({'t': 3, 'demand': 0.5, 'c1': 0})

    assert row_id == 3
    assert len(table) == 4
    assert table.all()[-1] == {'t': 3, 'demand': 0.5, 'c1': 0}


def test_insert_multiple(table):
    row_ids = table.insert_multiple([{'t': 3, 'demand': 0.5, 'c1': 0},
                                     {'t': 4, 'demand': 0.5, 'c1': 1}])

    assert row_ids == [3, 4]
    assert len(table) == 5


def test_insert_invalid_row(table):
    with pytest.raises(ValueError):
        table.insert([1, 2, 3])

    with pytest.raises(ValueError, match='do not match'):
        table.insert({'t': 3, 'demand': 0.5})

    with pytest.raises(ValueError, match='do not match'):
        table.insert({'t': 3, 'demand': 0.5, 'c1': 0, 'extra': 1})


def test_all(table):
    rows = table.all()

    assert [row['t'] for row in rows] == [0, 1, 2]
    assert all(isinstance(row, Record) for row in rows)
    assert [row.row_id for row in rows] == [0, 1, 2]


def test_search(table):
    def violated(row):
        return row['c1'] == 1

    assert [row['t'] for row in table.search(violated)] == [1]

    # Served from the query cache
    assert table.search(violated) == table.search(violated)


def test_search_cache_cleared_on_write(table):
    def violated(row):
        return row['c1'] == 1

    assert len(table.search(violated)) == 1

    table.insert({'t': 3, 'demand': 0.5, 'c1': 1})

    assert len(table.search(violated)) == 2


def test_column(table):
    np.testing.assert_allclose(table.column('demand'), [1.0, 0.9, 0.8])
    assert table.column('t').tolist() == [0, 1, 2]

    with pytest.raises(KeyError):
        table.column('power')


def test_truncate(table):
    table.truncate()

    assert len(table) == 0
    assert table.all() == []
    assert table.columns == COLUMNS


def test_meta(table):
    assert table.meta == {'seed': '3'}


def test_iter(table):
    assert [row['c1'] for row in table] == [0, 1, 0]


def test_reopen_csv(tmp_path):
    path = str(tmp_path / 'episode.csv')
    storage = CsvStorage(path)
    table = RecordTable(storage, COLUMNS, meta={'seed': 9})
    table.insert({'t': 0, 'demand': 1.0, 'c1': 0})
    storage.close()

    storage = CsvStorage(path, access_mode='r')
    reopened = RecordTable(storage)

    assert reopened.columns == COLUMNS
    assert reopened.meta == {'seed': '9'}
    assert reopened.all() == [{'t': 0, 'demand': 1.0, 'c1': 0}]
    storage.close()


def test_empty_without_columns():
    with pytest.raises(ValueError, match='no columns'):
        RecordTable(MemoryStorage())


def test_column_mismatch(table):
    with pytest.raises(ValueError, match='do not match'):
        RecordTable(table.storage, ['t', 'action'])


def test_repr(table):
    assert re.match(
        r"<RecordTable columns=\['t', 'demand', 'c1'\], total=3, "
        r"storage=<lambdappo\.storages\.\w+ object at [a-fA-F0-9x]+>>",
        repr(table))
