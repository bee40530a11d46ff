"""
This module implements record tables, the row store behind every tabular
artifact lambdappo writes (trajectories, scenarios, episode logs, epoch
statistics, evaluation reports).
"""

from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Any,
)

import numpy as np

from .storages import Storage
from .utils import LRUCache

__all__ = ('Record', 'RecordTable')


class Record(dict):
    """
    A row stored in a table.

    This class provides a way to access both a row's content and its position
    using ``record.row_id``.
    """

    def __init__(self, value: Mapping, row_id: int):
        super().__init__(value)
        self.row_id = row_id


class RecordTable:
    """
    Represents a table with a fixed, ordered list of columns.

    Rows are mappings whose keys equal the table columns. The storage
    interface only allows to read/write the complete document, so every
    mutation reads the document, updates the rows and writes it back.

    .. admonition:: Query Cache

        Search results are cached in a :class:`~lambdappo.utils.LRUCache`
        keyed by the condition. When writing data, the whole cache is
        discarded as the results may have changed.

    :param storage: The storage instance to use for this table
    :param columns: The column names; taken from the storage when omitted
    :param meta: Key/value pairs stored alongside the rows
    :param cache_size: Maximum capacity of query cache
    """

    #: The class used to represent rows
    record_class = Record

    #: The class used for caching query results
    query_cache_class = LRUCache

    #: The default capacity of the query cache
    default_query_cache_capacity = 10

    def __init__(
        self,
        storage: Storage,
        columns: Optional[Sequence[str]] = None,
        meta: Optional[Mapping[str, Any]] = None,
        cache_size: int = default_query_cache_capacity
    ):
        self._storage = storage
        self._query_cache: LRUCache = self.query_cache_class(
            capacity=cache_size)

        stored = self._storage.read()

        if columns is None:
            if stored is None:
                raise ValueError('Table is empty and no columns were given')
            columns = stored['columns']
        elif stored is not None and stored['rows'] \
                and list(stored['columns']) != list(columns):
            raise ValueError('Stored columns {} do not match {}'.format(
                stored['columns'], list(columns)))

        self._columns = list(columns)
        self._meta = dict(stored['meta']) if stored is not None else {}
        if meta is not None:
            self._meta.update({str(k): str(v) for k, v in meta.items()})

    def __repr__(self):
        args = [
            'columns={!r}'.format(self._columns),
            'total={}'.format(len(self)),
            'storage={}'.format(self._storage),
        ]

        return '<{} {}>'.format(type(self).__name__, ', '.join(args))

    @property
    def columns(self) -> List[str]:
        """
        Get the column names.
        """
        return list(self._columns)

    @property
    def meta(self) -> Dict[str, str]:
        """
        Get the key/value pairs stored alongside the rows.
        """
        return dict(self._meta)

    @property
    def storage(self) -> Storage:
        """
        Get the table storage instance.
        """
        return self._storage

    def insert(self, row: Mapping) -> int:
        """
        Append a row to the table.

        :param row: the row to insert
        :returns: the inserted row's position
        """
        values = self._to_values(row)
        row_ids = []

        def updater(rows: list):
            row_ids.append(len(rows))
            rows.append(values)

        self._update_table(updater)

        return row_ids[0]

    def insert_multiple(self, rows: Iterable[Mapping]) -> List[int]:
        """
        Append multiple rows with a single write.

        :param rows: an Iterable of rows to insert
        :returns: a list containing the inserted rows' positions
        """
        converted = [self._to_values(row) for row in rows]
        row_ids = []

        def updater(stored: list):
            for values in converted:
                row_ids.append(len(stored))
                stored.append(values)

        self._update_table(updater)

        return row_ids

    def all(self) -> List[Record]:
        """
        Get all rows stored in the table.

        :returns: a list with all rows.
        """

        return list(iter(self))

    def search(self, cond: Callable[[Mapping], bool]) -> List[Record]:
        """
        Search for all rows matching a condition.

        :param cond: the condition to check against
        :returns: list of matching rows
        """

        # First, we check the query cache to see if it has results for this
        # query
        cached_results = self._query_cache.get(cond)
        if cached_results is not None:
            return cached_results[:]

        records = [record for record in self if cond(record)]

        self._query_cache[cond] = records[:]

        return records

    def column(self, name: str) -> np.ndarray:
        """
        Get one column of the table as an array.

        :param name: the column name
        """
        try:
            index = self._columns.index(name)
        except ValueError:
            raise KeyError('Unknown column {!r}'.format(name))

        return np.array([row[index] for row in self._read_rows()])

    def truncate(self) -> None:
        """
        Remove all rows from the table.
        """

        self._update_table(lambda rows: rows.clear())

    def clear_cache(self) -> None:
        """
        Clear the query cache.
        """

        self._query_cache.clear()

    def __len__(self):
        """
        Count the total number of rows in this table.
        """

        return len(self._read_rows())

    def __iter__(self) -> Iterator[Record]:
        """
        Iterate over all rows stored in the table.

        :returns: an iterator over all rows.
        """

        for row_id, values in enumerate(self._read_rows()):
            yield self.record_class(zip(self._columns, values), row_id)

    def _to_values(self, row: Mapping) -> list:
        # Make sure the row implements the ``Mapping`` interface
        if not isinstance(row, Mapping):
            raise ValueError('Row is not a Mapping')

        if set(row.keys()) != set(self._columns):
            raise ValueError('Row keys {} do not match columns {}'.format(
                sorted(row.keys()), self._columns))

        return [row[column] for column in self._columns]

    def _read_rows(self) -> List[list]:
        data = self._storage.read()

        if data is None:
            return []

        return data['rows']

    def _update_table(self, updater: Callable[[List[list]], None]):
        """
        Perform a table update operation.

        The storage interface only allows to read/write the complete
        document, so we read it, perform the update on the rows and then
        write the updated document back to the storage.
        """

        data = self._storage.read()

        rows = [] if data is None else list(data['rows'])

        # Perform the table update operation
        updater(rows)

        # Write the newly updated data back to the storage
        self._storage.write({'meta': dict(self._meta),
                             'columns': list(self._columns),
                             'rows': rows})

        # Clear the query cache, as the table contents have changed
        self.clear_cache()
