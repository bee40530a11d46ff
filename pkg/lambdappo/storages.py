"""
Contains the :class:`base class <lambdappo.storages.Storage>` for storages and
implementations.

Two on-disk formats are used by lambdappo:

- the structured text format (:class:`TextStorage`) for identified models and
  training checkpoints: a ``<kind> <version>`` line followed by named scalars
  and named tensors whose numbers are written with 17 significant digits, and
- CSV (:class:`CsvStorage`) for every tabular artifact: plant trajectories,
  scenarios, episode logs, epoch statistics and evaluation reports.
"""

import csv
import io
import os
import shlex
import warnings
from abc import ABC, abstractmethod
from typing import Dict, Any, List, Optional

import numpy as np

from .errors import CheckpointError

__all__ = ('Storage', 'TextStorage', 'CsvStorage', 'MemoryStorage', 'touch',
           'format_float')


def touch(path: str, create_dirs: bool):
    """
    Create a file if it doesn't exist yet.

    :param path: The file to create.
    :param create_dirs: Whether to create all missing parent directories.
    """
    if create_dirs:
        base_dir = os.path.dirname(path)

        # Check if we need to create missing parent directories
        if base_dir and not os.path.exists(base_dir):
            os.makedirs(base_dir)

    # Create the file by opening it in 'a' mode which creates the file if it
    # does not exist yet but does not modify its contents
    with open(path, 'a'):
        pass


def format_float(value: float) -> str:
    """
    Format a float with 17 significant digits (exact round trip).
    """
    return '%.17g' % value


class Storage(ABC):
    """
    The abstract base class for all Storages.

    A Storage (de)serializes a document and stores it in some place (memory,
    file on disk, ...).
    """

    @abstractmethod
    def read(self) -> Optional[Dict[str, Any]]:
        """
        Read the current state.

        Any kind of deserialization should go here.

        Return ``None`` here to indicate that the storage is empty.
        """
        raise NotImplementedError('To be overridden!')

    @abstractmethod
    def write(self, data: Dict[str, Any]) -> None:
        """
        Write the current state to the storage.

        Any kind of serialization should go here.

        :param data: The current state.
        """
        raise NotImplementedError('To be overridden!')

    def close(self) -> None:
        """
        Optional: Close open file handles, etc.
        """
        pass


class _FileStorage(Storage):
    """
    Shared file handling of the text based storages.
    """

    def __init__(self, path: str, create_dirs=False, encoding='utf-8',
                 access_mode='r+'):
        """
        Create a new instance.

        Also creates the storage file, if it doesn't exist and the access mode
        is appropriate for writing.

        :param path: Where to store the data.
        :param access_mode: mode in which the file is opened (r, r+)
        """

        super().__init__()

        self._mode = access_mode
        self.path = str(path)

        if access_mode not in ('r', 'r+'):
            warnings.warn(
                'Using an `access_mode` other than \'r\' or \'r+\' can cause '
                'data loss or corruption'
            )

        # Create the file if it doesn't exist and creating is allowed by the
        # access mode
        if any([character in self._mode for character in ('+', 'w', 'a')]):
            touch(self.path, create_dirs=create_dirs)

        # newline='' keeps the csv module in charge of line endings
        self._handle = open(self.path, mode=self._mode, encoding=encoding,
                            newline='')

    def close(self) -> None:
        self._handle.close()

    def _read_text(self) -> Optional[str]:
        self._handle.seek(0, os.SEEK_END)
        size = self._handle.tell()

        if not size:
            return None

        self._handle.seek(0)

        return self._handle.read()

    def _write_text(self, text: str) -> None:
        self._handle.seek(0)

        try:
            self._handle.write(text)
        except io.UnsupportedOperation:
            raise IOError('Cannot write to the storage. Access mode is '
                          '"{0}"'.format(self._mode))

        self._handle.flush()
        os.fsync(self._handle.fileno())

        # Remove data that is behind the new cursor in case the file has
        # gotten shorter
        self._handle.truncate()


class TextStorage(_FileStorage):
    """
    Store a document of named scalars and tensors as structured text.

    Documents look like ``{'kind': str, 'version': int, 'scalars': {...},
    'tensors': {...}}``. Scalars are ``int``, ``float`` or single-line
    ``str``; tensors are 1-d or 2-d float arrays. Writing is deterministic, so
    writing a document that was just read reproduces the file byte by byte.
    """

    def read(self) -> Optional[Dict[str, Any]]:
        text = self._read_text()

        if text is None:
            return None

        return parse_text_document(text)

    def write(self, data: Dict[str, Any]) -> None:
        self._write_text(render_text_document(data))


def render_text_document(data: Dict[str, Any]) -> str:
    """
    Serialize a scalar/tensor document into the structured text format.
    """
    lines = ['{} {}'.format(data['kind'], int(data['version']))]

    for name, value in data.get('scalars', {}).items():
        _check_name(name)
        if isinstance(value, bool):
            lines.append('scalar {} int {}'.format(name, int(value)))
        elif isinstance(value, (int, np.integer)):
            lines.append('scalar {} int {}'.format(name, int(value)))
        elif isinstance(value, (float, np.floating)):
            lines.append('scalar {} float {}'.format(name,
                                                     format_float(value)))
        else:
            value = str(value)
            if '\n' in value:
                raise CheckpointError('Scalar {!r} spans several '
                                      'lines'.format(name))
            lines.append('scalar {} str {}'.format(name, value))

    for name, tensor in data.get('tensors', {}).items():
        _check_name(name)
        array = np.asarray(tensor, dtype=float)

        if array.ndim == 1:
            lines.append('tensor {} {}'.format(name, array.shape[0]))
            lines.append(' '.join(format_float(x) for x in array))
        elif array.ndim == 2:
            lines.append('tensor {} {} {}'.format(name, *array.shape))
            for row in array:
                lines.append(' '.join(format_float(x) for x in row))
        else:
            raise CheckpointError('Tensor {!r} must be 1-d or 2-d, got shape '
                                  '{}'.format(name, array.shape))

    return '\n'.join(lines) + '\n'


def parse_text_document(text: str) -> Dict[str, Any]:
    """
    Parse the structured text format produced by
    :func:`render_text_document`.
    """
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()

    if not lines:
        raise CheckpointError('Empty document')

    header = lines[0].split(' ')
    if len(header) != 2:
        raise CheckpointError('Malformed version line: {!r}'.format(lines[0]))
    try:
        version = int(header[1])
    except ValueError:
        raise CheckpointError('Malformed version line: {!r}'.format(lines[0]))

    scalars: Dict[str, Any] = {}
    tensors: Dict[str, np.ndarray] = {}

    i = 1
    while i < len(lines):
        parts = lines[i].split(' ', 3)

        if parts[0] == 'scalar' and len(parts) == 4:
            _, name, kind, raw = parts
            try:
                if kind == 'int':
                    scalars[name] = int(raw)
                elif kind == 'float':
                    scalars[name] = float(raw)
                elif kind == 'str':
                    scalars[name] = raw
                else:
                    raise ValueError(kind)
            except ValueError:
                raise CheckpointError('Bad scalar {!r}: {!r}'.format(name,
                                                                    lines[i]))
            i += 1

        elif parts[0] == 'tensor':
            fields = lines[i].split(' ')
            name = fields[1] if len(fields) > 1 else '?'
            try:
                shape = tuple(int(d) for d in fields[2:])
            except ValueError:
                raise CheckpointError('Bad shape header for tensor '
                                      '{!r}'.format(name))
            if len(shape) not in (1, 2):
                raise CheckpointError('Bad shape header for tensor '
                                      '{!r}'.format(name))

            n_rows = 1 if len(shape) == 1 else shape[0]
            n_cols = shape[-1]
            rows = lines[i + 1:i + 1 + n_rows]
            if len(rows) != n_rows:
                raise CheckpointError('Truncated tensor {!r}: expected {} '
                                      'rows, found {}'.format(name, n_rows,
                                                              len(rows)))

            try:
                values = [[float(x) for x in row.split()] for row in rows]
            except ValueError:
                raise CheckpointError('Corrupt value in tensor '
                                      '{!r}'.format(name))
            if any(len(row) != n_cols for row in values):
                raise CheckpointError(
                    'Shape mismatch in tensor {!r}: expected {} '
                    'columns'.format(name, n_cols))

            array = np.array(values, dtype=float).reshape(shape)
            tensors[name] = array
            i += 1 + n_rows

        else:
            raise CheckpointError('Unexpected line {}: {!r}'.format(i + 1,
                                                                   lines[i]))

    return {'kind': header[0], 'version': version,
            'scalars': scalars, 'tensors': tensors}


def _check_name(name: str) -> None:
    if not name or any(ch.isspace() for ch in name):
        raise CheckpointError('Invalid entry name {!r}'.format(name))


class CsvStorage(_FileStorage):
    """
    Store a table as CSV.

    Documents look like ``{'meta': {...}, 'columns': [...], 'rows': [...]}``.
    A non-empty ``meta`` mapping is written as a single leading comment line
    ``# key=value key=value``; values are shell-quoted when they contain
    whitespace or quotes. Floats use their shortest round-trip ``repr``.
    """

    def read(self) -> Optional[Dict[str, Any]]:
        text = self._read_text()

        if text is None:
            return None

        meta: Dict[str, str] = {}
        lines = text.split('\n')
        if lines and lines[0].startswith('#'):
            try:
                tokens = shlex.split(lines[0][1:])
            except ValueError as error:
                raise CheckpointError('Malformed CSV meta line: '
                                      '{}'.format(error))
            for token in tokens:
                key, _, value = token.partition('=')
                meta[key] = value
            lines = lines[1:]

        reader = csv.reader(line for line in lines if line)
        try:
            columns = next(reader)
        except StopIteration:
            return {'meta': meta, 'columns': [], 'rows': []}

        rows = [[_parse_cell(cell) for cell in row] for row in reader]

        return {'meta': meta, 'columns': columns, 'rows': rows}

    def write(self, data: Dict[str, Any]) -> None:
        buffer = io.StringIO()

        meta = data.get('meta') or {}
        if meta:
            buffer.write('# ' + ' '.join(_format_meta(key, value)
                                         for key, value in meta.items()))
            buffer.write('\n')

        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(data['columns'])
        for row in data['rows']:
            writer.writerow([_format_cell(cell) for cell in row])

        self._write_text(buffer.getvalue())


def _format_meta(key, value) -> str:
    key, value = str(key), str(value)
    if not key or '=' in key or any(c.isspace() for c in key):
        raise CheckpointError('Invalid CSV meta key {!r}'.format(key))
    if '\n' in value or '\r' in value:
        raise CheckpointError('CSV meta value of {!r} spans several '
                              'lines'.format(key))

    return '{}={}'.format(key, shlex.quote(value))


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))

    return str(value)


def _parse_cell(cell: str):
    for kind in (int, float):
        try:
            return kind(cell)
        except ValueError:
            pass

    return cell


class MemoryStorage(Storage):
    """
    Store the data in memory.
    """

    def __init__(self):
        """
        Create a new instance.
        """

        super().__init__()
        self.memory: Optional[Dict[str, Any]] = None

    def read(self) -> Optional[Dict[str, Any]]:
        return self.memory

    def write(self, data: Dict[str, Any]):
        self.memory = data
