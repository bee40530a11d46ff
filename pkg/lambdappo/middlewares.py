"""
Contains the :class:`base class <lambdappo.middlewares.Middleware>` for
middlewares and implementations.
"""
import logging
from typing import Optional

from .storages import Storage

__all__ = ('Middleware', 'CachingMiddleware', 'LoggingMiddleware')

logger = logging.getLogger(__name__)


class Middleware:
    """
    The base class for all Middlewares.

    Middlewares hook into the read/write process of a storage allowing you to
    extend the behaviour by adding caching, logging, ...

    Your middleware's ``__init__`` method has to call the parent class
    constructor so the middleware chain can be configured properly.
    """

    def __init__(self, storage_cls) -> None:
        self._storage_cls = storage_cls
        self.storage: Storage = None  # type: ignore

    def __call__(self, *args, **kwargs):
        """
        Create the storage instance and store it as self.storage.

        Usually a user creates a new storage instance like this::

            TextStorage('model.txt')

        The storage keyword arguments are passed on when the middleware is
        called, so wrapping looks like this::

            CachingMiddleware(CsvStorage)('episodes.csv')

        Nested middlewares work too because a middleware instance is
        callable in the same way as a storage class.
        """

        self.storage = self._storage_cls(*args, **kwargs)

        return self

    def __getattr__(self, name):
        """
        Forward all unknown attribute calls to the underlying storage, so we
        remain as transparent as possible.
        """

        return getattr(self.__dict__['storage'], name)


class CachingMiddleware(Middleware):
    """
    Add some caching to a storage.

    This Middleware writes only the last document state every
    :attr:`WRITE_CACHE_SIZE` times and reads always from cache. Used when a
    table receives many small appends, like per-epoch statistics.
    """

    #: The number of write operations to cache before writing to disc
    WRITE_CACHE_SIZE = 1000

    def __init__(self, storage_cls):
        # Initialize the parent constructor
        super().__init__(storage_cls)

        # Prepare the cache
        self.cache = None
        self._cache_modified_count = 0

    def read(self):
        if self.cache is None:
            # Empty cache: read from the storage
            self.cache = self.storage.read()

        # Return the cached data
        return self.cache

    def write(self, data):
        # Store data in cache
        self.cache = data
        self._cache_modified_count += 1

        # Check if we need to flush the cache
        if self._cache_modified_count >= self.WRITE_CACHE_SIZE:
            self.flush()

    def flush(self):
        """
        Flush all unwritten data to disk.
        """
        if self._cache_modified_count > 0:
            # Force-flush the cache by writing the data to the storage
            self.storage.write(self.cache)
            self._cache_modified_count = 0

    def close(self):
        # Flush potentially unwritten data
        self.flush()

        # Let the storage clean up too
        self.storage.close()


class LoggingMiddleware(Middleware):
    """
    Log every storage operation at DEBUG level.

    The storage path is included in the message when the wrapped storage
    has one.
    """

    def __init__(self, storage_cls, log: Optional[logging.Logger] = None):
        super().__init__(storage_cls)
        self.log = log if log is not None else logger

    def read(self):
        data = self.storage.read()
        self._log_operation('read', data)
        return data

    def write(self, data):
        self._log_operation('write', data)
        self.storage.write(data)

    def close(self):
        self._log_operation('close', None)
        self.storage.close()

    def _log_operation(self, operation, data):
        target = getattr(self.storage, 'path', type(self.storage).__name__)
        rows = len(data.get('rows', ())) if isinstance(data, dict) else 0
        self.log.debug('%s %s (%d rows)', operation, target, rows)
