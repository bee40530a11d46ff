"""
Utility functions.
"""

import hashlib
from collections import OrderedDict
from typing import Generic, Hashable, List, Optional, TypeVar, Union

from .errors import ContractError

V = TypeVar('V')
D = TypeVar('D')

__all__ = ('LRUCache', 'stable_hash')

_MISSING = object()


class LRUCache(Generic[V]):
    """
    Keep the ``capacity`` most recently used results; ``None`` keeps all.

    Memoizes plant trims, lazily built scenarios and record queries.
    """

    def __init__(self, capacity: Optional[int] = None) -> None:
        if capacity is not None and capacity < 1:
            raise ContractError('Cache capacity must be >= 1')

        self.capacity = capacity
        self._entries: 'OrderedDict[Hashable, V]' = OrderedDict()

    @property
    def lru(self) -> List[Hashable]:
        """
        Keys from least to most recently used.
        """
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._entries

    def get(self, key: Hashable,
            default: Optional[D] = None) -> Optional[Union[V, D]]:
        value = self._entries.get(key, _MISSING)
        if value is _MISSING:
            return default

        self._entries.move_to_end(key)

        return value

    def __setitem__(self, key: Hashable, value: V) -> None:
        self._entries[key] = value
        self._entries.move_to_end(key)

        if self.capacity is not None and len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def clear(self) -> None:
        self._entries.clear()


def stable_hash(items) -> str:
    """
    Hash an ordered sequence of ``(key, value)`` pairs.

    Unlike ``hash()`` the result does not depend on the interpreter's hash
    seed, so it can be persisted in checkpoints.
    """
    text = '\n'.join('{}={!r}'.format(key, value) for key, value in items)

    return hashlib.sha256(text.encode('utf-8')).hexdigest()
