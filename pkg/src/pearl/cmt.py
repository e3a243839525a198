"""Cached mapping table: LRU cache of (volume, lpn) -> ppn entries.

Eviction policy is plain LRU.  The cache itself never touches flash;
the owning FTL flushes evicted dirty entries (batched per translation
page) through its normal write paths.
"""

from __future__ import annotations

from collections import OrderedDict

UNMAPPED = 0xFFFF_FFFF


class CachedMappingTable:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("CMT capacity must be >= 1")
        self.capacity = capacity
        self._entries = OrderedDict()  # (volume, lpn) -> [ppn, dirty]
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def lookup(self, volume, lpn):
        """Returns ppn (may be UNMAPPED) or None on miss; touches recency."""
        key = (volume, lpn)
        ent = self._entries.get(key)
        if ent is None:
            self.misses += 1
            return None
        self.hits += 1
        self._entries.move_to_end(key)
        return ent[0]

    def put(self, volume, lpn, ppn, dirty):
        """Insert or update; an update never evicts.  No capacity eviction
        happens here — callers drain overflow via pop_excess()."""
        key = (volume, lpn)
        ent = self._entries.get(key)
        if ent is not None:
            ent[0] = ppn
            ent[1] = ent[1] or dirty
            self._entries.move_to_end(key)
        else:
            self._entries[key] = [ppn, dirty]

    def pop_excess(self):
        """Pop and return the LRU entry if over capacity, else None."""
        if len(self._entries) <= self.capacity:
            return None
        key, (ppn, dirty) = next(iter(self._entries.items()))
        del self._entries[key]
        return key, ppn, dirty

    def dirty_in_page(self, volume, m_vpn, entries_per_page):
        """All dirty cached entries living in the given translation page."""
        out = []
        for (vol, lpn), (ppn, dirty) in self._entries.items():
            if vol == volume and dirty and lpn // entries_per_page == m_vpn:
                out.append((lpn, ppn))
        return out

    def mark_clean(self, volume, lpn, expected_ppn=None):
        """Clear the dirty bit; with expected_ppn, only if the cached value
        still matches (the entry may have been re-dirtied with a newer ppn
        while its old value was being flushed)."""
        ent = self._entries.get((volume, lpn))
        if ent is not None and (expected_ppn is None or ent[0] == expected_ppn):
            ent[1] = False

    def dirty_groups(self, entries_per_page_by_volume):
        """Set of (volume, m_vpn) groups containing dirty entries."""
        groups = set()
        for (vol, lpn), (_, dirty) in self._entries.items():
            if dirty:
                groups.add((vol, lpn // entries_per_page_by_volume[vol]))
        return groups
