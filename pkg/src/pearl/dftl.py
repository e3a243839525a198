"""Demand-based page-mapping FTL baseline (no deniability, no coding).

Mappings live on flash in translation pages; a small in-memory cache (the
CMT) holds the hot entries and the GTD indexes the translation pages.
Data and translation pages are appended to separate current blocks; the
garbage collector evicts the block with the fewest valid pages.  Every
physical page is programmed at most once between erases.
"""

from __future__ import annotations

import heapq
import math
import struct
from collections import Counter

from .cmt import UNMAPPED, CachedMappingTable
from .errors import DeviceFull, PearlError, UnmappedLpn
from .flash import FlashDevice

DATA, TRANS = "data", "trans"


class Dftl:
    def __init__(self, device: FlashDevice, cmt_capacity: int = 1024,
                 utilization: float = 0.84):
        if not 0 < utilization < 1:
            raise ValueError("utilization must be in (0, 1)")
        self.device = device
        g = device.geometry
        self._ppb = g.pages_per_block
        self.page_bytes = g.page_bytes
        self.logical_pages = int(utilization * g.total_pages)
        self.entries_per_page = g.page_bytes // 4
        self._n_mvpns = -(-self.logical_pages // self.entries_per_page)
        self.gtd = [UNMAPPED] * self._n_mvpns
        self.cmt = CachedMappingTable(cmt_capacity)
        self.gc_watermark = max(2, math.ceil(0.02 * g.total_blocks))
        self.gc_runs = 0
        self.ledger = Counter()

        total = g.total_pages
        self._owner = [None] * total     # lpn or m_vpn of a valid page
        self._kind = [None] * total      # DATA | TRANS | None
        self._valid = [0] * g.total_blocks
        self._fbl = list(range(g.total_blocks))
        heapq.heapify(self._fbl)
        self._free = set(self._fbl)
        self._cursor = {DATA: None, TRANS: None}
        self._block = {DATA: None, TRANS: None}
        self._in_gc = False
        self._draining = False

    # -- allocation ----------------------------------------------------

    def _alloc(self, kind):
        blk = self._block[kind]
        if blk is None or self._cursor[kind] >= (blk + 1) * self._ppb:
            self._maybe_gc()
            if not self._fbl:
                raise DeviceFull("no free blocks remain")
            blk = heapq.heappop(self._fbl)
            self._free.discard(blk)
            self._block[kind] = blk
            self._cursor[kind] = blk * self._ppb
        ppn = self._cursor[kind]
        self._cursor[kind] += 1
        return ppn

    def _maybe_gc(self):
        if self._in_gc:
            return
        attempts = 0
        while len(self._fbl) <= self.gc_watermark:
            attempts += 1
            if attempts > self.device.geometry.total_blocks:
                break
            if self.gc_run() is None:
                break

    # -- mapping layer -------------------------------------------------

    def _read_trans_entries(self, t_ppn):
        data, _ = self.device.read_page(t_ppn)
        n = self.entries_per_page
        return list(struct.unpack_from(f"<{n}I", data))

    def _write_trans(self, m_vpn, entries):
        payload = struct.pack(f"<{self.entries_per_page}I", *entries)
        payload += bytes(self.page_bytes - len(payload))
        ppn = self._alloc(TRANS)
        self.device.program_page(ppn, payload,
                                 bytes(self.device.geometry.oob_bytes))
        old = self.gtd[m_vpn]
        if old != UNMAPPED:
            self._invalidate(old)
        self.gtd[m_vpn] = ppn
        self._kind[ppn] = TRANS
        self._owner[ppn] = m_vpn
        self._valid[ppn // self._ppb] += 1
        self.ledger["translation_programs"] += 1

    def _flush_group(self, m_vpn, extra=()):
        old = self.gtd[m_vpn]
        if old != UNMAPPED:
            entries = self._read_trans_entries(old)
        else:
            entries = [UNMAPPED] * self.entries_per_page
        dirty = self.cmt.dirty_in_page(DATA, m_vpn, self.entries_per_page)
        for lpn, ppn in list(dirty) + list(extra):
            entries[lpn % self.entries_per_page] = ppn
        self._write_trans(m_vpn, entries)
        # The translation-page program may have garbage-collected and
        # re-dirtied some of these entries with newer ppns; leave those dirty.
        for lpn, ppn in dirty:
            self.cmt.mark_clean(DATA, lpn, expected_ppn=ppn)

    def _drain_cmt(self):
        if self._draining:
            return
        self._draining = True
        try:
            while True:
                item = self.cmt.pop_excess()
                if item is None:
                    break
                (_, lpn), ppn, dirty = item
                if dirty:
                    self._flush_group(lpn // self.entries_per_page,
                                      extra=[(lpn, ppn)])
        finally:
            self._draining = False

    def translate(self, lpn, missing_ok=False):
        if not 0 <= lpn < self.logical_pages:
            raise PearlError(f"lpn {lpn} beyond logical capacity")
        ppn = self.cmt.lookup(DATA, lpn)
        if ppn is None:
            t_ppn = self.gtd[lpn // self.entries_per_page]
            if t_ppn == UNMAPPED:
                ppn = UNMAPPED
            else:
                ppn = self._read_trans_entries(t_ppn)[
                    lpn % self.entries_per_page]
            self.cmt.put(DATA, lpn, ppn, dirty=False)
        if ppn == UNMAPPED:
            if missing_ok:
                return None
            raise UnmappedLpn(f"lpn {lpn} is not mapped")
        return ppn

    def _invalidate(self, ppn):
        if self._kind[ppn] is not None:
            self._kind[ppn] = None
            self._owner[ppn] = None
            self._valid[ppn // self._ppb] -= 1

    # -- logical block API ---------------------------------------------

    def write(self, lpn, data):
        if len(data) != self.page_bytes:
            raise PearlError("write must be one page payload")
        old = self.translate(lpn, missing_ok=True)
        ppn = self._alloc(DATA)
        self.device.program_page(ppn, data,
                                 bytes(self.device.geometry.oob_bytes))
        self._kind[ppn] = DATA
        self._owner[ppn] = lpn
        self._valid[ppn // self._ppb] += 1
        if old is not None:
            self._invalidate(old)
        self.cmt.put(DATA, lpn, ppn, dirty=True)
        self.ledger["data_programs"] += 1
        self._drain_cmt()

    def read(self, lpn):
        ppn = self.translate(lpn)
        data, _ = self.device.read_page(ppn)
        self._drain_cmt()
        return data

    def trim(self, lpn):
        ppn = self.translate(lpn)
        self._invalidate(ppn)
        self.cmt.put(DATA, lpn, UNMAPPED, dirty=True)
        self._drain_cmt()

    def submit(self, offset, op, data=None):
        if op == "read":
            return self.read(offset)
        if op == "write":
            return self.write(offset, data)
        if op == "trim":
            return self.trim(offset)
        raise PearlError(f"unknown op {op!r}")

    # -- garbage collection --------------------------------------------

    def gc_select_victim(self):
        g = self.device.geometry
        candidates = [
            blk for blk in range(g.total_blocks)
            if blk not in self._free and blk not in self._block.values()
        ]
        if not candidates:
            return None
        return min(candidates, key=lambda b: (self._valid[b], b))

    def gc_run(self):
        victim = self.gc_select_victim()
        if victim is None:
            return None
        was = self._in_gc
        self._in_gc = True
        try:
            return self._gc_block(victim)
        finally:
            self._in_gc = was

    def _gc_block(self, victim):
        self.gc_runs += 1
        pages = range(victim * self._ppb, (victim + 1) * self._ppb)
        reclaimed = 0
        for ppn in pages:
            kind, owner = self._kind[ppn], self._owner[ppn]
            if kind == DATA:
                data, _ = self.device.read_page(ppn)
                new = self._alloc(DATA)
                self.device.program_page(
                    new, data, bytes(self.device.geometry.oob_bytes))
                self._kind[new] = DATA
                self._owner[new] = owner
                self._valid[new // self._ppb] += 1
                self._invalidate(ppn)
                self.cmt.put(DATA, owner, new, dirty=True)
                self.ledger["gc_programs"] += 1
            elif kind == TRANS:
                entries = self._read_trans_entries(ppn)
                self._write_trans(owner, entries)
                self.ledger["gc_programs"] += 1
        for ppn in pages:
            if self.device.program_count(ppn):
                reclaimed += 1
            self._kind[ppn] = None
            self._owner[ppn] = None
        self.device.erase_block(victim)
        self._valid[victim] = 0
        heapq.heappush(self._fbl, victim)
        self._free.add(victim)
        self._drain_cmt()
        return reclaimed

    # -- introspection -------------------------------------------------

    def check_invariants(self):
        problems = []
        g = self.device.geometry
        for blk in range(g.total_blocks):
            n = sum(1 for p in range(blk * self._ppb, (blk + 1) * self._ppb)
                    if self._kind[p] is not None)
            if n != self._valid[blk]:
                problems.append(f"valid count wrong for block {blk}")
        in_use = g.total_blocks - len(self._free)
        if len(self._free) + in_use != g.total_blocks:
            problems.append("free-list conservation violated")
        return problems

    def full_map(self):
        """Quiet {lpn: ppn} view combining flash and dirty CMT entries."""
        out = {}
        for m, t_ppn in enumerate(self.gtd):
            if t_ppn == UNMAPPED:
                continue
            data, _ = self.device.peek(t_ppn)
            entries = struct.unpack_from(f"<{self.entries_per_page}I", data)
            for i, e in enumerate(entries):
                if e != UNMAPPED:
                    out[m * self.entries_per_page + i] = e
        for (_, lpn), (ppn, _) in self.cmt._entries.items():
            if ppn == UNMAPPED:
                out.pop(lpn, None)
            else:
                out[lpn] = ppn
        return out
