"""Deniable FTL: two encrypted logical volumes over one WOM-coded device.

Public data is written with the (k, n) code's first/second writes; hidden
data rides in the wa/wb choice of full writes, always cloaked by a public
payload so every programmed page is explainable as ordinary public
activity.  Allocation follows a strict priority — fill the Current UI1
page, then the TI1 queue, then an empty page — so an adversary comparing
unmount-time snapshots never sees a page programmed while an
update-invalidated page was demonstrably pending.
"""

from __future__ import annotations

import heapq
import struct
from collections import Counter, deque

from random import Random

from .cmt import UNMAPPED, CachedMappingTable
from .config import PearlConfig, RESERVED_BLOCKS
from .crypto import (
    HIDDEN,
    PUBLIC,
    IvRegistry,
    VolumeKey,
    decrypt_payload,
    derive_key,
    encrypt_payload,
    fresh_iv,
)
from .errors import (
    DeviceFull,
    HeaderError,
    ModeError,
    NoPublicCover,
    PearlError,
    UnmappedLpn,
)
from .flash import FlashDevice
from .oob import (
    LPN_MASK,
    TAG_FIRST,
    TAG_SECOND,
    OobSlot,
    is_trans_field,
    observable_stage,
    pack_oob,
    parse_oob,
    trans_field,
)
from .states import PageState, TransitionMonitor
from .wom import (
    decode_page_hidden,
    decode_page_public,
    encode_page_first,
    encode_page_full,
    encode_page_second,
)

HEADER_MAGIC = b"PRLHDR01"
HEADER_VERSION = 1
_HEADER_FMT = "<8sH16s6I16sII"

PUBLIC_ONLY = "public-only"
PUBLIC_HIDDEN = "public-hidden"


def _or_bytes(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") | int.from_bytes(b, "big")).to_bytes(
        len(a), "big"
    )


class PearlFtl:
    """The deniable FTL engine.  Use format() or mount() to construct."""

    def __init__(self, device: FlashDevice, config: PearlConfig, mode,
                 k_pub: VolumeKey, k_hid, salt: bytes, track_ivs=False):
        self.device = device
        self.config = config
        self.mode = mode
        self.k_pub = k_pub
        self.k_hid = k_hid
        self.salt = salt
        self.layout = config.layout
        self.rng = Random(config.seed)
        self.monitor = TransitionMonitor()
        self.iv_registry = IvRegistry() if track_ivs else None
        self.ledger = Counter()
        self.gc_runs = 0

        g = config.geometry
        self._ppb = g.pages_per_block
        self._epp = config.entries_per_translation_page
        self._n_mvpns = {
            PUBLIC: -(-config.public_pages // self._epp[PUBLIC]),
            HIDDEN: -(-config.hidden_pages // self._epp[HIDDEN]),
        }
        self._reset_volatile()
        self._persist_cursor = 1  # next free page in the header block
        self._persist_clean = False

    def _reset_volatile(self):
        cfg = self.config
        total = cfg.geometry.total_pages
        self.cmt = CachedMappingTable(cfg.cmt_capacity)
        self._gtd = {
            PUBLIC: [UNMAPPED] * self._n_mvpns[PUBLIC],
            HIDDEN: [UNMAPPED] * self._n_mvpns[HIDDEN],
        }
        self._state = [PageState.EMPTY] * total
        self._pub_lpn = {}       # ppn -> public lpn_field (data or translation)
        self._hidden_at = {}     # ppn -> hidden lpn_field with up-to-date data
        self._ti1_lpn = {}       # TI1 ppn -> the trimmed lpn still mapped to it
        self._trimmed = set()    # trimmed-but-still-mapped public lpns
        self._valid = [0] * cfg.geometry.total_blocks
        self._hid_valid = [0] * cfg.geometry.total_blocks
        self._fbl = list(cfg.managed_blocks)
        heapq.heapify(self._fbl)
        self._free = set(self._fbl)
        self._frontier = None    # current block receiving first writes
        self._cursor = None      # next empty ppn in the frontier block
        self.current_ui1 = None
        self.tiq = deque()
        self._slot_a = {}        # block -> set of slot-A lpn_fields in it
        self._in_gc = False
        self._gc_victim = None
        self._draining = False

    # ------------------------------------------------------------------
    # construction: format / mount / recovery
    # ------------------------------------------------------------------

    @classmethod
    def format(cls, device, config, public_password, hidden_password=None,
               salt=None, track_ivs=False):
        """Initialize a blank device: write the header and return a handle."""
        if any(device.program_count(p) for p in range(device.geometry.total_pages)):
            raise HeaderError("device is not blank; mount it instead")
        rng = Random(config.seed)
        if salt is None:
            salt = rng.randbytes(16)
        header = cls._pack_header(config, salt)
        device.program_page(0, header, bytes(config.geometry.oob_bytes))
        return cls._open(device, config, public_password, hidden_password,
                         salt, track_ivs)

    @classmethod
    def mount(cls, device, public_password, hidden_password=None,
              cmt_capacity=1024, seed=0, track_ivs=False):
        """Open a formatted device, deriving keys and rebuilding state."""
        config, salt = cls._read_header(device, cmt_capacity, seed)
        ftl = cls._open(device, config, public_password, hidden_password,
                        salt, track_ivs)
        ftl._load_from_device()
        return ftl

    @classmethod
    def _open(cls, device, config, public_password, hidden_password, salt,
              track_ivs):
        k_pub = derive_key(public_password, PUBLIC, salt)
        k_hid = None
        mode = PUBLIC_ONLY
        if hidden_password is not None:
            k_hid = derive_key(hidden_password, HIDDEN, salt)
            mode = PUBLIC_HIDDEN
        return cls(device, config, mode, k_pub, k_hid, salt, track_ivs)

    @staticmethod
    def _pack_header(config, salt):
        g = config.geometry
        head = struct.pack(
            _HEADER_FMT, HEADER_MAGIC, HEADER_VERSION, salt,
            g.dies, g.planes_per_die, g.blocks_per_plane, g.pages_per_block,
            g.page_bytes, g.oob_bytes,
            config.code.name.encode().ljust(16, b"\0"),
            config.public_pages, config.hidden_pages,
        )
        return head + bytes(g.page_bytes - len(head))

    @staticmethod
    def _read_header(device, cmt_capacity, seed):
        from .wom import BUILTIN_CODES

        data, _ = device.peek(0)
        fields = struct.unpack_from(_HEADER_FMT, data)
        if fields[0] != HEADER_MAGIC or fields[1] != HEADER_VERSION:
            raise HeaderError("missing or corrupt device header")
        salt = fields[2]
        geom = device.geometry
        if fields[3:9] != (geom.dies, geom.planes_per_die, geom.blocks_per_plane,
                           geom.pages_per_block, geom.page_bytes, geom.oob_bytes):
            raise HeaderError("header geometry does not match the device")
        code_name = fields[9].rstrip(b"\0").decode()
        if code_name not in BUILTIN_CODES:
            raise HeaderError(f"unknown code {code_name!r} in header")
        pub_pages, hid_pages = fields[10], fields[11]
        config = PearlConfig(
            geometry=geom,
            timings=device.timings,
            code=BUILTIN_CODES[code_name],
            cmt_capacity=cmt_capacity,
            public_fraction=pub_pages / geom.total_pages,
            hidden_fraction=hid_pages / geom.total_pages,
            seed=seed,
        )
        return config, salt

    # -- state persistence (header block) ------------------------------

    def _pack_state_blob(self, volume):
        if volume == PUBLIC:
            front = self._cursor if self._cursor is not None else 0xFFFFFFFF
            ui1 = self.current_ui1 if self.current_ui1 is not None else 0xFFFFFFFF
            head = struct.pack("<II", front, ui1)
        else:
            head = b""
        gtd = self._gtd[volume]
        return head + struct.pack(f"<{len(gtd)}I", *gtd)

    def _persist_state(self):
        g = self.config.geometry
        if self._persist_cursor >= g.pages_per_block:
            self.device.erase_block(0)
            self.device.program_page(0, self._pack_header(self.config, self.salt),
                                     bytes(g.oob_bytes))
            self._persist_cursor = 1
        page = bytearray(g.page_bytes)
        half = g.page_bytes // 2

        iv = self._fresh_iv(self.k_pub)
        blob = self._pack_state_blob(PUBLIC)
        page[0:16] = iv
        page[16:16 + len(blob)] = encrypt_payload(self.k_pub, iv, blob)

        if self.mode == PUBLIC_HIDDEN:
            iv_h = self._fresh_iv(self.k_hid)
            blob_h = encrypt_payload(self.k_hid, iv_h,
                                     self._pack_state_blob(HIDDEN))
        else:
            # No hidden key: the region is still refreshed with random bytes
            # so its presence or staleness carries no signal.
            iv_h = self.rng.randbytes(16)
            blob_h = self.rng.randbytes(4 * self._n_mvpns[HIDDEN])
        page[half:half + 16] = iv_h
        page[half + 16:half + 16 + len(blob_h)] = blob_h

        ppn = self._persist_cursor
        self.device.program_page(ppn, bytes(page), bytes(g.oob_bytes))
        self._persist_cursor += 1

    def _load_state_blobs(self):
        """Locate and decrypt the newest persisted state page, if any."""
        g = self.config.geometry
        newest = None
        for idx in range(1, g.pages_per_block):
            data, _ = self.device.peek(idx)
            if any(data):
                newest = idx
        self._persist_cursor = (newest + 1) if newest is not None else 1
        if newest is None:
            return None, None
        data, _ = self.device.peek(newest)
        half = g.page_bytes // 2

        n_pub = self._n_mvpns[PUBLIC]
        pub_len = 8 + 4 * n_pub
        pub = decrypt_payload(self.k_pub, data[0:16], data[16:16 + pub_len])
        front, ui1 = struct.unpack_from("<II", pub)
        gtd_pub = list(struct.unpack_from(f"<{n_pub}I", pub, 8))

        gtd_hid = None
        if self.mode == PUBLIC_HIDDEN:
            n_hid = self._n_mvpns[HIDDEN]
            raw = decrypt_payload(self.k_hid, data[half:half + 16],
                                  data[half + 16:half + 16 + 4 * n_hid])
            gtd_hid = list(struct.unpack_from(f"<{n_hid}I", raw))
        return (front, ui1, gtd_pub), gtd_hid

    def _clamp_ppn(self, ppn):
        """Keep arbitrary (possibly garbage-decrypted) values addressable."""
        if ppn == UNMAPPED:
            return UNMAPPED
        return ppn % self.config.geometry.total_pages

    def _load_from_device(self):
        """Rebuild maps, page states, queues, and cursors from flash."""
        self._reset_volatile()
        pub_state, gtd_hid = self._load_state_blobs()
        if pub_state is None:
            return  # freshly formatted device: nothing to recover
        front, ui1, gtd_pub = pub_state
        self._gtd[PUBLIC] = [self._clamp_ppn(p) for p in gtd_pub]
        if gtd_hid is not None:
            self._gtd[HIDDEN] = [self._clamp_ppn(p) for p in gtd_hid]

        cfg = self.config
        g = cfg.geometry
        stage = {}
        for ppn in range(RESERVED_BLOCKS * self._ppb, g.total_pages):
            _, oob = self.device.peek(ppn)
            stage[ppn] = observable_stage(oob)
            if stage[ppn] != "empty":
                slot_a, _ = parse_oob(oob)
                if slot_a is not None:
                    self._slot_a.setdefault(
                        self._block_of(ppn), set()).add(slot_a.lpn_field)

        # Current mappings, walked quietly through the translation pages.
        pub_map = self._walk_volume(PUBLIC)
        for lpn_field, ppn in pub_map.items():
            if stage.get(ppn, "empty") == "empty":
                continue  # garbage entry (or pre-persist loss); ignore
            self._pub_lpn[ppn] = lpn_field
            self._set_state_silent(ppn, PageState.V1 if stage[ppn] == "first"
                                   else PageState.V2)
        for m, t_ppn in enumerate(self._gtd[PUBLIC]):
            if t_ppn != UNMAPPED and stage.get(t_ppn, "empty") != "empty":
                self._pub_lpn[t_ppn] = trans_field(m)
                self._set_state_silent(
                    t_ppn, PageState.V1 if stage[t_ppn] == "first"
                    else PageState.V2)
        if self.mode == PUBLIC_HIDDEN:
            for lpn_field, ppn in self._walk_volume(HIDDEN).items():
                if stage.get(ppn, "empty") != "empty":
                    self._hid_set(ppn, lpn_field)
            for m, t_ppn in enumerate(self._gtd[HIDDEN]):
                if t_ppn != UNMAPPED and stage.get(t_ppn, "empty") != "empty":
                    self._hid_set(t_ppn, trans_field(m))

        # Remaining programmed pages are invalid; first-write invalids are
        # either the persisted UI1 page, a kept-mapped TI1 page, or
        # relocation leftovers awaiting GC.
        for ppn, st in stage.items():
            if st == "empty" or self._state[ppn] != PageState.EMPTY:
                continue
            if st == "first":
                slot_a, _ = parse_oob(self.device.peek(ppn)[1])
                lpn = slot_a.lpn_field if slot_a else None
                if ppn == ui1:
                    self._set_state_silent(ppn, PageState.UI1)
                    self.current_ui1 = ppn
                elif lpn is not None and pub_map.get(lpn) == ppn:
                    self._set_state_silent(ppn, PageState.TI1)
                    self.tiq.append(ppn)
                    self._ti1_lpn[ppn] = lpn
                    self._trimmed.add(lpn)
                else:
                    self._set_state_silent(ppn, PageState.RI1)
            else:
                self._set_state_silent(ppn, PageState.I2)

        # Allocator: the frontier is the partially programmed managed block.
        self._fbl = []
        for blk in cfg.managed_blocks:
            pages = range(blk * self._ppb, (blk + 1) * self._ppb)
            programmed = [p for p in pages if stage[p] != "empty"]
            if not programmed:
                self._fbl.append(blk)
            elif len(programmed) < self._ppb:
                self._frontier = blk
                self._cursor = programmed[-1] + 1
            self._valid[blk] = sum(
                1 for p in pages
                if self._state[p] in (PageState.V1, PageState.V2))
        heapq.heapify(self._fbl)
        self._free = set(self._fbl)
        self._persist_clean = True

    def _set_state_silent(self, ppn, st):
        self._state[ppn] = st

    def _walk_volume(self, volume):
        """Quiet full map {lpn_field: ppn} from the on-flash translation
        pages (no clock, no CMT)."""
        out = {}
        epp = self._epp[volume]
        for m, t_ppn in enumerate(self._gtd[volume]):
            if t_ppn == UNMAPPED:
                continue
            entries = self._decode_translation(volume, t_ppn, quiet=True)
            for i, e in enumerate(entries):
                if e != UNMAPPED:
                    out[m * epp + i] = self._clamp_ppn(e)
        return out

    def recover_metadata(self):
        """Drop all volatile state and rebuild it by scanning the device."""
        self._load_from_device()

    def translation_map(self, volume):
        """Quiet {lpn: ppn} view of a volume's current mappings (tests)."""
        if volume == HIDDEN and self.mode != PUBLIC_HIDDEN:
            raise ModeError("hidden volume not mounted")
        # Overlay dirty CMT entries on the flash-resident map.
        out = self._walk_volume(volume)
        for (vol, lpn), (ppn, _) in self.cmt._entries.items():
            if vol == volume:
                if ppn == UNMAPPED:
                    out.pop(lpn, None)
                else:
                    out[lpn] = ppn
        for lpn in list(out):
            if volume == PUBLIC and lpn in self._trimmed:
                del out[lpn]
        return out

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _fresh_iv(self, key):
        iv = fresh_iv(self.rng)
        if self.iv_registry is not None:
            self.iv_registry.record(key, iv)
        return iv

    def _touch(self):
        self._persist_clean = False

    def _set_state(self, ppn, new, reason):
        old = self._state[ppn]
        self.monitor.record(ppn, old, new, reason)
        self._state[ppn] = new

    def _block_of(self, ppn):
        return ppn // self._ppb

    def _hid_set(self, ppn, hidden_field):
        """Record live hidden content at ppn (keeps per-block counts)."""
        if ppn not in self._hidden_at:
            self._hid_valid[self._block_of(ppn)] += 1
        self._hidden_at[ppn] = hidden_field

    def _hid_clear(self, ppn):
        """Mark the hidden content at ppn out of date."""
        if self._hidden_at.pop(ppn, None) is not None:
            self._hid_valid[self._block_of(ppn)] -= 1

    def _require_hidden(self):
        if self.mode != PUBLIC_HIDDEN:
            raise ModeError("hidden volume not mounted")

    def _pad(self, data, size):
        if len(data) > size:
            raise PearlError(f"payload of {len(data)} bytes exceeds {size}")
        return data + bytes(size - len(data))

    # -- mapping layer -------------------------------------------------

    def _decode_translation(self, volume, t_ppn, quiet=False):
        """Entry array of the translation page at t_ppn."""
        if quiet:
            data, oob = self.device.peek(t_ppn)
        else:
            data, oob = self.device.read_page(t_ppn)
        slot_a, slot_b = parse_oob(oob)
        epp = self._epp[volume]
        lay = self.layout
        if volume == PUBLIC:
            stage = "second" if slot_b is not None else "first"
            payload = decode_page_public(lay, self.config.code, data, stage)
            iv = (slot_b or slot_a).iv
            key = self.k_pub
        else:
            payload = decode_page_hidden(lay, self.config.code, data,
                                         strict=False)
            slot = slot_b or slot_a
            iv = slot.iv if slot else bytes(16)
            key = self.k_hid
        plain = decrypt_payload(key, iv, payload[: 4 * epp])
        return list(struct.unpack(f"<{epp}I", plain))

    def _translate(self, volume, lpn, missing_ok=False):
        ppn = self.cmt.lookup(volume, lpn)
        if ppn is None:
            m = lpn // self._epp[volume]
            t_ppn = self._gtd[volume][m]
            if t_ppn == UNMAPPED:
                ppn = UNMAPPED
            else:
                entries = self._decode_translation(volume, t_ppn)
                ppn = self._clamp_ppn(entries[lpn % self._epp[volume]])
            self.cmt.put(volume, lpn, ppn, dirty=False)
        if ppn == UNMAPPED:
            if missing_ok:
                return None
            raise UnmappedLpn(f"{volume} lpn {lpn} is not mapped")
        return ppn

    def _set_loc(self, volume, lpn_field, ppn):
        """Update a mapping: translation pages go straight to the GTD,
        data pages through the CMT (dirty)."""
        if is_trans_field(lpn_field):
            self._gtd[volume][lpn_field & LPN_MASK] = ppn
        else:
            self.cmt.put(volume, lpn_field, ppn, dirty=True)

    def _get_public_loc(self, lpn_field):
        if is_trans_field(lpn_field):
            ppn = self._gtd[PUBLIC][lpn_field & LPN_MASK]
            return None if ppn == UNMAPPED else ppn
        return self._translate(PUBLIC, lpn_field, missing_ok=True)

    def _flush_group(self, volume, m_vpn, extra=()):
        """Write one translation page carrying every dirty cached entry
        (and any extras) for its lpn range; the old copy is invalidated."""
        epp = self._epp[volume]
        old = self._gtd[volume][m_vpn]
        if old != UNMAPPED:
            entries = self._decode_translation(volume, old)
        else:
            entries = [UNMAPPED] * epp
        dirty = self.cmt.dirty_in_page(volume, m_vpn, epp)
        for lpn, ppn in list(dirty) + list(extra):
            entries[lpn % epp] = ppn
        payload = struct.pack(f"<{epp}I", *entries)
        if volume == PUBLIC:
            self._program_public(trans_field(m_vpn), payload,
                                 bucket="translation")
        else:
            self._program_full(trans_field(m_vpn), payload,
                               bucket="translation")
            if old != UNMAPPED:
                # The superseded hidden translation page keeps its public
                # face; only its hidden content goes out of date.
                self._hid_clear(old)
        # Programming the translation page may have garbage-collected and
        # re-dirtied some of these entries with newer ppns; leave those dirty.
        for lpn, ppn in dirty:
            self.cmt.mark_clean(volume, lpn, expected_ppn=ppn)

    def _drain_cmt(self):
        if self._draining:
            return
        self._draining = True
        try:
            while True:
                item = self.cmt.pop_excess()
                if item is None:
                    break
                (vol, lpn), ppn, dirty = item
                if dirty:
                    self._flush_group(vol, lpn // self._epp[vol],
                                      extra=[(lpn, ppn)])
        finally:
            self._draining = False

    # -- allocation ----------------------------------------------------

    def _alloc_empty(self):
        if self._frontier is None or self._cursor >= (self._frontier + 1) * self._ppb:
            self._maybe_gc()
            if not self._fbl:
                raise DeviceFull("no free blocks remain")
            blk = heapq.heappop(self._fbl)
            self._free.discard(blk)
            self._frontier = blk
            self._cursor = blk * self._ppb
        ppn = self._cursor
        self._cursor += 1
        return ppn

    def _maybe_gc(self):
        if self._in_gc:
            return
        watermark = self.config.gc_watermark_blocks
        attempts = 0
        while len(self._fbl) <= watermark:
            attempts += 1
            if attempts > self.config.geometry.total_blocks:
                break
            if self.gc_run() is None:
                break

    # -- physical programs ---------------------------------------------

    def _account(self, bucket, logical_bits, physical_bits):
        self.ledger[f"{bucket}_logical_bits"] += logical_bits
        self.ledger[f"{bucket}_physical_bits"] += physical_bits

    def _program_public(self, lpn_field, plaintext, bucket, relocation=False):
        """Public write following the allocation priority (Fig. 7 order:
        Current UI1 page, then TIQ head, then an empty page)."""
        lay = self.layout
        old = self._get_public_loc(lpn_field)
        trimmed_rewrite = (old is not None
                           and self._state[old] == PageState.TI1)
        if trimmed_rewrite:
            self.tiq.remove(old)
            self._ti1_lpn.pop(old, None)
            self._trimmed.discard(lpn_field)

        if self.current_ui1 is not None:
            target, second = self.current_ui1, True
            self.current_ui1 = None
        elif trimmed_rewrite:
            # The page re-enters via the UI1 slot and is consumed at once.
            target, second = old, True
        elif self.tiq:
            target, second = self.tiq.popleft(), True
            stale = self._ti1_lpn.pop(target, None)
            if stale is not None:
                self._trimmed.discard(stale)
                self.cmt.put(PUBLIC, stale, UNMAPPED, dirty=True)
        else:
            target, second = self._alloc_empty(), False

        iv = self._fresh_iv(self.k_pub)
        ct = encrypt_payload(self.k_pub, iv,
                             self._pad(plaintext, lay.public_payload_bytes))
        slot = OobSlot(iv, lpn_field, TAG_SECOND if second else TAG_FIRST)
        if second:
            existing, cur_oob = self.device.read_page(target)
            raw = encode_page_second(lay, self.config.code, ct, existing)
            oob = _or_bytes(cur_oob, pack_oob(len(cur_oob), None, slot))
            self.device.program_page(target, raw, oob)
            self._set_state(target, PageState.V2, bucket)
        else:
            raw = encode_page_first(lay, self.config.code, ct)
            oob = pack_oob(self.config.geometry.oob_bytes, slot, None)
            self.device.program_page(target, raw, oob)
            self._set_state(target, PageState.V1, bucket)
            self._slot_a.setdefault(self._block_of(target), set()).add(lpn_field)
        self._valid[self._block_of(target)] += 1
        self._pub_lpn[target] = lpn_field

        if old is not None and old != target:
            self._invalidate_public(old, reason=bucket, relocation=relocation)
        self._set_loc(PUBLIC, lpn_field, target)
        self._account(bucket, lay.groups_per_page * self.config.code.k,
                      lay.groups_per_page * self.config.code.n)
        return target

    def _invalidate_public(self, ppn, reason, relocation=False):
        st = self._state[ppn]
        if st == PageState.V1:
            if relocation:
                blk = self._block_of(ppn)
                lo = blk * self._ppb
                open_block = any(self._state[p] == PageState.EMPTY
                                 for p in range(lo, lo + self._ppb))
                if open_block and blk != self._gc_victim:
                    # A superseded first-stage page in a block that can
                    # still take first writes would look like an abandoned
                    # update casualty once its lpn is claimed again above
                    # it; queue it for a second write like a trim casualty
                    # so it never outlives the next unmount.
                    self._set_state(ppn, PageState.TI1, reason)
                    self.tiq.append(ppn)
                    self._valid[blk] -= 1
                    return
                self._set_state(ppn, PageState.RI1, reason)
            else:
                assert self.current_ui1 is None
                self._set_state(ppn, PageState.UI1, reason)
                self.current_ui1 = ppn
        elif st == PageState.TI1:
            # Old copy was trim-invalidated; it leaves the TIQ and takes
            # the (now free) UI1 slot.
            if ppn in self.tiq:
                self.tiq.remove(ppn)
            stale = self._ti1_lpn.pop(ppn, None)
            if stale is not None:
                self._trimmed.discard(stale)
            assert self.current_ui1 is None
            self._set_state(ppn, PageState.UI1, reason)
            self.current_ui1 = ppn
            return
        elif st == PageState.V2:
            self._set_state(ppn, PageState.I2, reason)
        else:
            return
        self._valid[self._block_of(ppn)] -= 1
        self._pub_lpn.pop(ppn, None)

    def _program_full(self, hidden_field, hidden_plain, bucket,
                      cloak=None):
        """One full write: public cloak + hidden payload, to an empty page.

        cloak may be (lpn_field, plaintext, src_ppn_or_None); when absent a
        public page is relocated from the least active block.
        """
        self._fill_ui1()
        if cloak is None:
            cloak = self._take_cloak()
        cloak_lpn, cloak_plain, src = cloak
        assert self.current_ui1 is None  # Requirement 3: slot filled first
        lay = self.layout
        target = self._alloc_empty()
        iv = self._fresh_iv(self.k_hid)
        pub_ct = encrypt_payload(self.k_pub, iv,
                                 self._pad(cloak_plain, lay.public_payload_bytes))
        hid_ct = encrypt_payload(self.k_hid, iv,
                                 self._pad(hidden_plain, lay.hidden_payload_bytes))
        raw = encode_page_full(lay, self.config.code, pub_ct, hid_ct)
        # A plausible first-write slot: full-write pages must be
        # indistinguishable from genuinely twice-written ones.  The fake
        # lpn avoids repeating an in-block first-write claim; a repeat
        # would assert "this page updates that one", which in-order write
        # reasoning could then falsify.
        used = self._slot_a.setdefault(self._block_of(target), set())
        while True:
            fake_lpn = self.rng.randrange(self.config.public_pages)
            if fake_lpn not in used:
                break
        used.add(fake_lpn)
        fake = OobSlot(self.rng.randbytes(16), fake_lpn, TAG_FIRST)
        oob = pack_oob(self.config.geometry.oob_bytes, fake,
                       OobSlot(iv, cloak_lpn, TAG_SECOND))
        self.device.program_page(target, raw, oob)
        self._set_state(target, PageState.V2, bucket)
        self._valid[self._block_of(target)] += 1
        self._pub_lpn[target] = cloak_lpn

        if src is not None and src != target:
            self._invalidate_public(src, reason=bucket, relocation=True)
        self._set_loc(PUBLIC, cloak_lpn, target)
        self._hid_set(target, hidden_field)
        self._set_loc(HIDDEN, hidden_field, target)
        self._account(bucket, lay.groups_per_page,
                      lay.groups_per_page * self.config.code.n)
        self.ledger["cloak_logical_bits"] += (
            lay.groups_per_page * self.config.code.k)
        return target

    def _pick_public_source(self, exclude=()):
        """Public data to relocate as cover, chosen so the superseded
        source page never reads as an abandoned update casualty.

        Preference order: a second-stage page (invalidating it changes no
        observable stage), then a first-stage page in a block with no
        empty pages left (no later first-write claim can appear above
        it), then a second-stage page whose hidden payload is still live
        (only its public side moves; the hidden data stays in place for a
        later collection pass), then — early in a device's life — a
        first-stage page in a partially filled block, which
        _invalidate_public queues for a second write like a trim
        casualty."""
        blocks = sorted(
            (blk for blk in self.config.managed_blocks
             if self._valid[blk] > 0 and blk != self._gc_victim
             and blk not in self._free),
            key=lambda b: (self._valid[b], b))

        def candidates(blk, state):
            lo = blk * self._ppb
            return [p for p in range(lo, lo + self._ppb)
                    if self._state[p] == state and p not in exclude]

        def sealed(blk):
            lo = blk * self._ppb
            return all(self._state[p] != PageState.EMPTY
                       for p in range(lo, lo + self._ppb))

        hidden_v2 = None
        for blk in blocks:
            for p in candidates(blk, PageState.V2):
                if p not in self._hidden_at:
                    return p
                if hidden_v2 is None:
                    hidden_v2 = p
        for blk in blocks:
            if sealed(blk):
                for p in candidates(blk, PageState.V1):
                    return p
        if hidden_v2 is not None:
            return hidden_v2
        for blk in blocks:
            if not sealed(blk):
                for p in candidates(blk, PageState.V1):
                    return p
        raise NoPublicCover("no valid public page available as cloak")

    def _read_public_page(self, ppn):
        """Decrypted public payload of a valid page (charged read)."""
        data, oob = self.device.read_page(ppn)
        slot_a, slot_b = parse_oob(oob)
        if slot_b is not None:
            stage, iv = "second", slot_b.iv
        else:
            stage, iv = "first", slot_a.iv
        payload = decode_page_public(self.layout, self.config.code, data, stage)
        return decrypt_payload(self.k_pub, iv, payload)

    def _take_cloak(self):
        src = self._pick_public_source()
        return self._pub_lpn[src], self._read_public_page(src), src

    def _fill_ui1(self):
        """Give the Current UI1 page a second write of relocated public
        data, so a following full write is allocator-clean."""
        while self.current_ui1 is not None:
            target = self.current_ui1
            src = self._pick_public_source(exclude=(target,))
            lpn_field = self._pub_lpn[src]
            plain = self._read_public_page(src)
            self.current_ui1 = None
            self._second_write_to(target, lpn_field, plain, bucket="cloak_fill")
            self._invalidate_public(src, reason="ui1-fill", relocation=True)
            self._set_loc(PUBLIC, lpn_field, target)

    def _second_write_to(self, target, lpn_field, plaintext, bucket):
        """Forced second write onto a specific I1 page (UI1/TIQ drains)."""
        lay = self.layout
        iv = self._fresh_iv(self.k_pub)
        ct = encrypt_payload(self.k_pub, iv,
                             self._pad(plaintext, lay.public_payload_bytes))
        existing, cur_oob = self.device.read_page(target)
        raw = encode_page_second(lay, self.config.code, ct, existing)
        slot = OobSlot(iv, lpn_field, TAG_SECOND)
        oob = _or_bytes(cur_oob, pack_oob(len(cur_oob), None, slot))
        self.device.program_page(target, raw, oob)
        self._set_state(target, PageState.V2, bucket)
        self._valid[self._block_of(target)] += 1
        self._pub_lpn[target] = lpn_field
        self._account(bucket, lay.groups_per_page * self.config.code.k,
                      lay.groups_per_page * self.config.code.n)

    # ------------------------------------------------------------------
    # public API
    # ------------------------------------------------------------------

    def public_write(self, lpn, data):
        if not 0 <= lpn < self.config.public_pages:
            raise PearlError(f"public lpn {lpn} beyond volume capacity")
        if len(data) != self.layout.public_payload_bytes:
            raise PearlError("public write must be one page payload")
        self._touch()
        self._program_public(lpn, data, bucket="public_user")
        self._drain_cmt()

    def public_read(self, lpn):
        if not 0 <= lpn < self.config.public_pages:
            raise PearlError(f"public lpn {lpn} beyond volume capacity")
        if lpn in self._trimmed:
            raise UnmappedLpn(f"public lpn {lpn} was trimmed")
        ppn = self._translate(PUBLIC, lpn)
        out = self._read_public_page(ppn)
        lay = self.layout
        self.ledger["public_read_logical_bits"] += lay.groups_per_page * lay.k
        self.ledger["public_read_physical_bits"] += lay.groups_per_page * lay.n
        self._drain_cmt()
        return out

    def hidden_write(self, lpn, data):
        self._require_hidden()
        if not 0 <= lpn < self.config.hidden_pages:
            raise PearlError(f"hidden lpn {lpn} beyond volume capacity")
        if len(data) != self.layout.hidden_payload_bytes:
            raise PearlError("hidden write must be one hidden page payload")
        self._touch()
        old = self._translate(HIDDEN, lpn, missing_ok=True)
        self._program_full(lpn, data, bucket="hidden_user")
        if old is not None:
            # The stale hidden copy becomes out-of-date; no public-visible
            # state changes.
            if self._hidden_at.get(old) == lpn:
                self._hid_clear(old)
        self._drain_cmt()

    def hidden_read(self, lpn):
        self._require_hidden()
        if not 0 <= lpn < self.config.hidden_pages:
            raise PearlError(f"hidden lpn {lpn} beyond volume capacity")
        ppn = self._translate(HIDDEN, lpn)
        data, oob = self.device.read_page(ppn)
        slot_a, slot_b = parse_oob(oob)
        slot = slot_b or slot_a
        iv = slot.iv if slot else bytes(16)
        payload = decode_page_hidden(self.layout, self.config.code, data,
                                     strict=False)
        out = decrypt_payload(self.k_hid, iv, payload)
        lay = self.layout
        self.ledger["hidden_read_logical_bits"] += lay.groups_per_page
        self.ledger["hidden_read_physical_bits"] += lay.groups_per_page * lay.n
        self._drain_cmt()
        return out

    def trim(self, lpn, volume=PUBLIC):
        self._touch()
        if volume == PUBLIC:
            if lpn in self._trimmed:
                raise UnmappedLpn(f"public lpn {lpn} already trimmed")
            ppn = self._translate(PUBLIC, lpn)
            if self._state[ppn] == PageState.V1:
                self._set_state(ppn, PageState.TI1, "trim")
                self.tiq.append(ppn)
                self._ti1_lpn[ppn] = lpn
                self._trimmed.add(lpn)
                self._valid[self._block_of(ppn)] -= 1
                self._pub_lpn.pop(ppn, None)
            else:
                self._set_state(ppn, PageState.I2, "trim")
                self._valid[self._block_of(ppn)] -= 1
                self._pub_lpn.pop(ppn, None)
                self.cmt.put(PUBLIC, lpn, UNMAPPED, dirty=True)
        elif volume == HIDDEN:
            self._require_hidden()
            ppn = self._translate(HIDDEN, lpn)
            if self._hidden_at.get(ppn) == lpn:
                self._hid_clear(ppn)
            self.cmt.put(HIDDEN, lpn, UNMAPPED, dirty=True)
        else:
            raise PearlError(f"unknown volume {volume!r}")
        self._drain_cmt()

    def submit(self, offset, op, data=None):
        """Uniform request interface over the joint address space."""
        volume, lpn = self.config.resolve_offset(offset)
        if op == "read":
            return self.public_read(lpn) if volume == PUBLIC \
                else self.hidden_read(lpn)
        if op == "write":
            if volume == PUBLIC:
                self.public_write(lpn, data)
            else:
                self.hidden_write(lpn, data)
            return None
        if op == "trim":
            return self.trim(lpn, volume)
        raise PearlError(f"unknown op {op!r}")

    def submit_batch(self, requests):
        """Process a batch of (offset, op, data) requests in order.

        A hidden write looks ahead for the next unconsumed public write in
        the batch and uses it as its cloak, saving one relocation; the
        public write is then complete and skipped when its turn comes.
        """
        results = []
        consumed = set()
        reqs = list(requests)
        for i, (offset, op, data) in enumerate(reqs):
            if i in consumed:
                results.append(None)
                continue
            volume, lpn = self.config.resolve_offset(offset)
            if op == "write" and volume == HIDDEN:
                j = self._find_pending_public_write(reqs, i + 1, consumed)
                if j is None:
                    self.hidden_write(lpn, data)
                else:
                    _, _, pub_data = reqs[j]
                    _, pub_lpn = self.config.resolve_offset(reqs[j][0])
                    self._hidden_write_with_incoming(lpn, data, pub_lpn,
                                                     pub_data)
                    consumed.add(j)
                results.append(None)
            else:
                results.append(self.submit(offset, op, data))
        return results

    def _find_pending_public_write(self, reqs, start, consumed):
        for j in range(start, len(reqs)):
            if j in consumed:
                continue
            offset, op, _ = reqs[j]
            volume, _ = self.config.resolve_offset(offset)
            if op == "write" and volume == PUBLIC:
                return j
        return None

    def _hidden_write_with_incoming(self, lpn, data, pub_lpn, pub_data):
        """Full write carrying a hidden page plus an incoming public user
        write as its cloak."""
        self._require_hidden()
        if len(pub_data) != self.layout.public_payload_bytes:
            raise PearlError("public write must be one page payload")
        if len(data) != self.layout.hidden_payload_bytes:
            raise PearlError("hidden write must be one hidden page payload")
        self._touch()
        old_h = self._translate(HIDDEN, lpn, missing_ok=True)
        old_p = self._get_public_loc(pub_lpn)
        if old_p is not None and self._state[old_p] == PageState.TI1:
            # Trimmed-then-rewritten public data: normal TIQ bookkeeping.
            self.tiq.remove(old_p)
            self._ti1_lpn.pop(old_p, None)
        self._trimmed.discard(pub_lpn)
        self._program_full(lpn, data, bucket="hidden_user",
                           cloak=(pub_lpn, pub_data, None))
        self.ledger["public_user_logical_bits"] += (
            self.layout.groups_per_page * self.config.code.k)
        self.ledger["public_user_physical_bits"] += (
            self.layout.groups_per_page * self.config.code.n)
        if old_p is not None:
            # The superseded public copy is a genuine update casualty.
            self._invalidate_public(old_p, reason="update")
        if old_h is not None and self._hidden_at.get(old_h) == lpn:
            self._hid_clear(old_h)
        self._drain_cmt()

    # ------------------------------------------------------------------
    # garbage collection
    # ------------------------------------------------------------------

    def _select_victim(self):
        candidates = [
            blk for blk in self.config.managed_blocks
            if blk != self._frontier and blk not in self._free
        ]
        if not candidates:
            return None
        # Rank by relocation cost: live public pages plus live hidden
        # content.  Counting the public side alone starves the collector —
        # a block of dead-public pages that still carry hidden data looks
        # free but costs one empty page per hidden relocation.
        return min(candidates,
                   key=lambda b: (self._valid[b] + self._hid_valid[b], b))

    def gc_run(self):
        """Reclaim the least-valid block; returns reclaimed page count or
        None when no victim exists."""
        victim = self._select_victim()
        if victim is None:
            return None
        was_in_gc, was_victim = self._in_gc, self._gc_victim
        self._in_gc = True
        self._gc_victim = victim
        try:
            return self._gc_block(victim)
        finally:
            self._in_gc, self._gc_victim = was_in_gc, was_victim

    def _gc_block(self, victim):
        self._touch()
        self.gc_runs += 1
        pages = range(victim * self._ppb, (victim + 1) * self._ppb)

        if self.current_ui1 is not None and self._block_of(self.current_ui1) == victim:
            self.current_ui1 = None
        for ppn in pages:
            if self._state[ppn] == PageState.TI1:
                self.tiq.remove(ppn)
                stale = self._ti1_lpn.pop(ppn, None)
                if stale is not None:
                    self._trimmed.discard(stale)
                    self.cmt.put(PUBLIC, stale, UNMAPPED, dirty=True)

        pub_only, hid_only, paired = [], [], []
        for ppn in pages:
            has_pub = self._state[ppn] in (PageState.V1, PageState.V2)
            hid = self._hidden_at.get(ppn) if self.mode == PUBLIC_HIDDEN else None
            if has_pub:
                item = (self._pub_lpn[ppn], self._read_public_page(ppn), ppn)
                if hid is not None:
                    paired.append((item, (hid, self._read_hidden_page(ppn))))
                else:
                    pub_only.append(item)
            elif hid is not None:
                hid_only.append((hid, self._read_hidden_page(ppn)))

        # Public-only survivors first: they drain the UI1 slot and TIQ, so
        # the following full writes find a clean allocator.
        spare_cloaks = []
        for lpn_field, plain, src in pub_only:
            if hid_only:
                spare_cloaks.append((lpn_field, plain, src))
            else:
                self._program_public(lpn_field, plain, bucket="gc_public",
                                     relocation=True)
        for (lpn_field, plain, src), (hid, hplain) in paired:
            self._invalidate_public(src, reason="gc", relocation=True)
            self._hid_clear(src)
            self._program_full(hid, hplain, bucket="gc_hidden",
                               cloak=(lpn_field, plain, None))
        for hid, hplain in hid_only:
            if spare_cloaks:
                lpn_field, plain, src = spare_cloaks.pop()
                self._invalidate_public(src, reason="gc", relocation=True)
                self._program_full(hid, hplain, bucket="gc_hidden",
                                   cloak=(lpn_field, plain, None))
            else:
                self._program_full(hid, hplain, bucket="gc_hidden")
        for lpn_field, plain, src in spare_cloaks:
            self._program_public(lpn_field, plain, bucket="gc_public",
                                 relocation=True)

        reclaimed = 0
        for ppn in pages:
            self._hid_clear(ppn)
            self._pub_lpn.pop(ppn, None)
            if self._state[ppn] != PageState.EMPTY:
                reclaimed += 1
                self._set_state(ppn, PageState.EMPTY, "erase")
        self.device.erase_block(victim)
        self._slot_a.pop(victim, None)
        self._valid[victim] = 0
        heapq.heappush(self._fbl, victim)
        self._free.add(victim)
        self._drain_cmt()
        return reclaimed

    def _read_hidden_page(self, ppn):
        data, oob = self.device.read_page(ppn)
        _, slot_b = parse_oob(oob)
        payload = decode_page_hidden(self.layout, self.config.code, data,
                                     strict=False)
        return decrypt_payload(self.k_hid, slot_b.iv, payload)

    # ------------------------------------------------------------------
    # unmount / snapshot
    # ------------------------------------------------------------------

    def prepare_unmount(self):
        """Drain the TIQ, flush dirty mappings, and persist state so an
        unmount-time snapshot is deniability-safe.  Idempotent: a second
        call performs zero device programs."""
        if self._persist_clean:
            return
        while self.tiq:
            target = self.tiq.popleft()
            stale = self._ti1_lpn.pop(target, None)
            if stale is not None:
                self._trimmed.discard(stale)
                self.cmt.put(PUBLIC, stale, UNMAPPED, dirty=True)
            src = self._pick_public_source(exclude=(target,))
            lpn_field = self._pub_lpn[src]
            plain = self._read_public_page(src)
            self._second_write_to(target, lpn_field, plain, bucket="tiq_drain")
            self._invalidate_public(src, reason="tiq-drain", relocation=True)
            self._set_loc(PUBLIC, lpn_field, target)

        for _ in range(1000):
            groups = self.cmt.dirty_groups(self._epp)
            if not groups:
                break
            for vol, m in sorted(groups):
                if self.cmt.dirty_in_page(vol, m, self._epp[vol]):
                    self._flush_group(vol, m)
        else:
            raise PearlError("translation flush did not converge")

        self._persist_state()
        self._persist_clean = True

    def snapshot(self):
        return self.device.snapshot()

    # ------------------------------------------------------------------
    # introspection for tests
    # ------------------------------------------------------------------

    def check_invariants(self):
        """Cross-check bookkeeping against ground truth; returns problems."""
        problems = []
        ti1 = {p for p, s in enumerate(self._state) if s == PageState.TI1}
        if ti1 != set(self.tiq):
            problems.append("TIQ does not match the set of TI1 pages")
        ui1 = [p for p, s in enumerate(self._state) if s == PageState.UI1]
        if len(ui1) > 1 or (ui1 and ui1[0] != self.current_ui1):
            problems.append("UI1 bookkeeping inconsistent")
        for blk in self.config.managed_blocks:
            n = sum(1 for p in range(blk * self._ppb, (blk + 1) * self._ppb)
                    if self._state[p] in (PageState.V1, PageState.V2))
            if n != self._valid[blk]:
                problems.append(f"valid count wrong for block {blk}")
            h = sum(1 for p in range(blk * self._ppb, (blk + 1) * self._ppb)
                    if p in self._hidden_at)
            if h != self._hid_valid[blk]:
                problems.append(f"hidden-live count wrong for block {blk}")
        return problems

    def amplification(self, bucket):
        """physical/logical bit ratio for one ledger bucket."""
        logical = self.ledger[f"{bucket}_logical_bits"]
        physical = self.ledger[f"{bucket}_physical_bits"]
        if logical == 0:
            return None
        from fractions import Fraction
        return Fraction(physical, logical)
