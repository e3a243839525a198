"""Run configuration for the deniable FTL.

Capacity bounds are enforced here: the public volume may use at most 60%
and the hidden volume at most 20% of physical device capacity.  The desk
defaults sit just below those bounds (36/64 and 12/64 of the blocks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .flash import DEFAULT_TIMINGS, DeviceGeometry, DeviceTimings, PRESETS
from .wom import PageLayout, WOM_3_5, WomCode

MAX_PUBLIC_FRACTION = 0.60
MAX_HIDDEN_FRACTION = 0.20

# Header/metadata block reserved at the front of the device.
RESERVED_BLOCKS = 1


@dataclass(frozen=True)
class PearlConfig:
    geometry: DeviceGeometry
    timings: DeviceTimings = DEFAULT_TIMINGS
    code: WomCode = WOM_3_5
    cmt_capacity: int = 1024
    public_fraction: float = 36 / 64
    hidden_fraction: float = 12 / 64
    gc_watermark_blocks: int = 0  # 0 -> derived from geometry
    seed: int = 0
    cpu_overhead_us: float = 2.0

    def __post_init__(self):
        if not 0 < self.public_fraction <= MAX_PUBLIC_FRACTION:
            raise ValueError(
                f"public capacity fraction {self.public_fraction:.4f} exceeds "
                f"the {MAX_PUBLIC_FRACTION:.0%} bound"
            )
        if not 0 < self.hidden_fraction <= MAX_HIDDEN_FRACTION:
            raise ValueError(
                f"hidden capacity fraction {self.hidden_fraction:.4f} exceeds "
                f"the {MAX_HIDDEN_FRACTION:.0%} bound"
            )
        if self.cmt_capacity < 1:
            raise ValueError("cmt_capacity must be >= 1")
        if self.geometry.total_blocks <= RESERVED_BLOCKS:
            raise ValueError("geometry too small: nothing left after header block")
        if self.gc_watermark_blocks == 0:
            object.__setattr__(
                self,
                "gc_watermark_blocks",
                max(2, math.ceil(0.02 * self.geometry.total_blocks)),
            )
        # Fail fast if the page cannot hold even one codeword group.
        PageLayout.for_page(self.geometry.page_bytes, self.code)

    # -- derived layout -------------------------------------------------

    @property
    def layout(self) -> PageLayout:
        return PageLayout.for_page(self.geometry.page_bytes, self.code)

    @property
    def managed_blocks(self) -> range:
        """Blocks available to the FTL (the header block is reserved)."""
        return range(RESERVED_BLOCKS, self.geometry.total_blocks)

    @property
    def managed_pages(self) -> int:
        return len(self.managed_blocks) * self.geometry.pages_per_block

    @property
    def public_pages(self) -> int:
        """Public logical capacity in pages (fraction of physical pages)."""
        return int(self.public_fraction * self.geometry.total_pages)

    @property
    def hidden_pages(self) -> int:
        """Hidden logical capacity in pages (fraction of physical pages)."""
        return int(self.hidden_fraction * self.geometry.total_pages)

    @property
    def entries_per_translation_page(self) -> dict:
        """Mapping entries (4 bytes each) per translation page, by volume.

        Public translation pages carry k-bit payloads; hidden translation
        pages live in the 1-bit-per-group hidden payload.
        """
        lay = self.layout
        return {
            "public": lay.public_payload_bytes // 4,
            "hidden": lay.hidden_payload_bytes // 4,
        }

    # -- unified address space for request submission -------------------

    @property
    def device_pages(self) -> int:
        """The advertised physical page count; hidden lpns are addressed
        as offsets beyond it."""
        return self.geometry.total_pages

    def resolve_offset(self, offset: int):
        """Map a raw page offset onto (volume, lpn).

        Offsets below the public capacity hit the public volume; offsets
        in [device_pages, device_pages + hidden capacity) hit the hidden
        volume; the gap in between and anything beyond is an error.
        """
        if 0 <= offset < self.public_pages:
            return "public", offset
        if self.device_pages <= offset < self.device_pages + self.hidden_pages:
            return "hidden", offset - self.device_pages
        raise ValueError(f"page offset {offset} outside both volumes")


def desk_config(**overrides) -> PearlConfig:
    return PearlConfig(geometry=PRESETS["desk"], **overrides)


def paper_config(**overrides) -> PearlConfig:
    return PearlConfig(geometry=PRESETS["paper"], **overrides)
