"""Workload benchmarking: trace parsing, synthetic generation, replay.

Requests are queued FIFO and served serially by the device's busy clock,
so a request's response time is its queuing delay plus service time.
Logical requests larger than one page payload fan out into page-level
sub-requests; the fan-out is recorded in the metrics.
"""

from __future__ import annotations

import csv
import json
import math
import random
import statistics
from dataclasses import dataclass, field

from .dftl import Dftl
from .errors import PearlError, TraceFormatError
from .ftl import PearlFtl

SECTOR_BYTES = 512

_OPCODES = {"r": "read", "w": "write", "t": "trim"}


@dataclass(frozen=True)
class TraceRecord:
    volume: str          # "public" | "hidden" | "data" (DFTL)
    lba: int             # logical byte offset within the volume
    size: int            # bytes
    op: str              # read | write | trim
    arrival: float       # seconds since trace start


@dataclass
class RunMetrics:
    seed: int | None
    responses_us: list = field(default_factory=list)   # per-request
    arrivals_us: list = field(default_factory=list)
    sub_requests: int = 0
    requests: int = 0
    bytes_moved: int = 0
    busy_us: float = 0.0
    makespan_us: float = 0.0
    device_counts: dict = field(default_factory=dict)
    amplification: dict = field(default_factory=dict)

    @property
    def mean_us(self) -> float:
        return statistics.fmean(self.responses_us) if self.responses_us else 0.0

    def percentile(self, q: float) -> float:
        if not self.responses_us:
            return 0.0
        ordered = sorted(self.responses_us)
        idx = min(len(ordered) - 1, math.ceil(q / 100 * len(ordered)) - 1)
        return ordered[max(idx, 0)]

    @property
    def iops(self) -> float:
        if self.makespan_us <= 0:
            return 0.0
        return self.requests / (self.makespan_us / 1e6)

    @property
    def bytes_per_second(self) -> float:
        """Logical byte throughput; the unit to use when comparing FTLs
        whose page payloads differ."""
        if self.makespan_us <= 0:
            return 0.0
        return self.bytes_moved / (self.makespan_us / 1e6)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "requests": self.requests,
            "sub_requests": self.sub_requests,
            "bytes_moved": self.bytes_moved,
            "mean_us": self.mean_us,
            "p50_us": self.percentile(50),
            "p95_us": self.percentile(95),
            "p99_us": self.percentile(99),
            "iops": self.iops,
            "bytes_per_second": self.bytes_per_second,
            "busy_us": self.busy_us,
            "makespan_us": self.makespan_us,
            "device_counts": self.device_counts,
            "amplification": self.amplification,
        }


# ---------------------------------------------------------------------
# FTL adapters: one uniform page-payload interface over both FTLs
# ---------------------------------------------------------------------


class DftlAdapter:
    """Single-volume view of the baseline FTL (volume name: "data")."""

    def __init__(self, ftl: Dftl):
        self.ftl = ftl
        self.device = ftl.device

    def volumes(self):
        return {"data": (self.ftl.logical_pages, self.ftl.page_bytes)}

    def submit(self, volume, lpn, op, data=None):
        if volume != "data":
            raise PearlError(f"baseline FTL has no volume {volume!r}")
        if op == "write":
            self.ftl.write(lpn, data)
        elif op == "read":
            self.ftl.read(lpn)
        else:
            self.ftl.trim(lpn)

    @property
    def gc_runs(self):
        return self.ftl.gc_runs

    def amplification(self):
        return {}


class PearlAdapter:
    def __init__(self, ftl: PearlFtl):
        self.ftl = ftl
        self.device = ftl.device

    def volumes(self):
        cfg = self.ftl.config
        lay = cfg.layout
        out = {"public": (cfg.public_pages, lay.public_payload_bytes)}
        if self.ftl.mode == "public-hidden":
            out["hidden"] = (cfg.hidden_pages, lay.hidden_payload_bytes)
        return out

    def submit(self, volume, lpn, op, data=None):
        if op == "trim":
            self.ftl.trim(lpn, volume=volume)
        elif volume == "public":
            if op == "write":
                self.ftl.public_write(lpn, data)
            else:
                self.ftl.public_read(lpn)
        elif volume == "hidden":
            if op == "write":
                self.ftl.hidden_write(lpn, data)
            else:
                self.ftl.hidden_read(lpn)
        else:
            raise PearlError(f"unknown volume {volume!r}")

    @property
    def gc_runs(self):
        return self.ftl.gc_runs

    def amplification(self):
        out = {}
        for bucket in ("public_user", "hidden_user"):
            try:
                out[bucket] = float(self.ftl.amplification(bucket))
            except (KeyError, ZeroDivisionError):
                continue
        return out


def adapt(ftl):
    if isinstance(ftl, Dftl):
        return DftlAdapter(ftl)
    if isinstance(ftl, PearlFtl):
        return PearlAdapter(ftl)
    return ftl  # already an adapter


# ---------------------------------------------------------------------
# workload sources
# ---------------------------------------------------------------------


def parse_trace(lines, capacity_bytes, volume="public"):
    """Parse `asu,lba,size,opcode,timestamp` records (512-byte-sector LBAs).

    lines may be a path or any iterable of text lines.  Offsets wrap
    modulo the configured volume capacity; opcodes are case-insensitive.
    """
    if isinstance(lines, (str, bytes)):
        with open(lines) as f:
            return parse_trace(f.readlines(), capacity_bytes, volume)
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 5:
            raise TraceFormatError(f"trace line {lineno}: expected 5 fields, "
                                   f"got {len(parts)}")
        try:
            lba = int(parts[1])
            size = int(parts[2])
            op = _OPCODES[parts[3].strip().lower()]
            arrival = float(parts[4])
        except (ValueError, KeyError) as exc:
            raise TraceFormatError(f"trace line {lineno}: {exc}") from None
        if size <= 0:
            raise TraceFormatError(f"trace line {lineno}: size must be positive")
        offset = (lba * SECTOR_BYTES) % capacity_bytes
        records.append(TraceRecord(volume, offset, size, op, arrival))
    records.sort(key=lambda r: r.arrival)
    return records


def gen_synthetic(n, req_bytes, read_fraction, interarrival_s, volume,
                  seed, volume_pages, payload_bytes):
    """Uniform random aligned requests; interarrival 0 is the saturation
    (open-loop, always-backlogged) configuration."""
    if n < 1:
        raise PearlError("need at least one request")
    if req_bytes % payload_bytes:
        raise PearlError(f"request size {req_bytes} is not a multiple of the "
                         f"{payload_bytes}-byte page payload")
    pages_per_req = req_bytes // payload_bytes
    if pages_per_req > volume_pages:
        raise PearlError("request larger than the volume")
    rng = random.Random(seed)
    records = []
    t = 0.0
    for _ in range(n):
        start = rng.randrange(volume_pages - pages_per_req + 1)
        op = "read" if rng.random() < read_fraction else "write"
        records.append(TraceRecord(volume, start * payload_bytes,
                                   req_bytes, op, t))
        t += interarrival_s
    return records


def mix_hidden(records, hidden_fraction, seed, hidden_pages,
               hidden_payload_bytes):
    """Redirect a random subset of write traffic to the hidden volume."""
    if not 0 <= hidden_fraction <= 1:
        raise PearlError("hidden fraction must be in [0, 1]")
    rng = random.Random(seed)
    out = []
    for rec in records:
        if rec.op == "write" and rng.random() < hidden_fraction:
            pages = max(1, -(-rec.size // hidden_payload_bytes))
            pages = min(pages, hidden_pages)
            start = rng.randrange(hidden_pages - pages + 1)
            out.append(TraceRecord("hidden", start * hidden_payload_bytes,
                                   pages * hidden_payload_bytes, rec.op,
                                   rec.arrival))
        else:
            out.append(rec)
    return out


# ---------------------------------------------------------------------
# initialization and replay
# ---------------------------------------------------------------------


def init_device(ftl, fill_fraction=0.5, seed=0):
    """Fill the first fill_fraction of every volume with random data,
    re-writing until at least one GC has run and most physical pages have
    been programmed."""
    adapter = adapt(ftl)
    if fill_fraction <= 0:
        return adapter
    rng = random.Random(seed)
    vols = adapter.volumes()
    dev = adapter.device
    total = dev.geometry.total_pages

    def programmed_fraction():
        return sum(1 for p in range(total) if dev.program_count(p)) / total

    for sweep in range(40):
        for volume, (pages, payload) in vols.items():
            for lpn in range(int(pages * fill_fraction)):
                adapter.submit(volume, lpn, "write", rng.randbytes(payload))
        if adapter.gc_runs >= 1 and programmed_fraction() >= 0.5:
            return adapter
    raise PearlError("initialization did not reach steady state")


def _sub_lpns(record, payload_bytes, volume_pages):
    first = record.lba // payload_bytes
    last = (record.lba + record.size - 1) // payload_bytes
    return [lpn % volume_pages for lpn in range(first, last + 1)]


def replay(ftl, workload, cpu_overhead_us=2.0, seed=None):
    """Serial FIFO event loop over the device busy clock."""
    adapter = adapt(ftl)
    vols = adapter.volumes()
    dev = adapter.device
    rng = random.Random(seed)
    metrics = RunMetrics(seed=seed)
    free_at = 0.0
    start_counts = (dev.reads, dev.programs, dev.erases)
    first_arrival = None
    for rec in workload:
        if rec.volume not in vols:
            raise PearlError(f"no volume {rec.volume!r} on this FTL")
        pages, payload = vols[rec.volume]
        if rec.lba >= pages * payload:
            raise PearlError(f"request at {rec.lba} beyond volume capacity")
        arrival_us = rec.arrival * 1e6
        if first_arrival is None:
            first_arrival = arrival_us
        start = max(arrival_us, free_at)
        clock_before = dev.clock_us
        n_sub = 0
        for lpn in _sub_lpns(rec, payload, pages):
            data = rng.randbytes(payload) if rec.op == "write" else None
            try:
                adapter.submit(rec.volume, lpn, rec.op, data)
            except PearlError:
                if rec.op == "write":
                    raise
                # reads/trims of never-written pages serve as no-ops
            n_sub += 1
        service = (dev.clock_us - clock_before) + cpu_overhead_us * n_sub
        free_at = start + service
        metrics.responses_us.append(free_at - arrival_us)
        metrics.arrivals_us.append(arrival_us)
        metrics.sub_requests += n_sub
        metrics.requests += 1
        metrics.bytes_moved += rec.size
    metrics.busy_us = dev.clock_us
    if metrics.requests:
        metrics.makespan_us = free_at - first_arrival
    metrics.device_counts = {
        "reads": dev.reads - start_counts[0],
        "programs": dev.programs - start_counts[1],
        "erases": dev.erases - start_counts[2],
    }
    metrics.amplification = adapter.amplification()
    return metrics


# ---------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------


def export_report(metrics: RunMetrics, base_path):
    """Per-request CSV plus a JSON summary; both deterministic for fixed
    metrics.  Returns the two paths written."""
    csv_path = f"{base_path}.csv"
    summary_path = f"{base_path}.summary.json"
    with open(csv_path, "w", newline="") as f:
        f.write(f"# seed={metrics.seed}\n")
        writer = csv.writer(f)
        writer.writerow(["request", "arrival_us", "response_us"])
        for i, (a, r) in enumerate(zip(metrics.arrivals_us,
                                       metrics.responses_us)):
            writer.writerow([i, f"{a:.3f}", f"{r:.3f}"])
    with open(summary_path, "w") as f:
        json.dump(metrics.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, summary_path
