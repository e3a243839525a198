"""Command-line front end: code verification, device lifecycle, scripted
I/O, benchmarking, adversary experiments, and snapshot tooling.

Exit codes: 0 success, 1 property violation / distinguisher fired,
2 usage error.  Every run appends a JSON-lines manifest record so any
published number can be regenerated from one command line.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

from . import __version__
from .adversary import (classify_snapshot, diff_transitions,
                        frequency_distinguisher, ui1_inference)
from .bench import (adapt, export_report, gen_synthetic, init_device,
                    mix_hidden, parse_trace, replay)
from .config import PearlConfig, desk_config, paper_config
from .dftl import Dftl
from .errors import PearlError
from .flash import PRESETS, FlashDevice, Snapshot
from .ftl import PearlFtl
from .mutants import BrokenAllocatorFtl
from .wom import (BUILTIN_CODES, WOM_2_3, WOM_3_5, load_code_file,
                  verify_equal_partition, verify_wom2)

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _config_for(args, **overrides) -> PearlConfig:
    maker = paper_config if args.preset == "paper" else desk_config
    kw = {"seed": args.seed}
    if getattr(args, "code", None):
        kw["code"] = BUILTIN_CODES[args.code]
    if getattr(args, "config", None):
        with open(args.config) as f:
            kw.update(json.load(f))
    kw.update(overrides)
    return maker(**kw)


def _write_manifest(args, outputs):
    out_dir = getattr(args, "out", None) or "."
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": args.command,
        "seed": args.seed,
        "preset": getattr(args, "preset", None),
        "version": __version__,
        "argv": sys.argv[1:],
        "outputs": outputs,
    }
    with open(os.path.join(out_dir, "manifest.jsonl"), "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------


def cmd_verify_code(args):
    if args.code_file:
        code = load_code_file(args.code_file)
    else:
        code = BUILTIN_CODES[args.code or "wom3x5"]
    validity = verify_wom2(code)
    partition = verify_equal_partition(code)
    print(f"code {code.name}: k={code.k} n={code.n}")
    print(f"two-write validity: {'pass' if validity.ok else 'FAIL'}")
    for v in validity.violations:
        print(f"  {v}")
    sizes = sorted(partition.sizes.items())
    print("partition sizes:",
          ", ".join(f"m={m}: |A|={a} |B|={b}" for m, (a, b) in sizes))
    print(f"equal partition: {'yes' if partition.equal else 'no'}")
    _write_manifest(args, {"code": code.name, "valid": validity.ok,
                           "equal_partition": partition.equal})
    if not validity.ok:
        return EXIT_VIOLATION
    if args.require_equal_partition and not partition.equal:
        return EXIT_VIOLATION
    return EXIT_OK


def _make_pearl(args, blank_device=None):
    cfg = _config_for(args)
    if blank_device is None:
        blank_device = FlashDevice(cfg.geometry)
    return PearlFtl.format(blank_device, cfg, args.public_password,
                           args.hidden_password)


def _mount(args):
    snap = Snapshot.load(args.device)
    device = FlashDevice.restore(snap)
    if args.ftl == "dftl":
        raise PearlError("the baseline FTL has no on-device metadata to "
                         "mount; use it through `bench` only")
    return PearlFtl.mount(device, args.public_password,
                          args.hidden_password, seed=args.seed)


def cmd_init(args):
    ftl = _make_pearl(args)
    if args.fill > 0:
        init_device(ftl, fill_fraction=args.fill, seed=args.seed)
    ftl.prepare_unmount()
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "device.img")
    ftl.snapshot().save(path)
    print(f"device image: {path}")
    print(f"gc runs during fill: {ftl.gc_runs}")
    _write_manifest(args, {"device": path, "gc_runs": ftl.gc_runs})
    return EXIT_OK


def cmd_io(args):
    ftl = _mount(args)
    failures = 0
    with open(args.script) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            req = json.loads(line)
            volume, op, lpn = req["volume"], req["op"], req["lpn"]
            try:
                if op == "write":
                    data = bytes.fromhex(req["data_hex"])
                    if volume == "public":
                        ftl.public_write(lpn, data)
                    else:
                        ftl.hidden_write(lpn, data)
                    print(f"{lineno}: wrote {volume} lpn {lpn}")
                elif op == "read":
                    out = (ftl.public_read(lpn) if volume == "public"
                           else ftl.hidden_read(lpn))
                    print(f"{lineno}: {volume} lpn {lpn} = {out.hex()}")
                elif op == "trim":
                    ftl.trim(lpn, volume=volume)
                    print(f"{lineno}: trimmed {volume} lpn {lpn}")
                else:
                    raise PearlError(f"unknown op {op!r}")
            except PearlError as exc:
                failures += 1
                print(f"{lineno}: error: {exc}")
    ftl.prepare_unmount()
    ftl.snapshot().save(args.device)
    _write_manifest(args, {"device": args.device, "failures": failures})
    return EXIT_VIOLATION if failures else EXIT_OK


def _bench_ftl(args):
    if args.ftl == "dftl":
        device = FlashDevice(PRESETS[args.preset])
        return adapt(Dftl(device))
    return adapt(_make_pearl(args))


def cmd_bench(args):
    adapter = _bench_ftl(args)
    init_device(adapter, fill_fraction=args.fill, seed=args.seed)
    vols = adapter.volumes()
    volume = args.volume
    if volume not in vols:
        volume = next(iter(vols))
    pages, payload = vols[volume]
    if args.trace:
        workload = parse_trace(args.trace, pages * payload, volume)
    else:
        workload = gen_synthetic(args.requests, args.req_bytes or payload,
                                 args.read_fraction, args.interarrival,
                                 volume, args.seed + 1, pages, payload)
    if args.hidden_fraction > 0 and "hidden" in vols:
        h_pages, h_payload = vols["hidden"]
        workload = mix_hidden(workload, args.hidden_fraction, args.seed + 2,
                              h_pages, h_payload)
    metrics = replay(adapter, workload, cpu_overhead_us=args.cpu_overhead,
                     seed=args.seed + 3)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"{args.ftl}-{volume}")
    paths = export_report(metrics, base)
    s = metrics.summary()
    print(f"requests {s['requests']} mean {s['mean_us']:.1f}us "
          f"p99 {s['p99_us']:.1f}us iops {s['iops']:.1f} "
          f"throughput {s['bytes_per_second']:.0f} B/s")
    _write_manifest(args, {"report": list(paths), **{
        k: s[k] for k in ("requests", "mean_us", "iops", "bytes_per_second")}})
    return EXIT_OK


def _attack_workload(cls, seed, cfg, nops=1500, snap_every=500, hidden=True):
    device = FlashDevice(cfg.geometry)
    ftl = cls.format(device, cfg, "public-pw", "hidden-pw")
    lay = cfg.layout
    rng = random.Random(seed + 1)
    pub = set()
    snaps = []
    for i in range(nops):
        r = rng.random()
        if r < 0.45 or not pub:
            lpn = rng.randrange(cfg.public_pages // 4)
            ftl.public_write(lpn, rng.randbytes(lay.public_payload_bytes))
            pub.add(lpn)
        elif r < 0.70 and hidden:
            h = rng.randrange(cfg.hidden_pages // 4)
            ftl.hidden_write(h, rng.randbytes(lay.hidden_payload_bytes))
        elif r < 0.80 and pub:
            lpn = rng.choice(sorted(pub))
            ftl.trim(lpn)
            pub.discard(lpn)
        elif r < 0.85:
            ftl.gc_run()
        elif pub:
            ftl.public_read(rng.choice(sorted(pub)))
        if (i + 1) % snap_every == 0:
            ftl.prepare_unmount()
            snaps.append(ftl.snapshot())
    ftl.prepare_unmount()
    snaps.append(ftl.snapshot())
    return ftl, snaps


def cmd_attack(args):
    cls = BrokenAllocatorFtl if args.ftl == "mutant" else PearlFtl
    detected = 0
    for trial in range(args.trials):
        cfg = _config_for(args, seed=args.seed + trial, cmt_capacity=64)
        _, snaps = _attack_workload(cls, args.seed + trial, cfg)
        if args.experiment == "frequency":
            report = frequency_distinguisher(snaps, cfg.code, min_groups=1)
            hit = report.distinguishes()
            print(f"trial {trial}: groups {report.total_groups} "
                  f"p {report.p_value:.4g} -> "
                  f"{'distinguished' if hit else 'no distinguisher'}")
        elif args.experiment == "transitions":
            n = sum(len(diff_transitions(a, b).implausible)
                    for a, b in zip(snaps, snaps[1:]))
            hit = n > 0
            print(f"trial {trial}: {n} implausible transitions")
        else:
            n = sum(len(ui1_inference(a, b))
                    for a, b in zip(snaps, snaps[1:]))
            hit = n > 0
            print(f"trial {trial}: {n} UI1 alarms")
        detected += hit
    verdict = "distinguished" if detected else "no distinguisher"
    print(f"verdict: {verdict} ({detected}/{args.trials} trials)")
    _write_manifest(args, {"experiment": args.experiment,
                           "detected": detected, "trials": args.trials})
    return EXIT_VIOLATION if detected else EXIT_OK


def cmd_snapshot(args):
    snap = Snapshot.load(args.device)
    observations = classify_snapshot(snap, k_pub=None)
    counts = {}
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "pages.txt")
    with open(path, "w") as f:
        for obs in observations:
            f.write(f"page {obs.ppn} {obs.stage}\n")
            counts[obs.stage] = counts.get(obs.stage, 0) + 1
    print(f"page report: {path}")
    for stage in ("empty", "first", "second"):
        print(f"{stage}: {counts.get(stage, 0)}")
    _write_manifest(args, {"report": path, "counts": counts})
    return EXIT_OK


# ---------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pearl",
        description="deniable WOM-coded FTL simulator and test bench")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--config", help="JSON file of config overrides")
    parser.add_argument("--out", default="runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-code", help="check WOM/partition properties")
    p.add_argument("--code", choices=sorted(BUILTIN_CODES))
    p.add_argument("--code-file")
    p.add_argument("--require-equal-partition", action="store_true")
    p.set_defaults(func=cmd_verify_code)

    p = sub.add_parser("init", help="format and optionally pre-fill a device")
    p.add_argument("--code", choices=sorted(BUILTIN_CODES))
    p.add_argument("--public-password", default="public-pw")
    p.add_argument("--hidden-password", default=None)
    p.add_argument("--fill", type=float, default=0.5)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("io", help="run a scripted request batch")
    p.add_argument("--device", required=True)
    p.add_argument("--script", required=True,
                   help="JSON-lines: volume, op, lpn, data_hex")
    p.add_argument("--public-password", default="public-pw")
    p.add_argument("--hidden-password", default=None)
    p.add_argument("--ftl", choices=["pearl"], default="pearl")
    p.set_defaults(func=cmd_io)

    p = sub.add_parser("bench", help="replay a trace or synthetic workload")
    p.add_argument("--ftl", choices=["pearl", "dftl"], default="pearl")
    p.add_argument("--code", choices=sorted(BUILTIN_CODES))
    p.add_argument("--trace")
    p.add_argument("--volume", default="public")
    p.add_argument("--requests", type=int, default=1000)
    p.add_argument("--req-bytes", type=int, default=0,
                   help="default: one page payload")
    p.add_argument("--read-fraction", type=float, default=0.5)
    p.add_argument("--interarrival", type=float, default=0.0)
    p.add_argument("--hidden-fraction", type=float, default=0.0)
    p.add_argument("--fill", type=float, default=0.5)
    p.add_argument("--cpu-overhead", type=float, default=2.0)
    p.add_argument("--public-password", default="public-pw")
    p.add_argument("--hidden-password", default="hidden-pw")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack", help="run a multi-snapshot adversary")
    p.add_argument("--experiment",
                   choices=["frequency", "transitions", "ui1"],
                   default="ui1")
    p.add_argument("--ftl", choices=["pearl", "mutant"], default="pearl")
    p.add_argument("--code", choices=sorted(BUILTIN_CODES))
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("snapshot", help="classify a raw device image")
    p.add_argument("--device", required=True)
    p.set_defaults(func=cmd_snapshot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PearlError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
