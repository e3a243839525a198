"""Deniable flash translation layer laboratory.

WOM-coded hidden storage, a simulated NAND device, a DFTL baseline, the
PEARL FTL, a multi-snapshot adversary harness and a workload benchmark.
"""

__version__ = "0.1.0"
