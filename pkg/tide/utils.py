from __future__ import (
    annotations,
)

# see https://loguru.readthedocs.io/en/stable/api/type_hints.html#module-autodoc_stub_file.loguru
import hashlib
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from loguru import logger

# prevent excessive number of processes in Windows and high cpu-count machines
max_workers: int = 4 if os.name == "nt" else min(16, os.cpu_count() or 16)

# Get entry point file name as default log name
default_log_name = Path(sys.argv[0]).stem
default_log_name = "log" if default_log_name == "" else default_log_name


def derive_seed(*keys: int) -> int:
    """Counter-based seed expansion.

    Maps a tuple of non-negative integers (e.g. job seed, branch index, step) to a
    63-bit seed. The result depends only on the keys, never on call order.
    """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def generator(*keys: int) -> torch.Generator:
    """A CPU torch generator seeded with `derive_seed(*keys)`."""
    return torch.Generator().manual_seed(derive_seed(*keys))


def file_digest(path: str | Path) -> str:
    """sha256 hex digest of a file's bytes."""
    with Path(path).open("rb") as f:
        return hashlib.file_digest(f, "sha256").hexdigest()  # pyright: ignore


def output_dir_default(fallback: str = "output") -> str:
    """Default output directory, overridable with the `TIDE_OUTPUT_DIR` env var."""
    return os.getenv("TIDE_OUTPUT_DIR", fallback)


def set_log_level(level: int | None) -> str:
    """Sets the log level, in order of priority, to the provided int `level`, the
    `LOGURU_LEVEL` environment variable, or `SUCCESS` by default.

    E.g. `os.environ["LOGURU_LEVEL"] = "INFO"`
    Available levels are `TRACE`, `DEBUG`, `INFO`, `SUCCESS`, `WARNING`, `ERROR`, and
    `CRITICAL`. Default is `SUCCESS` which is level `0`, and higher levels are more
    verbose.
    """
    level_map = {
        3: "TRACE",
        2: "DEBUG",
        1: "INFO",
        0: "SUCCESS",
        -1: "WARNING",
        -2: "ERROR",
        -3: "CRITICAL",
    }
    # First priority is argument `level`
    if level is not None:
        return level_map[max(-3, min(3, level))]
    # Second, if env var is set, let's roll with that
    env_level = os.getenv("LOGURU_LEVEL")
    if env_level is not None:
        return env_level
    # Default log level
    return level_map[0]


def setup_logger(
    level: int | None, log_name: str = default_log_name, log_dir: str | None = None
):
    """Configure loguru.

    Call this once from entrypoints to set up a new logger.
    In non-entrypoint modules, just use `from loguru import logger` directly.

    Console output goes to stderr, since stdout is reserved for machine-readable
    results. If `log_dir` is given, a log file is also written to
    `f"{log_dir}/{log_name}.log"`.

    Parameters
    ----------
    level
        Verbosity, see `set_log_level`.
    log_name
        Name of the log. Corresponding log file will be called {log_name}.log. (Default value = default_log_name)
    log_dir
        Directory to write the log file to. No log file is written if None.
    """
    log_level = set_log_level(level)

    base_format = "<cyan>{time:YYYY-MM-DD HH:mm:ss.SSS}</cyan> | <level>{level: >8}</level> : <level>{message}</level>"
    filename_and_thread = '(<cyan>{name}:{thread.name}:pid-{process}</cyan> "<cyan>{file.path}</cyan>:<cyan>{line}</cyan>")'
    if level is not None and level > 1:
        stderr_format = base_format + filename_and_thread
    else:
        stderr_format = base_format

    logger.remove()
    logger.add(
        sink=sys.stderr,
        diagnose=True,
        level=log_level,
        format=stderr_format,
    )
    if log_dir is not None:
        logger.add(
            sink=f"{log_dir}/{log_name}.log",
            enqueue=True,
            mode="a+",
            level="INFO",
            format=base_format + filename_and_thread,
            colorize=False,
            serialize=False,
            diagnose=False,
            rotation="20 MB",
            compression="zip",
        )


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed global torch seed, restoring the RNG state afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
