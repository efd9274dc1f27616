import logging
import os
import platform
import sys
from functools import lru_cache

import psutil

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s (%(filename)s:%(lineno)d)'
THREADS_ENV = "FORCELAB_THREADS"


def configure_logging(verbose: bool = False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@lru_cache(maxsize=None)
def fft_workers() -> int:
    """Number of FFT worker threads, FORCELAB_THREADS or the physical core count."""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            workers = int(value)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {value!r}")
        if workers < 1:
            raise ValueError(f"{THREADS_ENV} must be positive, got {workers}")
        return workers
    return psutil.cpu_count(logical=False) or 1


def human_size(nbytes):
    suffixes = ['B', 'KB', 'MB', 'GB', 'TB', 'PB']
    i = 0
    while nbytes >= 1024 and i < len(suffixes)-1:
        nbytes /= 1024.
        i += 1
    f = ('%.2f' % nbytes).rstrip('0').rstrip('.')
    return '%s %s' % (f, suffixes[i])


def get_system_stats():
    process = psutil.Process()
    memory = process.memory_info()
    return {
        "cpu_percent": process.cpu_percent(),
        "memory_percent": process.memory_percent(),
        "rss_bytes": memory.rss,
        "num_threads": process.num_threads(),
    }


def get_system_info():
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "cpu_count": psutil.cpu_count(logical=True),
        "physical_cores": psutil.cpu_count(logical=False),
        "total_memory": human_size(psutil.virtual_memory().total),
        "fft_workers": fft_workers(),
    }
