import hashlib
from pathlib import Path

import numpy as np
import yaml


def stable_hash(s) -> int:
    """64-bit integer digest of a string, identical across processes and runs"""
    digest = hashlib.sha256(str(s).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed, key) -> np.random.Generator:
    """Independent random stream for ``key`` (e.g. a subject id) under a global seed"""
    return np.random.default_rng([int(seed), stable_hash(key)])


def array_sha256(array) -> str:
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()


def z_scale(data, c=0.05):
    """Display scaling of brain data between robust percentiles"""
    data = np.asarray(data, dtype=float)
    lo, hi = np.percentile(data, [100 * c, 100 * (1 - c)])
    if hi <= lo:
        return np.zeros_like(data)
    return np.clip((data - lo) / (hi - lo), 0, 1)


def write_run_record(out_dir, command, config_hash=None, seed=None, **extra):
    """Write ``run.yaml`` (command, config hash, seed, package version) in ``out_dir``"""
    from iguane import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = dict(
        command=command,
        config_hash=config_hash,
        seed=None if seed is None else int(seed),
        version=__version__,
        **extra,
    )
    with open(out_dir / "run.yaml", "w") as f:
        yaml.safe_dump(record, f, sort_keys=False)
    return record
