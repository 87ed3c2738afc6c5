import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Union

import numpy as np

from envdpo.errors import InputError

PathLike = Union[str, Path]


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named random stream derived from the root seed.

    Streams with different names (or extra integer keys) are statistically
    independent, and each one is reproducible on its own.
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(_name_key(name), *map(int, extra))
    )
    return np.random.default_rng(sequence)


def file_sha256(file_path: PathLike) -> str:
    hash_obj = hashlib.sha256()

    # process the file in (byte) chunks
    chunk_size = 1_024 * 10_000
    with open(file_path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            hash_obj.update(chunk)

    return hash_obj.hexdigest()


def validate_sha256(file_path: PathLike, expected_hash: str) -> bool:
    return file_sha256(file_path) == expected_hash


def array_sha256(*arrays: np.ndarray) -> str:
    hash_obj = hashlib.sha256()
    for arr in arrays:
        hash_obj.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return hash_obj.hexdigest()


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(data: Any, path: PathLike) -> None:
    # repr-based float formatting keeps finite doubles bit-exact on reload
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_to_jsonable)
        fh.write("\n")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path} does not exist")
    with open(path) as fh:
        return json.load(fh)


def write_jsonl(records: Iterable[Dict[str, Any]], path: PathLike, append: bool = False):
    with open(path, "a" if append else "w") as fh:
        for record in records:
            print(json.dumps(record, default=_to_jsonable), file=fh)


def iter_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path} does not exist")
    with open(path) as fh:
        for line in fh:
            if line.strip():  # skip empty lines
                yield json.loads(line)


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


def numerical_gradient(
    func: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        shifted = theta.copy()
        shifted[i] = theta[i] + step
        upper = func(shifted)
        shifted[i] = theta[i] - step
        lower = func(shifted)
        grad[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4):
    """Per-coordinate relative error with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
