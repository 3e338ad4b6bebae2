import json
import os
import tempfile
from typing import Any, List, Optional, Tuple


def split_pair_path(path: str) -> Tuple[str, str]:
    """
    Resolve the `<name>.json` header and `<name>.raw` payload for an artifact.

    Args:
        path: Either the bare name or either member of the pair

    Returns:
        (header_path, payload_path)
    """
    base, ext = os.path.splitext(path)
    if ext.lower() not in (".json", ".raw"):
        base = path
    return base + ".json", base + ".raw"


def ensure_parent_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write `data` to a temp file in the destination directory, then rename over `path`."""
    ensure_parent_dir(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def find_pair_dirs(
    root_dir: str,
    marker: str = "fixed.json",
    exclude_dirs: Optional[List[str]] = None,
) -> List[str]:
    """
    Find synthetic-pair directories below a dataset root.

    A directory qualifies when it contains the `marker` file. Results are
    sorted so that dataset order is reproducible.

    Args:
        root_dir: Root directory to scan
        marker: File name identifying a pair directory
        exclude_dirs: Directory names to skip while walking

    Returns:
        Sorted list of absolute directory paths
    """
    if exclude_dirs is None:
        exclude_dirs = []
    if not os.path.isdir(root_dir):
        raise FileNotFoundError(f"Dataset directory not found: {root_dir}")

    root_dir = os.path.abspath(root_dir)
    pair_dirs = []
    for dirpath, dirnames, filenames in os.walk(root_dir):
        dirnames[:] = [d for d in dirnames if d not in exclude_dirs]
        if marker in filenames:
            pair_dirs.append(dirpath)
    return sorted(pair_dirs)
