"""Utility functions."""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fingerprint(payload: Dict[str, Any]) -> str:
    """Stable short hash of a JSON-serializable mapping."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def ensure_output_directory(path) -> Path:
    output_dir = Path(path)
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def is_integer_ratio(numerator: float, denominator: float, rtol: float = 1e-9) -> bool:
    ratio = numerator / denominator
    return abs(ratio - round(ratio)) <= rtol * max(1.0, abs(ratio))
