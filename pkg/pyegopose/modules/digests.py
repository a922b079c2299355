import hashlib
import json
import pathlib
from typing import Any

from pyegopose.modules import enums

CHUNK = 1 << 20


def calculate_hash(value: Any) -> str:
    """SHA-256 of the canonical JSON dump of a value."""
    canonical = json.dumps(value, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(filepath: pathlib.Path, digest: "hashlib._Hash | None" = None) -> str:
    """SHA-256 of a file's content, optionally folded into an existing digest."""
    digest = digest or hashlib.sha256()
    with open(filepath, "rb") as stream:
        while chunk := stream.read(CHUNK):
            digest.update(chunk)
    return digest.hexdigest()


def container_digest(directory: pathlib.Path) -> str:
    """SHA-256 over every file of a container directory in sorted name order, the run manifest excluded."""
    digest = hashlib.sha256()
    for filepath in sorted(pathlib.Path(directory).iterdir()):
        if filepath.is_file() and filepath.name != enums.Artifacts.run_manifest:
            digest.update(filepath.name.encode("utf-8"))
            file_digest(filepath, digest)
    return digest.hexdigest()
