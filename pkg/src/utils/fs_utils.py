import os
import json
import time
import logging
import tempfile
from dataclasses import dataclass, field, asdict
from typing import Optional

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"


def ensure_dir(path: str) -> str:
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def atomic_write_bytes(path: str, data: bytes):
    """Writes to a sibling temp file and renames it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    ensure_dir(directory)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except Exception:
        try:
            os.remove(tmp_path)
        except OSError as e:
            logger.error(f"Failed to remove temp file {tmp_path}: {e}")
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path: str, payload: dict):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


@dataclass
class RunManifest:
    """Everything needed to rerun a command: its arguments, resolved config and inputs."""
    command: str
    config: dict
    seed: Optional[int] = None
    corpus_hash: Optional[str] = None
    checkpoints: list = field(default_factory=list)
    arguments: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    tool_version: str = TOOL_VERSION
    started_at: float = field(default_factory=time.time)
    finished_at: Optional[float] = None
    status: str = "running"


def manifest_path_for(output_path: str) -> str:
    """Manifest for a command whose output is a single file: `<output>.manifest.json` beside it."""
    return os.path.abspath(output_path) + ".manifest.json"


def write_manifest(manifest: RunManifest, out_dir: str, status: str = "ok",
                   path: Optional[str] = None) -> Optional[str]:
    """Stamps the end time and writes `<out_dir>/manifest.json` (or `path`); failures are logged, not raised."""
    manifest.finished_at = time.time()
    manifest.status = status
    path = path or os.path.join(out_dir, "manifest.json")
    try:
        write_json(path, asdict(manifest))
        logger.info(f"Wrote run manifest: {path}")
        return path
    except Exception as e:
        logger.error(f"Failed to write run manifest {path}: {e}")
        return None
