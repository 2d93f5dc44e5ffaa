"""Small file-output helpers shared by the persistence paths."""

import hashlib
import json
import os
import tempfile

__all__ = ["atomic_write_text", "config_digest", "write_manifest"]


def atomic_write_text(path, text):
    """Write via a sibling temp file and rename, so readers never observe a
    half-written artifact."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_digest(obj):
    """Stable sha256 of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(path, command, config, seeds, outputs):
    """Record enough to regenerate the artifacts deterministically."""
    from . import __version__

    payload = {
        "format": "lipmpc-manifest",
        "version": 1,
        "package_version": __version__,
        "command": command,
        "config": config,
        "config_sha256": config_digest(config),
        "seeds": seeds,
        "outputs": sorted(outputs),
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload
