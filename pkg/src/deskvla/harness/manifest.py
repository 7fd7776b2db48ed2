"""Run manifests: every reported number traces back to one JSON document."""

from __future__ import annotations

import hashlib
import json
import os
import time

from . import config as config_mod


def code_hash():
    """Content hash over the package sources (code-version fingerprint)."""
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    digest = hashlib.sha256()
    for dirpath, _, filenames in sorted(os.walk(root)):
        for name in sorted(filenames):
            if name.endswith(".py"):
                path = os.path.join(dirpath, name)
                digest.update(path.removeprefix(root).encode())
                with open(path, "rb") as fh:
                    digest.update(fh.read())
    return digest.hexdigest()[:16]


def new_manifest(command, config, seed):
    return {
        "command": command,
        "seed": int(seed),
        "code_hash": code_hash(),
        "config": config_mod.config_dict(config),
        "started_unix": time.time(),
        "stages": {},
        "metrics": {},
    }


def write_manifest(path, manifest):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
    return path


class StageTimer:
    """Accumulates wall-clock seconds per named stage into a manifest."""

    def __init__(self, manifest):
        self.manifest = manifest

    def time(self, name):
        return _Stage(self.manifest, name)


class _Stage:
    def __init__(self, manifest, name):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        elapsed = time.perf_counter() - self.start
        stages = self.manifest["stages"]
        stages[self.name] = stages.get(self.name, 0.0) + elapsed
        return False
