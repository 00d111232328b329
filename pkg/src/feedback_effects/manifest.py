"""Run manifests: enough state to re-run a command bit-identically.

Every CLI command writes its outputs atomically (temp file + rename) and
finishes with a ``manifest.json`` recording the command, the full config
snapshot, the seed, and SHA-256 digests of inputs and outputs.  Manifests
deliberately omit wall-clock time so a re-run reproduces them byte for
byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

from . import __version__


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    def __init__(self, command: str, args: dict, seed: int | None):
        self.doc = {
            "artifact_version": __version__,
            "command": command,
            "args": args,
            "seed": seed,
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path) -> None:
        self.doc["inputs"][os.path.basename(os.fspath(path))] = sha256_file(path)

    def add_output(self, path) -> None:
        self.doc["outputs"][os.path.basename(os.fspath(path))] = sha256_file(path)

    def write(self, out_dir) -> str:
        path = os.path.join(os.fspath(out_dir), "manifest.json")
        atomic_write_text(path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(out_dir) -> dict:
    with open(os.path.join(os.fspath(out_dir), "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)
