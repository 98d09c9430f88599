"""Run artifacts: JSON-lines logs, manifests, stable hashing.

Every output directory holds exactly one manifest; every artifact embeds
the run id so it can be traced back.  Logs are append-only JSON-lines with
a schema header and contain no wall-clock data (deterministic mode must
produce byte-identical files); timing lives in the manifest only.
"""

import hashlib
import json
import os
import time

MANIFEST_SCHEMA = "stackelmac.manifest/1"
MANIFEST_NAME = "manifest.json"


def dumps_canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id(subcommand, config_hash, seed):
    blob = f"{subcommand}:{config_hash}:{seed}"
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class JsonlWriter:
    def __init__(self, path, header):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(dumps_canonical(header) + "\n")

    def write(self, record):
        self._fh.write(dumps_canonical(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_jsonl(path):
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    return lines[0], lines[1:]


def write_manifest(out_dir, subcommand, config, seed, outputs, started,
                   workers=1, deterministic=False, extra=None):
    config_hash = config.hash()
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "run_id": run_id(subcommand, config_hash, seed),
        "subcommand": subcommand,
        "seed": seed,
        "config_hash": config_hash,
        "config": config.to_dict(),
        "code_version": _package_version(),
        "outputs": sorted(outputs),
        "workers": workers,
        "deterministic": deterministic,
        "wallclock_start": started,
        "wallclock_end": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _package_version():
    try:
        from importlib.metadata import version
        return version("stackelmac")
    except Exception:
        return "unknown"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
