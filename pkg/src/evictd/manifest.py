"""Run manifests: deterministic provenance stamps embedded in every artifact.

A manifest captures the command, seed, config snapshot, and free-form
parameters, plus a content hash over exactly those fields.  Nothing
time-dependent goes in, so rerunning a command with the same inputs yields
byte-identical artifacts.  Writers are atomic (temp file then rename).
"""

from __future__ import annotations

import hashlib
import json
import os

CSV_MANIFEST_PREFIX = "# manifest: "


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_manifest(
    command: str,
    seed: int,
    config: dict | None = None,
    params: dict | None = None,
    outputs: list[str] | None = None,
) -> dict:
    core = {
        "command": command,
        "seed": seed,
        "config": config,
        "params": params or {},
    }
    digest = hashlib.sha256(canonical_json(core).encode()).hexdigest()
    doc = dict(core)
    doc["outputs"] = list(outputs or [])
    doc["content_hash"] = digest
    return doc


def write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: str, header: list[str], rows: list[list], man: dict) -> None:
    """CSV with the manifest as a leading comment line."""
    lines = [CSV_MANIFEST_PREFIX + canonical_json(man), ",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_csv(path: str) -> tuple[dict | None, list[str], list[list[str]]]:
    """Parse a CSV written by :func:`write_csv`: (manifest, header, rows)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    man = None
    if lines and lines[0].startswith(CSV_MANIFEST_PREFIX):
        man = json.loads(lines[0][len(CSV_MANIFEST_PREFIX):])
        lines = lines[1:]
    if not lines:
        raise ValueError(f"{path} has no header row")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return man, header, rows


def write_json(path: str, payload: dict, man: dict) -> None:
    """JSON artifact with the manifest as a top-level key."""
    doc = {"manifest": man}
    doc.update(payload)
    write_text_atomic(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_ndjson(path: str, records: list[dict], man: dict) -> None:
    """Newline-delimited JSON with the manifest as the first record."""
    lines = [json.dumps({"manifest": man})]
    lines.extend(json.dumps(r) for r in records)
    write_text_atomic(path, "\n".join(lines) + "\n")


def save_figure(fig, path: str, man: dict) -> None:
    """Render a matplotlib figure to PNG with the manifest in its metadata."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp.png"
    fig.savefig(
        tmp,
        format="png",
        metadata={"Software": "evictd", "manifest": canonical_json(man)},
    )
    os.replace(tmp, path)


def png_metadata(path: str) -> dict:
    """Read the tEXt key-value pairs of a PNG (no external dependencies)."""
    import struct
    import zlib

    out = {}
    with open(path, "rb") as fh:
        if fh.read(8) != b"\x89PNG\r\n\x1a\n":
            raise ValueError(f"{path} is not a PNG")
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            length, ctype = struct.unpack(">I4s", head)
            data = fh.read(length)
            fh.read(4)  # crc
            if ctype == b"tEXt":
                key, _, value = data.partition(b"\x00")
                out[key.decode("latin-1")] = value.decode("latin-1")
            elif ctype == b"zTXt":
                key, _, rest = data.partition(b"\x00")
                out[key.decode("latin-1")] = zlib.decompress(rest[1:]).decode("latin-1")
            elif ctype == b"IEND":
                break
    return out
