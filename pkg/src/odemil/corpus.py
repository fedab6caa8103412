"""JSON Lines corpus files (optionally gzip-compressed) and run manifests."""
from __future__ import annotations

import gzip
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .datagen import SystemRecord
from .exprtree import OdeSystem, parse_expr, prefix_to_str, str_to_prefix, expr_to_prefix
from .integrate import Trajectory

GZIP_MAGIC = b"\x1f\x8b"


class CorpusFormatError(ValueError):
    pass


def record_to_dict(rec: SystemRecord) -> dict:
    return {
        "id": rec.id,
        "dim": rec.dim,
        "generator": rec.generator,
        "seed": rec.seed,
        "expressions": [prefix_to_str(expr_to_prefix(e)) for e in rec.system.expressions],
        "times": rec.times.tolist(),
        "states": [tr.states.tolist() for tr in rec.instances],
        "sigma": rec.sigma,
    }


def record_from_dict(d: dict) -> SystemRecord:
    try:
        dim = int(d["dim"])
        exprs = tuple(parse_expr(str_to_prefix(s), dim) for s in d["expressions"])
        times = np.asarray(d["times"], dtype=float)
        instances = [Trajectory(times, np.asarray(s, dtype=float).reshape(len(times), dim))
                     for s in d["states"]]
        return SystemRecord(
            id=int(d["id"]),
            system=OdeSystem(exprs),
            instances=instances,
            sigma=float(d.get("sigma", 0.0)),
            generator=str(d.get("generator", "poly")),
            seed=int(d.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"bad corpus record: {exc}") from exc


def dumps_record(rec: SystemRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))


def _open_write(path: Path):
    if path.suffix == ".gz":
        raw = open(path, "wb")
        # fixed mtime and no embedded name keep the bytes reproducible
        gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
        return io.TextIOWrapper(gz, encoding="utf-8"), raw
    return open(path, "w", encoding="utf-8"), None


def write_corpus(path, records: Iterable[SystemRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh, raw = _open_write(path)
    n = 0
    try:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
            n += 1
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return n


def iter_corpus(path) -> Iterator[SystemRecord]:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == GZIP_MAGIC else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
            yield record_from_dict(d)


def read_corpus(path) -> list[SystemRecord]:
    return list(iter_corpus(path))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest_path(artifact) -> Path:
    p = Path(artifact)
    return p.with_name(p.name + ".manifest.json")


def write_manifest(artifact, config: dict, seed, **extra) -> Path:
    out = {"artifact": Path(artifact).name, "config": config, "config_hash": config_hash(config),
           "seed": seed}
    out.update(extra)
    mp = manifest_path(artifact)
    mp.write_text(json.dumps(out, indent=2, sort_keys=True, default=str) + "\n")
    return mp
