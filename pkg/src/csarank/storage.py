"""File formats: binary embeddings, ranking lists, and ground truth.

Embeddings (binary, little-endian):

    magic   4 bytes  "CSAE"
    version u32      currently 1
    N       u64      row count
    d       u32      dimensionality
    dtype   u8       0 = float32
    ids     N x (u16 length + utf-8 bytes)
    data    N*d float32, row-major

Rankings and ground truth are JSON Lines, one record per query:

    {"query": "...", "entries": [["id", score], ...]}
    {"query": "...", "positives": [...], "ignores": [...]}

Writes are deterministic: same content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .affinity import EmbeddingMatrix, RankingList
from .dataset import GroundTruth


class FormatError(ValueError):
    """File contents failed validation; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


EMB_MAGIC = b"CSAE"
EMB_VERSION = 1


def write_embeddings(path, emb: EmbeddingMatrix) -> None:
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<I", EMB_VERSION))
        f.write(struct.pack("<Q", len(emb)))
        f.write(struct.pack("<I", emb.dim))
        f.write(struct.pack("<B", 0))
        for image_id in emb.ids:
            b = image_id.encode("utf-8")
            f.write(struct.pack("<H", len(b)))
            f.write(b)
        f.write(np.ascontiguousarray(emb.rows, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingMatrix:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != EMB_MAGIC:
        raise FormatError("bad magic", 0)
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != EMB_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n = struct.unpack("<Q", take(8, "row count"))[0]
    dim = struct.unpack("<I", take(4, "dimension"))[0]
    dtype = struct.unpack("<B", take(1, "dtype"))[0]
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}", pos - 1)
    ids = []
    for _ in range(n):
        length = struct.unpack("<H", take(2, "id length"))[0]
        ids.append(take(length, "id bytes").decode("utf-8"))
    raw = take(4 * n * dim, "embedding values")
    if pos != len(buf):
        raise FormatError("trailing bytes after payload", pos)
    rows = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    return EmbeddingMatrix(ids, rows)


def write_rankings(path, rankings: list) -> None:
    with open(path, "w") as f:
        for r in rankings:
            rec = {"query": r.query_id,
                   "entries": [[cid, float(s)] for cid, s in zip(r.ids, r.scores)]}
            f.write(json.dumps(rec) + "\n")


def read_rankings(path) -> list:
    out = []
    offset = 0
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    rec = json.loads(line)
                    ids = [e[0] for e in rec["entries"]]
                    scores = np.array([e[1] for e in rec["entries"]], dtype=np.float64)
                    out.append(RankingList(rec["query"], ids, scores))
                except (KeyError, TypeError, IndexError, ValueError,
                        json.JSONDecodeError) as exc:
                    raise FormatError(
                        f"bad ranking record on line {line_no}: {exc}", offset
                    ) from exc
            offset += len(raw)
    return out


def write_ground_truth(path, truth: GroundTruth) -> None:
    with open(path, "w") as f:
        for qid in sorted(truth.positives):
            rec = {"query": qid,
                   "positives": sorted(truth.positives[qid]),
                   "ignores": sorted(truth.ignores.get(qid, []))}
            f.write(json.dumps(rec) + "\n")


def read_ground_truth(path) -> GroundTruth:
    positives, ignores = {}, {}
    offset = 0
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    rec = json.loads(line)
                    positives[rec["query"]] = set(rec["positives"])
                    if rec.get("ignores"):
                        ignores[rec["query"]] = set(rec["ignores"])
                except (KeyError, TypeError, ValueError,
                        json.JSONDecodeError) as exc:
                    raise FormatError(
                        f"bad ground-truth record on line {line_no}: {exc}", offset
                    ) from exc
            offset += len(raw)
    return GroundTruth(positives, ignores)


def write_labels(path, labels: dict) -> None:
    Path(path).write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")


def read_labels(path) -> dict:
    return json.loads(Path(path).read_text())


def write_report(path, reports: list) -> None:
    payload = [r.to_dict() for r in reports]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
