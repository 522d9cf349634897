"""Distance measures and two-step expression retrieval.

Matching runs in two passes: shortlist the K emotionally-closest records
(Jensen-Shannon divergence over the 7-class distributions), then pick the
shortlist entry with the smallest L2 geometric distance. A single blended
score can surface records with the right shape but the wrong emotion; the
shortlist keeps the emotion constraint hard.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InfiniteDivergenceError, ValidationError
from .features import (
    FEATURE_COUNT,
    FeatureStats,
    denormalize_features,
    normalize_features,
    validate_emotion_distribution,
)

DATABASE_FILE_VERSION = 1
DEFAULT_TOP_K = 30

LN2 = float(np.log(2.0))


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence sum p_i ln(p_i/q_i), with 0 ln(0/x) = 0."""
    pv = validate_emotion_distribution(p)
    qv = validate_emotion_distribution(q)
    mask = pv > 0.0
    if np.any(qv[mask] == 0.0):
        raise InfiniteDivergenceError("q_i = 0 where p_i > 0; divergence is infinite")
    return float(np.sum(pv[mask] * np.log(pv[mask] / qv[mask])))


def jsd(h, c) -> float:
    """Jensen-Shannon divergence 1/2 D(H||M) + 1/2 D(C||M), M = (H+C)/2.

    Always finite: m_i = 0 forces h_i = c_i = 0. Natural log, so the range
    is [0, ln 2].
    """
    hv = validate_emotion_distribution(h)
    cv = validate_emotion_distribution(c)
    return _jsd_raw(hv, cv)


def _jsd_raw(hv: np.ndarray, cv: np.ndarray) -> float:
    m = 0.5 * (hv + cv)
    hm = hv > 0.0
    cm = cv > 0.0
    d_hm = float(np.sum(hv[hm] * np.log(hv[hm] / m[hm])))
    d_cm = float(np.sum(cv[cm] * np.log(cv[cm] / m[cm])))
    return 0.5 * d_hm + 0.5 * d_cm


def _jsd_to_all(q: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """jsd(q, row) for every row of mat, vectorized."""
    m = 0.5 * (q[None, :] + mat)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_q = np.where(q[None, :] > 0.0, q[None, :] * np.log(q[None, :] / m), 0.0)
        t_r = np.where(mat > 0.0, mat * np.log(mat / m), 0.0)
    return 0.5 * t_q.sum(axis=1) + 0.5 * t_r.sum(axis=1)


def geometric_distance(a, b) -> float:
    """Euclidean norm of the componentwise feature difference."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.size != bv.size:
        raise DimensionError(f"feature vectors of length {av.size} vs {bv.size}")
    return float(np.linalg.norm(av - bv))


@dataclass(frozen=True)
class ExpressionRecord:
    """One retrievable expression: emotion distribution + normalized geometry."""

    id: str
    emotion: np.ndarray
    geometry: np.ndarray
    label: str
    payload: str = ""

    def __post_init__(self):
        object.__setattr__(self, "emotion", validate_emotion_distribution(self.emotion))
        g = np.array(self.geometry, dtype=np.float64).ravel()
        if g.size != FEATURE_COUNT:
            raise DimensionError(f"geometry has {g.size} components, expected 9")
        if not np.all(np.isfinite(g)):
            raise ValidationError("geometry contains non-finite values")
        if np.any(g < 0.0) or np.any(g > 1.0):
            raise ValidationError("record geometry must be normalized into [0, 1]")
        g.flags.writeable = False
        object.__setattr__(self, "geometry", g)


class ExpressionDatabase:
    """Ordered, immutable record collection with cached distance matrices."""

    def __init__(self, records, stats: FeatureStats, source_tag: str):
        self.records = tuple(records)
        self.stats = stats
        self.source_tag = source_tag
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate record ids in database")
        if self.records:
            self._emotion = np.stack([r.emotion for r in self.records])
            self._geometry = np.stack([r.geometry for r in self.records])
        else:
            self._emotion = np.zeros((0, 7))
            self._geometry = np.zeros((0, FEATURE_COUNT))

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class MatchPair:
    """A retrieval result: query/match ids plus both distances."""

    query_id: str
    match_id: str
    emotional_distance: float
    geometric_distance: float

    def __post_init__(self):
        for name in ("emotional_distance", "geometric_distance"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


def two_step_match(query: ExpressionRecord, db: ExpressionDatabase,
                   k: int = DEFAULT_TOP_K) -> MatchPair:
    """Shortlist the k emotionally-closest records, then pick the geometric best.

    Ties at both steps break by ascending database position, so results are
    reproducible across runs and platforms.
    """
    if len(db) == 0:
        raise ValidationError("cannot match against an empty database")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    d_emo = _jsd_to_all(query.emotion, db._emotion)
    shortlist = np.argsort(d_emo, kind="stable")[: min(k, len(db))]
    d_geo = np.linalg.norm(db._geometry[shortlist] - query.geometry[None, :], axis=1)
    best = int(np.lexsort((shortlist, d_geo))[0])
    pos = int(shortlist[best])
    return MatchPair(
        query_id=query.id,
        match_id=db.records[pos].id,
        emotional_distance=float(d_emo[pos]),
        geometric_distance=float(d_geo[best]),
    )


def build_pair_database(source: ExpressionDatabase, target: ExpressionDatabase,
                        k: int = DEFAULT_TOP_K) -> list[MatchPair]:
    """One MatchPair per source record, in source order.

    Source geometry is stored normalized against the source stats, so each
    query is re-expressed in raw units and re-normalized against the target
    stats before matching.
    """
    if len(target) == 0:
        raise ValidationError("cannot match against an empty target database")
    pairs = []
    for rec in source.records:
        raw = denormalize_features(rec.geometry, source.stats)
        query = ExpressionRecord(
            id=rec.id,
            emotion=rec.emotion,
            geometry=normalize_features(raw, target.stats),
            label=rec.label,
            payload=rec.payload,
        )
        pairs.append(two_step_match(query, target, k))
    return pairs


# --- file formats -----------------------------------------------------------

def save_database(db: ExpressionDatabase, path) -> None:
    """Header line (version, tag, stats, log base) then one record per line."""
    header = {
        "version": DATABASE_FILE_VERSION,
        "source_tag": db.source_tag,
        "log_base": "e",
        "stats": {"mins": db.stats.mins.tolist(), "maxs": db.stats.maxs.tolist()},
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for r in db.records:
            f.write(json.dumps({
                "id": r.id,
                "emotion": r.emotion.tolist(),
                "geometry": r.geometry.tolist(),
                "label": r.label,
                "payload": r.payload,
            }) + "\n")


def load_database(path) -> ExpressionDatabase:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty database file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:1: bad header: {e}") from e
    if header.get("version") != DATABASE_FILE_VERSION:
        raise FormatError(f"{path}: unsupported database version {header.get('version')!r}")
    if header.get("log_base") not in (None, "e"):
        raise FormatError(f"{path}: stored distances use log base "
                          f"{header['log_base']!r}, expected natural log")
    try:
        stats = FeatureStats(np.array(header["stats"]["mins"], dtype=np.float64),
                             np.array(header["stats"]["maxs"], dtype=np.float64))
        source_tag = header["source_tag"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed header: {e}") from e
    records = []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            records.append(ExpressionRecord(
                id=doc["id"],
                emotion=np.array(doc["emotion"], dtype=np.float64),
                geometry=np.array(doc["geometry"], dtype=np.float64),
                label=doc["label"],
                payload=doc.get("payload", ""),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"{path}:{ln}: malformed record: {e}") from e
    return ExpressionDatabase(records, stats, source_tag)


def save_pairs(pairs, path) -> None:
    """CSV of (query_id, match_id, emotional_distance, geometric_distance)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "match_id", "emotional_distance", "geometric_distance"])
        for p in pairs:
            w.writerow([p.query_id, p.match_id,
                        repr(p.emotional_distance), repr(p.geometric_distance)])


def load_pairs(path) -> list[MatchPair]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            try:
                out.append(MatchPair(
                    query_id=row["query_id"],
                    match_id=row["match_id"],
                    emotional_distance=float(row["emotional_distance"]),
                    geometric_distance=float(row["geometric_distance"]),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: malformed pair row {row}: {e}") from e
    return out
