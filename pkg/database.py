"""
Artifact Store
Persists pipeline intermediates (posterior draws, predictive simulations, CV checks,
reports) in SQLite, keyed by run-config hash, so every stage can resume.
"""

import io
import json
import logging
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config
from inference import PosteriorDraws, SamplerDiagnostics

logger = logging.getLogger(__name__)

# Artifact kinds
KIND_ARRAY = "array"
KIND_JSON = "json"

# ==================== DATABASE INITIALIZATION ====================

def get_db_connection(path: Optional[str] = None):
    """Get database connection"""
    conn = sqlite3.connect(path or Config.DATABASE_NAME)
    conn.row_factory = sqlite3.Row  # Access columns by name
    return conn


def init_db(path: Optional[str] = None):
    """Initialize artifact database"""
    conn = get_db_connection(path)
    cursor = conn.cursor()

    cursor.execute("PRAGMA journal_mode=WAL")
    cursor.execute("PRAGMA synchronous=NORMAL")

    # One row per stored intermediate
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS artifacts (
            config_hash TEXT NOT NULL,
            kind TEXT NOT NULL,
            name TEXT NOT NULL,
            payload BLOB NOT NULL,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
            PRIMARY KEY (config_hash, kind, name)
        )
    ''')

    # Stage executions
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            config_hash TEXT NOT NULL,
            command TEXT NOT NULL,
            status TEXT DEFAULT 'running',
            detail TEXT,
            started_at TIMESTAMP,
            finished_at TIMESTAMP
        )
    ''')

    cursor.execute("CREATE INDEX IF NOT EXISTS idx_artifacts_lookup ON artifacts(config_hash, kind)")
    cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_lookup ON runs(config_hash, started_at DESC)")

    conn.commit()
    conn.close()
    logger.debug(f"Artifact database ready at {path or Config.DATABASE_NAME}")

# ==================== RAW ARTIFACTS ====================

def _put(config_hash: str, kind: str, name: str, payload: bytes, path: Optional[str] = None):
    conn = get_db_connection(path)
    try:
        conn.execute('''
            INSERT OR REPLACE INTO artifacts (config_hash, kind, name, payload)
            VALUES (?, ?, ?, ?)
        ''', (config_hash, kind, name, payload))
        conn.commit()
    finally:
        conn.close()


def _get(config_hash: str, kind: str, name: str, path: Optional[str] = None) -> Optional[bytes]:
    conn = get_db_connection(path)
    try:
        row = conn.execute(
            "SELECT payload FROM artifacts WHERE config_hash = ? AND kind = ? AND name = ?",
            (config_hash, kind, name),
        ).fetchone()
    finally:
        conn.close()
    return None if row is None else bytes(row["payload"])


def save_array(config_hash: str, name: str, array: np.ndarray, path: Optional[str] = None):
    """Store as .npy bytes (no pickle)"""
    buffer = io.BytesIO()
    np.save(buffer, np.asarray(array), allow_pickle=False)
    _put(config_hash, KIND_ARRAY, name, buffer.getvalue(), path)


def load_array(config_hash: str, name: str, path: Optional[str] = None) -> Optional[np.ndarray]:
    payload = _get(config_hash, KIND_ARRAY, name, path)
    if payload is None:
        return None
    return np.load(io.BytesIO(payload), allow_pickle=False)


def save_json(config_hash: str, name: str, document, path: Optional[str] = None):
    text = json.dumps(document, sort_keys=True, allow_nan=False)
    _put(config_hash, KIND_JSON, name, text.encode("utf-8"), path)


def load_json(config_hash: str, name: str, path: Optional[str] = None):
    payload = _get(config_hash, KIND_JSON, name, path)
    return None if payload is None else json.loads(payload.decode("utf-8"))


def has_artifact(config_hash: str, kind: str, name: str, path: Optional[str] = None) -> bool:
    return _get(config_hash, kind, name, path) is not None


def list_artifacts(config_hash: str, path: Optional[str] = None) -> List[Tuple[str, str]]:
    """(kind, name) pairs stored for a config hash"""
    conn = get_db_connection(path)
    try:
        rows = conn.execute(
            "SELECT kind, name FROM artifacts WHERE config_hash = ? ORDER BY kind, name", (config_hash,)
        ).fetchall()
    finally:
        conn.close()
    return [(row["kind"], row["name"]) for row in rows]


def delete_artifacts(config_hash: str, path: Optional[str] = None) -> int:
    """Drop every artifact of a config hash; returns the number of rows removed"""
    conn = get_db_connection(path)
    try:
        cursor = conn.execute("DELETE FROM artifacts WHERE config_hash = ?", (config_hash,))
        conn.commit()
        deleted = cursor.rowcount
    finally:
        conn.close()
    logger.info(f"Deleted {deleted} artifacts for {config_hash}")
    return deleted

# ==================== POSTERIOR DRAWS ====================

def save_draws(config_hash: str, model_name: str, draws: PosteriorDraws, diagnostics: SamplerDiagnostics,
               path: Optional[str] = None):
    prefix = f"draws/{model_name}"
    for block, value in draws.arrays().items():
        save_array(config_hash, f"{prefix}/{block}", value, path)
    save_json(config_hash, f"{prefix}/meta", {
        "spec_hash": draws.spec_hash,
        "names": {k: list(v) for k, v in draws.names.items()},
        "blocks": sorted(draws.arrays()),
        "diagnostics": diagnostics.to_dict(),
    }, path)


def load_draws(config_hash: str, model_name: str,
               path: Optional[str] = None) -> Optional[Tuple[PosteriorDraws, SamplerDiagnostics]]:
    prefix = f"draws/{model_name}"
    meta = load_json(config_hash, f"{prefix}/meta", path)
    if meta is None:
        return None
    arrays: Dict[str, np.ndarray] = {}
    for block in meta["blocks"]:
        value = load_array(config_hash, f"{prefix}/{block}", path)
        if value is None:
            logger.warning(f"Stored draws for {model_name} are incomplete (missing {block}); refitting")
            return None
        arrays[block] = value
    draws = PosteriorDraws.from_arrays(arrays, meta["spec_hash"], meta["names"])
    return draws, SamplerDiagnostics.from_dict(meta["diagnostics"])

# ==================== RUN LOG ====================

def start_run(config_hash: str, command: str, path: Optional[str] = None) -> int:
    conn = get_db_connection(path)
    try:
        cursor = conn.execute(
            "INSERT INTO runs (config_hash, command, status, started_at) VALUES (?, ?, 'running', ?)",
            (config_hash, command, datetime.now().isoformat(timespec="seconds")),
        )
        conn.commit()
        return int(cursor.lastrowid)
    finally:
        conn.close()


def finish_run(run_id: int, status: str, detail: str = "", path: Optional[str] = None):
    conn = get_db_connection(path)
    try:
        conn.execute(
            "UPDATE runs SET status = ?, detail = ?, finished_at = ? WHERE id = ?",
            (status, detail, datetime.now().isoformat(timespec="seconds"), run_id),
        )
        conn.commit()
    finally:
        conn.close()


def get_runs(config_hash: str, path: Optional[str] = None) -> List[Dict]:
    conn = get_db_connection(path)
    try:
        rows = conn.execute(
            "SELECT * FROM runs WHERE config_hash = ? ORDER BY id DESC", (config_hash,)
        ).fetchall()
    finally:
        conn.close()
    return [dict(row) for row in rows]
