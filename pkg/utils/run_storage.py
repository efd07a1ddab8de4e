"""
SQLite-backed run registry.

Every cli command records one row: what ran, from which config, where the
artifacts went and whether the checks passed. Zero-config; the database
lives under the output root unless ORLICZFLOW_RUNS_DB points elsewhere.
"""
import os
import sqlite3
import uuid
from datetime import datetime
from typing import Dict, List, Optional

from config import Config


class RunStorage:
    def __init__(self, db_path: Optional[str] = None):
        self.db_path = db_path or Config.runs_db_path()
        directory = os.path.dirname(os.path.abspath(self.db_path))
        os.makedirs(directory, exist_ok=True)
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._ensure_table()

    def _ensure_table(self):
        cur = self._conn.cursor()
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id TEXT PRIMARY KEY,
                command TEXT,
                config_path TEXT,
                output_dir TEXT,
                status TEXT,
                passed INTEGER,
                created_at TEXT,
                summary TEXT
            )
            """
        )
        self._conn.commit()

    def start_run(self, command: str, config_path: str, output_dir: str) -> Dict:
        run_id = f"{datetime.now().strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:6]}"
        created_at = datetime.now().isoformat()
        cur = self._conn.cursor()
        cur.execute(
            """
            INSERT INTO runs (id, command, config_path, output_dir, status, passed, created_at, summary)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (run_id, command, os.path.abspath(config_path), output_dir, "running", None, created_at, "")
        )
        self._conn.commit()
        return self.get_run(run_id)

    def finish_run(self, run_id: str, passed: Optional[bool], status: str = "completed",
                   summary: str = "") -> Optional[Dict]:
        updates = {"status": status, "passed": None if passed is None else int(bool(passed)), "summary": summary}
        return self.update_run(run_id, updates)

    def update_run(self, run_id: str, updates: Dict) -> Optional[Dict]:
        """Update fields of a run and return the updated record"""
        if not updates:
            return self.get_run(run_id)
        keys = []
        values = []
        for k, v in updates.items():
            keys.append(f"{k} = ?")
            values.append(v)
        values.append(run_id)
        cur = self._conn.cursor()
        cur.execute(f"UPDATE runs SET {', '.join(keys)} WHERE id = ?", tuple(values))
        self._conn.commit()
        return self.get_run(run_id)

    def get_run(self, run_id: str) -> Optional[Dict]:
        cur = self._conn.cursor()
        cur.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = cur.fetchone()
        return dict(row) if row else None

    def get_all_runs(self, command: Optional[str] = None) -> List[Dict]:
        cur = self._conn.cursor()
        if command is None:
            cur.execute("SELECT * FROM runs ORDER BY created_at DESC")
        else:
            cur.execute("SELECT * FROM runs WHERE command = ? ORDER BY created_at DESC", (command,))
        return [dict(r) for r in cur.fetchall()]

    def delete_run(self, run_id: str) -> bool:
        if not self.get_run(run_id):
            return False
        cur = self._conn.cursor()
        cur.execute("DELETE FROM runs WHERE id = ?", (run_id,))
        self._conn.commit()
        return True

    def close(self):
        self._conn.close()


_storage: Optional[RunStorage] = None


def get_run_storage() -> RunStorage:
    """Shared registry for the configured database path"""
    global _storage
    if _storage is None or _storage.db_path != Config.runs_db_path():
        _storage = RunStorage()
    return _storage
