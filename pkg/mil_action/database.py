"""
Results ledger for studies using SQLite.

Keeps one row per (study, setting, seed) run with the headline metrics and the
full JSON record, so a study can resume from completed runs, which are never
overwritten by a later attempt.
"""

import json
import logging
import sqlite3
import threading
import time
from pathlib import Path
from typing import Dict, Optional

logger = logging.getLogger("MilAction.Database")


def run_key(study: str, setting: str, seed: int) -> str:
    return f"{study}/{setting}/seed{seed}"


class ResultsDatabase:
    """Thread-safe SQLite store of study runs."""

    def __init__(self, db_path: str = "results/results.db"):
        """
        Initialize the database connection.

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = Path(db_path)
        self.lock = threading.Lock()
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    def _init_db(self):
        with self.lock:
            conn = sqlite3.connect(self.db_path)
            cursor = conn.cursor()
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    run_key TEXT PRIMARY KEY,
                    study TEXT NOT NULL,
                    setting TEXT NOT NULL,
                    variant TEXT,
                    seed INTEGER NOT NULL,
                    status TEXT NOT NULL,
                    frame_map REAL,
                    video_map_02 REAL,
                    video_map_05 REAL,
                    record_json TEXT,
                    created_at INTEGER NOT NULL
                )
            """)
            cursor.execute("""
                CREATE INDEX IF NOT EXISTS idx_study_setting
                ON runs(study, setting)
            """)
            conn.commit()
            conn.close()

    def _insert(self, values: tuple) -> bool:
        with self.lock:
            try:
                conn = sqlite3.connect(self.db_path)
                cursor = conn.cursor()
                # a failed attempt may be replaced, a completed run may not
                cursor.execute("DELETE FROM runs WHERE run_key = ? AND status != 'ok'", (values[0],))
                cursor.execute("""
                    INSERT OR IGNORE INTO runs (
                        run_key, study, setting, variant, seed, status,
                        frame_map, video_map_02, video_map_05, record_json, created_at
                    ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, values)
                inserted = cursor.rowcount == 1
                conn.commit()
                conn.close()
                return inserted

            except sqlite3.Error as e:
                logger.error(f"Error inserting run {values[0]}: {e}", exc_info=True)
                return False

    def insert_run(self, record: Dict) -> bool:
        """
        Insert a completed run record.

        Returns:
            True if inserted, False if the run was already completed or on error
        """
        video = record["video_ap"]["mean_ap"]
        return self._insert((
            run_key(record["study"], record["setting"], record["seed"]),
            record["study"], record["setting"], record.get("variant"), record["seed"],
            record.get("status", "ok"),
            record["frame_ap"]["mean_ap"].get("0.5"), video.get("0.2"), video.get("0.5"),
            json.dumps(record, sort_keys=True), int(time.time()),
        ))

    def insert_failure(self, study: str, setting: str, variant: str, seed: int, error: str) -> bool:
        return self._insert((
            run_key(study, setting, seed), study, setting, variant, seed, "failed",
            None, None, None, json.dumps({"error": error}), int(time.time()),
        ))

    def has_run(self, study: str, setting: str, seed: int) -> bool:
        """True if a completed run exists for the key."""
        with self.lock:
            conn = sqlite3.connect(self.db_path)
            cursor = conn.cursor()
            cursor.execute("SELECT 1 FROM runs WHERE run_key = ? AND status = 'ok'",
                           (run_key(study, setting, seed),))
            found = cursor.fetchone() is not None
            conn.close()
            return found

    def get_record(self, study: str, setting: str, seed: int) -> Optional[Dict]:
        with self.lock:
            conn = sqlite3.connect(self.db_path)
            cursor = conn.cursor()
            cursor.execute("SELECT record_json FROM runs WHERE run_key = ?",
                           (run_key(study, setting, seed),))
            row = cursor.fetchone()
            conn.close()
            return json.loads(row[0]) if row else None

    def get_stats(self) -> Dict:
        """Run counts per status and the number of distinct studies."""
        with self.lock:
            conn = sqlite3.connect(self.db_path)
            cursor = conn.cursor()
            cursor.execute("SELECT status, COUNT(*) FROM runs GROUP BY status")
            by_status = dict(cursor.fetchall())
            cursor.execute("SELECT COUNT(DISTINCT study) FROM runs")
            studies = cursor.fetchone()[0]
            conn.close()
            return {
                "completed_runs": by_status.get("ok", 0),
                "failed_runs": by_status.get("failed", 0),
                "studies": studies,
                "db_path": str(self.db_path),
            }
