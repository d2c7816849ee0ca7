"""
DuckDB run tracking and dlt publishing of run summaries
"""

import json
import logging
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import dlt
import duckdb

from .config import TRACKING_CONFIG

logger = logging.getLogger(__name__)

TABLES = {
    'collection_runs': """
        CREATE TABLE IF NOT EXISTS collection_runs (
            run_id VARCHAR PRIMARY KEY,
            scenario VARCHAR,
            behavior_tag VARCHAR,
            laps INTEGER,
            cameras INTEGER,
            samples INTEGER,
            manifest_path VARCHAR,
            created_at TIMESTAMP
        )
    """,
    'collected_laps': """
        CREATE TABLE IF NOT EXISTS collected_laps (
            run_id VARCHAR,
            lap INTEGER,
            direction VARCHAR,
            samples INTEGER,
            lap_time_s DOUBLE,
            interferences INTEGER,
            status VARCHAR,
            recorded_at TIMESTAMP,
            PRIMARY KEY (run_id, lap)
        )
    """,
    'training_runs': """
        CREATE TABLE IF NOT EXISTS training_runs (
            run_id VARCHAR PRIMARY KEY,
            behavior_tag VARCHAR,
            model_path VARCHAR,
            epochs INTEGER,
            steps_per_epoch INTEGER,
            final_train_loss DOUBLE,
            final_val_loss DOUBLE,
            seconds DOUBLE,
            weights_checksum VARCHAR,
            created_at TIMESTAMP
        )
    """,
    'epoch_history': """
        CREATE TABLE IF NOT EXISTS epoch_history (
            run_id VARCHAR,
            epoch INTEGER,
            train_loss DOUBLE,
            val_loss DOUBLE,
            seconds DOUBLE,
            PRIMARY KEY (run_id, epoch)
        )
    """,
    'latency_samples': """
        CREATE TABLE IF NOT EXISTS latency_samples (
            run_id VARCHAR PRIMARY KEY,
            model_path VARCHAR,
            count INTEGER,
            mode_ms DOUBLE,
            mean_ms DOUBLE,
            p50_ms DOUBLE,
            p95_ms DOUBLE,
            created_at TIMESTAMP
        )
    """,
    'experiment_results': """
        CREATE TABLE IF NOT EXISTS experiment_results (
            run_id VARCHAR,
            experiment VARCHAR,
            scenario VARCHAR,
            condition VARCHAR,
            value DOUBLE,
            eta DOUBLE,
            lap_time_s DOUBLE,
            interferences INTEGER,
            completed BOOLEAN,
            interval VARCHAR,
            created_at TIMESTAMP
        )
    """,
}


def new_run_id() -> str:
    return f"{datetime.now():%Y%m%d-%H%M%S}-{uuid.uuid4().hex[:6]}"


class RunTracker:
    """
    Keeps a ledger of collection, training, latency and experiment runs in DuckDB
    """

    def __init__(self, db_path: Optional[str] = None):
        """
        Args:
            db_path: DuckDB file, ':memory:' for a throwaway store (defaults to TRACKING_CONFIG)
        """
        self.db_path = str(db_path or TRACKING_CONFIG['tracking_db'])
        self.conn = None

    def connect(self) -> duckdb.DuckDBPyConnection:
        if self.conn is None:
            if self.db_path != ':memory:':
                Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
            self.conn = duckdb.connect(self.db_path)
            logger.debug(f"Connected to tracking store {self.db_path}")
        return self.conn

    def disconnect(self):
        if self.conn is not None:
            self.conn.close()
            self.conn = None
            logger.debug("Disconnected from tracking store")

    def __enter__(self) -> 'RunTracker':
        self.setup_tables()
        return self

    def __exit__(self, *exc):
        self.disconnect()

    def setup_tables(self):
        conn = self.connect()
        for ddl in TABLES.values():
            conn.execute(ddl)
        logger.debug(f"Tracking tables ready in {self.db_path}")

    def execute_query(self, query: str, params: Optional[Sequence[Any]] = None) -> List[tuple]:
        conn = self.connect()
        logger.debug(f"Executing query: {query.strip()[:100]}...")
        return conn.execute(query, list(params) if params else []).fetchall()

    def table_exists(self, table_name: str) -> bool:
        result = self.execute_query(
            "SELECT count(*) FROM information_schema.tables WHERE table_name = ?", [table_name])
        return result[0][0] > 0

    def get_table_row_count(self, table_name: str) -> int:
        if table_name not in TABLES:
            raise ValueError(f"unknown tracking table '{table_name}'")
        return self.execute_query(f"SELECT count(*) FROM {table_name}")[0][0]

    def record_collection(
        self,
        scenario: str,
        behavior_tag: str,
        laps: int,
        cameras: int,
        samples: int,
        manifest_path,
        lap_stats: Sequence[Dict] = (),
        run_id: Optional[str] = None,
    ) -> str:
        """Store a collection run and its per-lap stats; returns the run id"""
        run_id = run_id or new_run_id()
        self.execute_query("""
            INSERT OR REPLACE INTO collection_runs
            (run_id, scenario, behavior_tag, laps, cameras, samples, manifest_path, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, [run_id, scenario, behavior_tag, laps, cameras, samples, str(manifest_path), datetime.now()])
        for stats in lap_stats:
            self.record_collected_lap(run_id, stats)
        logger.info(f"Tracked collection run {run_id}: {samples} samples, {laps} lap(s)")
        return run_id

    def record_collected_lap(self, run_id: str, stats: Dict):
        self.execute_query("""
            INSERT OR REPLACE INTO collected_laps
            (run_id, lap, direction, samples, lap_time_s, interferences, status, recorded_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, [run_id, stats['lap'], stats.get('direction'), stats.get('samples', 0),
              stats.get('lap_time_s'), stats.get('interferences', 0), stats['status'], datetime.now()])

    def get_collected_laps(self, run_id: str, status: Optional[str] = 'success') -> List[int]:
        """Lap numbers of a collection run, successful ones by default"""
        if status is None:
            rows = self.execute_query("SELECT lap FROM collected_laps WHERE run_id = ? ORDER BY lap", [run_id])
        else:
            rows = self.execute_query(
                "SELECT lap FROM collected_laps WHERE run_id = ? AND status = ? ORDER BY lap", [run_id, status])
        return [r[0] for r in rows]

    def record_training(
        self,
        behavior_tag: str,
        model_path,
        history,
        seconds: float,
        checksum: str,
        run_id: Optional[str] = None,
    ) -> str:
        """
        Store a training run and its per-epoch losses

        Args:
            history: nnet.TrainingHistory
            seconds: wall-clock training time
            checksum: nnet.weights_checksum of the trained parameters
        """
        run_id = run_id or new_run_id()
        rows = history.to_rows()
        final = rows[-1] if rows else {'train_loss': None, 'val_loss': None}
        self.execute_query("""
            INSERT OR REPLACE INTO training_runs
            (run_id, behavior_tag, model_path, epochs, steps_per_epoch, final_train_loss, final_val_loss,
             seconds, weights_checksum, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, [run_id, behavior_tag, str(model_path), len(rows), history.steps_per_epoch,
              final['train_loss'], final['val_loss'], seconds, checksum, datetime.now()])
        for row in rows:
            self.execute_query("""
                INSERT OR REPLACE INTO epoch_history (run_id, epoch, train_loss, val_loss, seconds)
                VALUES (?, ?, ?, ?, ?)
            """, [run_id, row['epoch'], row['train_loss'], row['val_loss'], row['seconds']])
        logger.info(f"Tracked training run {run_id}: {len(rows)} epoch(s) in {seconds:.1f}s")
        return run_id

    def record_latency(self, model_path, summary: Dict[str, float], run_id: Optional[str] = None) -> str:
        """Store a LatencyStats.summary()"""
        run_id = run_id or new_run_id()
        self.execute_query("""
            INSERT OR REPLACE INTO latency_samples
            (run_id, model_path, count, mode_ms, mean_ms, p50_ms, p95_ms, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, [run_id, str(model_path), summary['count'], summary['mode_ms'], summary['mean_ms'],
              summary['p50_ms'], summary['p95_ms'], datetime.now()])
        return run_id

    def record_experiment(self, report, run_id: Optional[str] = None) -> str:
        """Store one row per condition of an experiments.ExperimentReport"""
        from .experiments import format_interval

        run_id = run_id or new_run_id()
        interval = format_interval(report)
        now = datetime.now()
        for c in report.conditions:
            self.execute_query("""
                INSERT INTO experiment_results
                (run_id, experiment, scenario, condition, value, eta, lap_time_s, interferences,
                 completed, interval, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """, [run_id, report.experiment, report.scenario, c.label, c.value, c.eta, c.lap_time_s,
                  c.interferences, c.completed, interval, now])
        logger.info(f"Tracked experiment {report.experiment} ({len(report.conditions)} condition(s))")
        return run_id

    def summary_rows(self) -> Dict[str, List[Dict]]:
        """Every tracking table as a list of dicts"""
        conn = self.connect()
        out = {}
        for table in TABLES:
            df = conn.execute(f"SELECT * FROM {table}").df()
            out[table] = json.loads(df.to_json(orient='records', date_format='iso'))
        return out


def publish_summary(rows_by_table: Dict[str, List[Dict]], config: Optional[Dict] = None):
    """
    Load run summaries into a dlt pipeline with the DuckDB destination

    Every ledger table is published in full and replaces its previous copy, so repeated
    publishes never duplicate rows. A 'latest_summary' table holds the row counts.
    Failures are logged, never raised.

    Returns:
        The dlt load info, or None when publishing failed or had nothing to load
    """
    config = config or TRACKING_CONFIG
    resources = [
        dlt.resource(rows, name=table, write_disposition='replace')
        for table, rows in rows_by_table.items() if rows
    ]
    if not resources:
        logger.info("Nothing to publish")
        return None
    latest = {
        'published_at': datetime.now().isoformat(),
        **{f"{table}_rows": len(rows) for table, rows in rows_by_table.items()},
    }
    resources.append(dlt.resource([latest], name='latest_summary', write_disposition='replace'))
    try:
        pipeline = dlt.pipeline(
            pipeline_name=config['pipeline_name'],
            destination=dlt.destinations.duckdb(config['destination_db']),
            dataset_name=config['dataset_name'],
        )
        load_info = pipeline.run(resources)
    except Exception as e:
        logger.warning(f"Publishing run summaries failed: {e}")
        return None
    logger.info(f"Published run summaries: {load_info}")
    return load_info
