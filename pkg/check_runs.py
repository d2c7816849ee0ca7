#!/usr/bin/env python3
"""Check what's stored in the run tracking ledger and the published dlt dataset"""

from pathlib import Path

import duckdb

from pipeline.config import TRACKING_CONFIG
from pipeline.tracking_utils import TABLES, RunTracker

print("=" * 60)
print(f"RUN LEDGER ({TRACKING_CONFIG['tracking_db']})")
print("=" * 60)
with RunTracker() as tracker:
    for table in TABLES:
        print(f"{table}: {tracker.get_table_row_count(table):,} rows")

    latest = tracker.execute_query("""
        SELECT run_id, behavior_tag, epochs, final_train_loss, seconds
        FROM training_runs
        ORDER BY created_at DESC
        LIMIT 5
    """)
    for run_id, behavior, epochs, loss, seconds in latest:
        print(f"  {run_id} {behavior}: {epochs} epochs, loss {loss:.6f}, {seconds:.1f}s")

print("\n" + "=" * 60)
print(f"DUCKDB (dlt published summaries, {TRACKING_CONFIG['destination_db']})")
print("=" * 60)
if not Path(TRACKING_CONFIG['destination_db']).exists():
    print("nothing published yet")
else:
    conn = duckdb.connect(TRACKING_CONFIG['destination_db'])
    tables = conn.execute("""
        SELECT table_name
        FROM duckdb_tables()
        WHERE schema_name = ?
        ORDER BY table_name
    """, [TRACKING_CONFIG['dataset_name']]).fetchall()

    for (table,) in tables:
        count = conn.execute(f"SELECT count(*) FROM {TRACKING_CONFIG['dataset_name']}.{table}").fetchone()[0]
        print(f"{table}: {count} rows")

    conn.close()
