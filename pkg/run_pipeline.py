#!/usr/bin/env python3
"""
Simple script to run the behavioral cloning pipeline for one behavior preset

Usage: python run_pipeline.py [simplistic|rigorous|collision]
"""

import sys

from pipeline.cloning_pipeline import RunConfig, run_pipeline

if __name__ == '__main__':
    behavior = sys.argv[1] if len(sys.argv) > 1 else 'simplistic'
    print(f"Starting Behavioral Cloning Pipeline ({behavior})...")
    print("=" * 60)

    try:
        result = run_pipeline(RunConfig(behavior=behavior))
        print("\n" + "=" * 60)
        print("Pipeline completed successfully!")
        print(f"Samples: {result['samples']}")
        print(f"Model: {result['model_path']}")
        if result['report_paths']:
            print(f"Report: {result['report_paths'][1]}")
    except Exception as e:
        print("\n" + "=" * 60)
        print(f"Pipeline failed with error: {e}")
        raise
