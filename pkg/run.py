#!/usr/bin/env python3
"""
Run script for the micropolar homogenization toolkit.
Forwards the command line to the CLI, e.g. ``python run.py pipeline --plot``.
"""
import sys
import os

# Add current directory to path
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, current_dir)


def run() -> int:
    """Run the command line interface."""
    # Import here to ensure path is set correctly
    from src.cli.app import main
    return main()


if __name__ == "__main__":
    sys.exit(run())
