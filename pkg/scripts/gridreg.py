#!/usr/bin/env python3
"""
Command-line interface for sparse control-grid registration.

Run `python scripts/gridreg.py --help` for the subcommand list.
"""

import os
import sys

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli.dispatch import main


if __name__ == "__main__":
    main()
