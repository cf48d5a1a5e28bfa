#!/usr/bin/env python3
"""
HCAN command-line entry point.

Requirements:
    pip install -r requirements.txt

Usage:
    python main.py generate-data --out data/
    python main.py train --data data/ --out model.ckpt
    python main.py gradcheck --size small
"""

import sys

from hcan.cli import main


if __name__ == "__main__":
    sys.exit(main())
