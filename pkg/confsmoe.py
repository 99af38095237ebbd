#!/usr/bin/env python3
"""
ConfSMoE Lab
Entry point: python confsmoe.py {generate,train,sweep,analyze} [flags]
"""

import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
