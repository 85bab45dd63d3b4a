#!/usr/bin/env python3
"""Backward-compatible wrapper. Calls sanran.cli.main."""
from sanran.cli import main

if __name__ == "__main__":
    main()
