#!/usr/bin/env python3
"""
AIFKit launcher
Puts src/ on the path and runs the command-line front end.
"""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from aifkit_cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
