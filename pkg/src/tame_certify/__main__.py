#!/usr/bin/env python3
"""Entry point for tame-certify - certified exponents for tame-rebalanced circuits."""

import sys

from .cli import main_from_argv


def main() -> None:
    """Main entry point with command-line argument support."""
    sys.exit(main_from_argv())


if __name__ == "__main__":
    main()
