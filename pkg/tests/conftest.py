"""
Pytest configuration for tame-certify tests.

This file ensures that the src package is importable in all test files
without requiring per-file sys.path manipulation. Tests that solve the
full published families take minutes; they only run when
TAME_CERTIFY_SLOW=1 is set.
"""

import os
import sys

# Add src directory to Python path for testing
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
