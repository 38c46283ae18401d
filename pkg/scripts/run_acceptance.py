"""Run the acceptance suite and print one PASS/FAIL line per criterion.

Usage: python scripts/run_acceptance.py [extra pytest args]
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


if __name__ == "__main__":
    args = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"] + sys.argv[1:]
    sys.exit(pytest.main(args))
