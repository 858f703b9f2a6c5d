#!/usr/bin/env python3
"""Development scripts for PestVL-Net."""

import subprocess
import sys


def test():
    """Run the fast test suite."""
    subprocess.run(["pytest", "-m", "not slow", "tests/"])


def test_all():
    """Run every test, including the toy-dataset training runs."""
    subprocess.run(["pytest", "tests/"])


def lint():
    """Run formatting check and type checking."""
    subprocess.run(["black", "--check", "pestvl_net/", "tests/"])
    subprocess.run(["mypy", "pestvl_net/"])


def format_code():
    """Format code with black."""
    subprocess.run(["black", "pestvl_net/", "tests/"])


def self_test():
    """Run the embedded oracle suites."""
    subprocess.run([sys.executable, "-m", "pestvl_net.main", "self-test"])


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("Usage: python scripts.py <command>")
        print("Commands: test, test-all, lint, format-code, self-test")
        sys.exit(1)

    command = sys.argv[1].replace("-", "_")
    if hasattr(sys.modules[__name__], command):
        getattr(sys.modules[__name__], command)()
    else:
        print(f"Unknown command: {sys.argv[1]}")
        sys.exit(1)
