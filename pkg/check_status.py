#!/usr/bin/env python3
"""
Setup check for the optimality verifier: interpreter, numeric stack,
.env settings and the shipped problem files.
"""

import importlib
import os
import sys
from pathlib import Path

FIXTURES_DIR = Path(__file__).parent / 'fixtures'
MIN_PYTHON = (3, 8)

# distribution name -> import name
REQUIRED = {
    'numpy': 'numpy',
    'scipy': 'scipy',
    'python-dotenv': 'dotenv',
    'pytest': 'pytest',
}


def check_python_version():
    print("🐍 Interpreter:")
    current = sys.version_info[:3]
    label = '.'.join(str(part) for part in current)
    if current[:2] < MIN_PYTHON:
        print(f"❌ Python {label} (needs {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+)")
        return False
    print(f"✅ Python {label}")
    return True


def check_dependencies():
    """Import every required package and print its version."""
    print("\n📦 Numeric stack:")
    absent = []
    for dist, module_name in REQUIRED.items():
        try:
            module = importlib.import_module(module_name)
        except ImportError:
            print(f"❌ {dist} not importable")
            absent.append(dist)
            continue
        print(f"✅ {dist} {getattr(module, '__version__', '')}".rstrip())

    if absent:
        print(f"\n⚠️  Install the missing packages ({', '.join(absent)}) with: pip install -r requirements.txt")
    return not absent


def check_environment():
    """Validate .env in the working directory if there is one."""
    print("\n🔧 Settings:")
    if not os.path.exists('.env'):
        print("ℹ️  No .env file (defaults in use)")
        print("Optional: cp env.example .env")
        return True
    try:
        from verification_config import load_settings
        settings = load_settings('.env')
    except ValueError as e:
        print(f"❌ Invalid .env: {e}")
        return False
    print(f"✅ .env loaded (seed {settings.seed}, samples {settings.samples}, tol scale {settings.tol_scale})")
    return True


def check_fixtures():
    """Check that every shipped problem file parses."""
    print("\n🗂️  Fixture Status:")
    paths = sorted(FIXTURES_DIR.glob('*.json'))
    if not paths:
        print("❌ No fixtures found")
        return False
    try:
        from problem_file import parse_problem
    except ImportError as e:
        print(f"❌ Cannot import the problem parser: {e}")
        return False

    ok = True
    for path in paths:
        try:
            problem = parse_problem(path)
            print(f"✅ {path.name} ({problem.kind.value}, digest {problem.digest()[:12]})")
        except ValueError as e:
            print(f"❌ {path.name}: {e}")
            ok = False
    return ok


def main():
    print("🔍 Optimality Verifier - Status Check")
    print("=" * 50)

    results = [check_python_version(), check_dependencies()]
    results.append(check_environment())
    # the fixture check imports numpy through the parser
    results.append(results[1] and check_fixtures())

    print("\n" + "=" * 50)
    if all(results):
        print("✅ Ready. Try:")
        print("   python nsopt_verify.py check-second fixtures/abs_fixture.json")
        print("   python -m pytest")
        return 0
    print(f"⚠️  {results.count(False)} check(s) failed; see above.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
