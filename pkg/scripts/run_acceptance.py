"""Run the acceptance suite and print one PASS/FAIL line per criterion."""
import argparse
import subprocess
import sys


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-k", help="pytest -k expression, e.g. '1_ or 2_'")
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "pytest", "-q", "-rN", "tests/test_acceptance.py"]
    if args.k:
        cmd += ["-k", args.k]
    r = subprocess.run(cmd, capture_output=True, text=True)
    lines = [l for l in r.stdout.splitlines() if l.startswith("criterion ")]
    print("\n".join(lines) if lines else r.stdout)
    sys.exit(r.returncode)


if __name__ == "__main__":
    main()
