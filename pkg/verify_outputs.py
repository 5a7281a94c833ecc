import filecmp
import os
import sys
import tempfile

from dotenv import load_dotenv

load_dotenv()

from app import main as run_command

# Reruns one command twice with the same config and seed and compares every CSV.

command = sys.argv[1] if len(sys.argv) > 1 else "transient"
extra = sys.argv[2:]
print(f"Checking determinism of '{command}' {' '.join(extra)}")

with tempfile.TemporaryDirectory() as tmp:
    dirs = [os.path.join(tmp, name) for name in ("first", "second")]
    for d in dirs:
        code = run_command([command, "--quiet", "--out", d] + extra)
        if code != 0:
            print(f"Error: command exited with {code}")
            sys.exit(code)

    csvs = sorted(f for f in os.listdir(dirs[0]) if f.endswith(".csv"))
    if not csvs:
        print("Error: no CSV files produced")
        sys.exit(1)

    _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], csvs, shallow=False)
    print(f"Compared {len(csvs)} CSV files:")
    for name in csvs:
        status = "DIFFERENT" if name in mismatch or name in errors else "identical"
        print(f" - {name}: {status}")

    if mismatch or errors:
        sys.exit(1)
