"""Run the acceptance suite and print only the per-criterion verdicts."""
import subprocess
import sys
from pathlib import Path

root = Path(__file__).resolve().parents[1]
proc = subprocess.run([sys.executable, "-m", "pytest", str(root / "tests" / "test_acceptance.py"),
                       "-q", "-p", "no:cacheprovider"], capture_output=True, text=True, cwd=root)
for line in proc.stdout.splitlines():
    if line.startswith("CRITERION"):
        print(line)
sys.exit(proc.returncode)
