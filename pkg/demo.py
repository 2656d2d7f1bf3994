#!/usr/bin/env python3
"""
Demonstration script for simplexgrad.
Runs shortened copies of the bundled configurations through the CLI: the
optimizer runs stop after 10 iterations with 2 trials and the variance study
uses 5 base points with 10 trials each.
"""

import os
import subprocess
import sys
from pathlib import Path

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import dump_config, load_config_template, parse_config

DEMO_ITERATIONS = 10
DEMO_TRIALS = 2


def run_command(command):
    """Run a command and print the output."""
    print(f"\n🚀 Running: {command}")
    print("=" * 60)
    try:
        result = subprocess.run(command, shell=True, capture_output=True, text=True)
        print(result.stdout)
        if result.stderr:
            print("Errors:", result.stderr)
        if result.returncode != 0:
            print(f"Exit code: {result.returncode}")
    except Exception as e:
        print(f"Error running command: {e}")


def write_short_config(name, config_dir):
    """Copy a bundled configuration with a short horizon and return its path."""
    data = load_config_template(name).model_dump(mode="json")
    data["optimize"]["schedule"]["max_iter"] = min(data["optimize"]["schedule"]["max_iter"], DEMO_ITERATIONS)
    data["optimize"]["trials"] = min(data["optimize"]["trials"], DEMO_TRIALS)
    data["estimate"]["points"] = min(data["estimate"]["points"], 5)
    data["estimate"]["trials"] = min(data["estimate"]["trials"], 10)
    path = Path(config_dir) / f"{name}.json"
    path.write_text(dump_config(parse_config(data)), encoding="utf-8")
    return str(path)


def main():
    """Run the demonstration."""
    print("🤖 simplexgrad demo")
    print("=" * 60)

    if not os.path.exists("main.py"):
        print("❌ Error: Please run this script from the project root directory.")
        return

    py = sys.executable
    out = "results/demo"
    config_dir = Path(out) / "configs"
    config_dir.mkdir(parents=True, exist_ok=True)
    short = {
        name: write_short_config(name, config_dir)
        for name in ["moments", "default", "rosenbrock_mdsa", "rosenbrock_mdsa_fd", "mg1_fwsa", "mg1_mdsa"]
    }

    print("\n📋 Steps:")
    print("1. Moment conditions of delta-star")
    print("2. Estimator variances at the default point")
    print("3. MDSA on Rosenbrock over a KL ball, Dirichlet and finite-difference gradients")
    print("4. FWSA on the M/G/1 queue over a moment set")
    print("5. MDSA on the M/G/1 queue over a KL ball")
    print("6. Version info")

    print("\n" + "=" * 60)
    print("📝 Demo 1: verify-moments")
    run_command(f"{py} main.py verify-moments --config {short['moments']} --out {out}/moments")

    print("\n" + "=" * 60)
    print("📝 Demo 2: estimate")
    run_command(f"{py} main.py estimate --config {short['default']} --out {out}/estimate --threads 4")

    print("\n" + "=" * 60)
    print("📝 Demo 3: optimize (Rosenbrock, MDSA)")
    run_command(f"{py} main.py optimize --config {short['rosenbrock_mdsa']} --out {out}/rosenbrock")
    run_command(f"{py} main.py optimize --config {short['rosenbrock_mdsa_fd']} --out {out}/rosenbrock_fd")

    print("\n" + "=" * 60)
    print("📝 Demo 4: optimize (M/G/1, FWSA)")
    run_command(f"{py} main.py optimize --config {short['mg1_fwsa']} --out {out}/mg1_fwsa")

    print("\n" + "=" * 60)
    print("📝 Demo 5: optimize (M/G/1, MDSA)")
    run_command(f"{py} main.py optimize --config {short['mg1_mdsa']} --out {out}/mg1_mdsa")

    print("\n" + "=" * 60)
    print("📝 Demo 6: Version info")
    run_command(f"{py} main.py version")

    print("\n" + "=" * 60)
    print("🎉 Demo completed!")
    print(f"\n💡 Results are in {out}/. The full runs use the bundled configurations directly:")
    print(f"   {py} main.py optimize --config rosenbrock_mdsa")
    print(f"   {py} main.py bench --config table4 --threads 4")


if __name__ == "__main__":
    main()
