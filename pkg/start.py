#!/usr/bin/env python3
"""
Startup script for the sensitivity analysis toolkit.
Validates the environment, then hands the command line to cli.main.
"""

import sys
from pathlib import Path

from cli import Colors, main, print_colored, print_error, print_header, print_info, print_step, print_success

REQUIRED_PACKAGES = ["numpy", "scipy", "pandas", "dotenv", "tqdm"]


def validate_environment() -> bool:
    """Check that dependencies import and the output folders exist."""
    print_header("ENVIRONMENT CHECK")
    validation_passed = True

    print_step(1, 3, "Checking environment configuration")
    if Path(".env").exists():
        print_success(".env found")
    else:
        print_info("No .env file; using built-in defaults (see .env.example)")

    print_step(2, 3, "Checking Python dependencies")
    for package in REQUIRED_PACKAGES:
        try:
            __import__(package)
        except ImportError:
            print_error(f"{package} not installed")
            validation_passed = False

    print_step(3, 3, "Creating output directories")
    from config import config
    config.create_directories()
    print_success(f"Results go to {config.OUTPUT_DIR}/")

    return validation_passed


if __name__ == "__main__":
    print_colored("Risk-ratio sensitivity analysis for SIPW estimates", Colors.BOLD + Colors.HEADER)
    if not validate_environment():
        print_error("Setup validation failed. Install requirements.txt and try again.")
        sys.exit(1)
    sys.exit(main(sys.argv[1:]))
