#!/usr/bin/env python3
"""
UniControl-Desk - Unified controllable diffusion at desk scale

Main Entry Point

Generates synthetic datasets, trains the unified control model, samples
images for single, hybrid and unseen conditions and runs the checks.
All work is dispatched through the command-line controller.
"""

import sys
from typing import List, Optional

from unicontrol_desk.controllers.main_controller import MainController


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main application entry point.

    Returns:
        Process exit code
    """
    controller = MainController()
    return controller.dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
