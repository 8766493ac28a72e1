"""Module entry point: `python -m navmoe ...`."""

import sys

from .cli import main

sys.exit(main())
