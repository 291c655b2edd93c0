"""Run the command-line interface: ``python -m sancdifi``."""

import sys

from .cli import main

sys.exit(main())
