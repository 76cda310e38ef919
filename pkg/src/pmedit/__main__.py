"""Allow `python -m pmedit ...` as an alias for the pmedit console script."""

import sys

from .cli import main

sys.exit(main())
