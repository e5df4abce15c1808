"""``python -m specmap``."""

import sys

from .cli import main

sys.exit(main())
