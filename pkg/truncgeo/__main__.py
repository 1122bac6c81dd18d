"""Allow running truncgeo as a module: python -m truncgeo"""

import sys

from truncgeo.cli import main

sys.exit(main())
