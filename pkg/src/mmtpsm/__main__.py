"""Run the command line with ``python -m mmtpsm``."""

import sys

from mmtpsm.cli import main

sys.exit(main())
