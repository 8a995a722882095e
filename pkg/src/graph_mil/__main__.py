from __future__ import annotations

import sys

from graph_mil.cli import main


sys.exit(main())
