import sys

from graphmamba.cli import main

sys.exit(main())
