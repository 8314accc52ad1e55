import sys

from eralm.cli import main

sys.exit(main())
