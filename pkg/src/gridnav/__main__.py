import sys

from gridnav.cli import main

sys.exit(main())
