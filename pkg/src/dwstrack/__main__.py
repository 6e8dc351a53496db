import sys

from dwstrack.cli import main

sys.exit(main())
