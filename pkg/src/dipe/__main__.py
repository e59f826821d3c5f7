import sys

from dipe.cli import main

sys.exit(main())
