import sys

from mpdr.cli import main

sys.exit(main())
