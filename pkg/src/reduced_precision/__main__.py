import sys

from reduced_precision.cli import main

sys.exit(main())
