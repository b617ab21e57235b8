import sys

from gridshield.cli import main

sys.exit(main())
