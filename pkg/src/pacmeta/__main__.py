import sys

from pacmeta.harness.cli import main

sys.exit(main())
