import sys

from fkhess.cli import main

sys.exit(main())
