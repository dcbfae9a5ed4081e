import sys

from consensus_lp.cli import main

sys.exit(main())
