import sys

from stafem.cli import main

sys.exit(main())
