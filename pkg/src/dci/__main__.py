import sys

from dci.cli import main

sys.exit(main())
